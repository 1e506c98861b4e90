//! Human review of removal candidates.
//!
//! A [`DecisionStore`] journals keep/remove verdicts to an append-only JSON
//! Lines file and replays it on open; [`router`] exposes the store and the
//! candidate images over HTTP for the review UI.

use std::path::PathBuf;

use prunenet::dataset::ImageId;

mod http;
mod store;

pub use http::{router, serve, ReviewService};
pub use store::{
    DecisionStore, FlaggedItem, Finalized, Page, StatusFilter, StorePaths, Tally, FORCED_REVIEWER,
    MAX_PAGE_SIZE,
};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("image id {0} is not a review candidate")]
    UnknownId(ImageId),
    #[error("review already finalized")]
    AlreadyFinalized,
    #[error("{} candidates are still undecided", .0.len())]
    Incomplete(Vec<ImageId>),
    #[error("bad page request: page {page}, page_size {page_size}")]
    BadPage { page: usize, page_size: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Journal {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl ReviewError {
    pub fn code(&self) -> &'static str {
        match self {
            ReviewError::UnknownId(_) => "unknown_id",
            ReviewError::AlreadyFinalized => "already_finalized",
            ReviewError::Incomplete(_) => "incomplete",
            ReviewError::BadPage { .. } => "bad_page",
            ReviewError::Io { .. } | ReviewError::Journal { .. } => "storage",
        }
    }
}

/// Current time as RFC 3339, the format decisions carry.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}
