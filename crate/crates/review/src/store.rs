use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use prunenet::dataset::ImageId;
use prunenet::pruning::{Candidate, Decision, DecisionLog, FoldEvidence, RemovalSet, Verdict};
use serde::{Deserialize, Serialize};

use crate::ReviewError;

pub const FORCED_REVIEWER: &str = "force-remove-undecided";

/// Where the store keeps its files.
#[derive(Clone, Debug)]
pub struct StorePaths {
    /// Append-only JSON Lines decision journal.
    pub journal: PathBuf,
    /// Finalized [`DecisionLog`], written once by [`DecisionStore::finalize`].
    pub final_log: PathBuf,
    /// Ids judged `remove`, as a JSON array.
    pub removal_list: PathBuf,
}

impl StorePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            journal: dir.join("decisions.jsonl"),
            final_log: dir.join("decision_log.json"),
            removal_list: dir.join("reviewed_removal.json"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub candidates: usize,
    pub decided: usize,
    pub keep: usize,
    pub remove: usize,
    pub undecided: usize,
    pub finalized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Undecided,
    Decided,
    Keep,
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedItem {
    pub id: ImageId,
    pub actual: u8,
    pub evidence: Vec<FoldEvidence>,
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page: usize,
    pub page_size: usize,
    /// Items matching the filter across all pages.
    pub total: usize,
    pub pages: usize,
    pub items: Vec<FlaggedItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    pub log: DecisionLog,
    pub removal_ids: Vec<ImageId>,
}

pub const MAX_PAGE_SIZE: usize = 1000;

/// Review state over one candidate set, journaled so it survives restarts.
#[derive(Debug)]
pub struct DecisionStore {
    candidates: Vec<Candidate>,
    live: BTreeMap<ImageId, Decision>,
    history: Vec<Decision>,
    journal: File,
    paths: StorePaths,
    finalized: Option<Finalized>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReviewError + '_ {
    move |source| ReviewError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl DecisionStore {
    /// Opens the journal, replaying any decisions already in it.
    pub fn open(removal: &RemovalSet, paths: StorePaths) -> Result<Self, ReviewError> {
        let mut candidates = removal.candidates.clone();
        candidates.sort_by_key(|c| c.id);
        let mut history = Vec::new();
        if paths.journal.exists() {
            let file = File::open(&paths.journal).map_err(io_err(&paths.journal))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&paths.journal))?;
                if line.trim().is_empty() {
                    continue;
                }
                let decision: Decision =
                    serde_json::from_str(&line).map_err(|source| ReviewError::Journal {
                        path: paths.journal.clone(),
                        line: n + 1,
                        source,
                    })?;
                history.push(decision);
            }
        }
        if let Some(parent) = paths.journal.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&paths.journal)
            .map_err(io_err(&paths.journal))?;
        let finalized = if paths.final_log.exists() {
            let bytes = fs::read(&paths.final_log).map_err(io_err(&paths.final_log))?;
            let log: DecisionLog =
                serde_json::from_slice(&bytes).map_err(|source| ReviewError::Journal {
                    path: paths.final_log.clone(),
                    line: 0,
                    source,
                })?;
            let removal_ids = log.removal_ids().into_iter().collect();
            Some(Finalized { log, removal_ids })
        } else {
            None
        };
        let mut store = Self {
            candidates,
            live: BTreeMap::new(),
            history: Vec::new(),
            journal,
            paths,
            finalized,
        };
        for d in history {
            if store.position(d.id).is_some() {
                store.live.insert(d.id, d.clone());
                store.history.push(d);
            }
        }
        Ok(store)
    }

    fn position(&self, id: ImageId) -> Option<usize> {
        self.candidates.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn is_candidate(&self, id: ImageId) -> bool {
        self.position(id).is_some()
    }

    pub fn tally(&self) -> Tally {
        let remove = self
            .live
            .values()
            .filter(|d| d.verdict == Verdict::Remove)
            .count();
        let decided = self.live.len();
        Tally {
            candidates: self.candidates.len(),
            decided,
            keep: decided - remove,
            remove,
            undecided: self.candidates.len() - decided,
            finalized: self.finalized.is_some(),
        }
    }

    pub fn verdict(&self, id: ImageId) -> Option<Verdict> {
        self.live.get(&id).map(|d| d.verdict)
    }

    /// One page (1-based) of candidates ordered by id.
    pub fn list(
        &self,
        page: usize,
        page_size: usize,
        class: Option<u8>,
        status: Option<StatusFilter>,
    ) -> Result<Page, ReviewError> {
        if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ReviewError::BadPage { page, page_size });
        }
        let matching: Vec<&Candidate> = self
            .candidates
            .iter()
            .filter(|c| class.is_none_or(|k| c.actual == k))
            .filter(|c| {
                let v = self.verdict(c.id);
                match status {
                    None => true,
                    Some(StatusFilter::Undecided) => v.is_none(),
                    Some(StatusFilter::Decided) => v.is_some(),
                    Some(StatusFilter::Keep) => v == Some(Verdict::Keep),
                    Some(StatusFilter::Remove) => v == Some(Verdict::Remove),
                }
            })
            .collect();
        let total = matching.len();
        let pages = total.div_ceil(page_size);
        if page > pages.max(1) {
            return Err(ReviewError::BadPage { page, page_size });
        }
        let items = matching
            .into_iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|c| FlaggedItem {
                id: c.id,
                actual: c.actual,
                evidence: c.evidence.clone(),
                verdict: self.verdict(c.id),
            })
            .collect();
        Ok(Page {
            page,
            page_size,
            total,
            pages,
            items,
        })
    }

    fn append(&mut self, decision: &Decision) -> Result<(), ReviewError> {
        let mut line = serde_json::to_vec(decision).expect("decision serializes");
        line.push(b'\n');
        self.journal
            .write_all(&line)
            .and_then(|_| self.journal.sync_data())
            .map_err(io_err(&self.paths.journal))
    }

    /// Durably records a verdict, replacing any earlier one for `id`.
    pub fn decide(
        &mut self,
        id: ImageId,
        verdict: Verdict,
        reviewer: Option<String>,
        decided_at: String,
    ) -> Result<Tally, ReviewError> {
        if self.finalized.is_some() {
            return Err(ReviewError::AlreadyFinalized);
        }
        if !self.is_candidate(id) {
            return Err(ReviewError::UnknownId(id));
        }
        let decision = Decision {
            id,
            verdict,
            decided_at,
            reviewer,
        };
        self.append(&decision)?;
        self.live.insert(id, decision.clone());
        self.history.push(decision);
        Ok(self.tally())
    }

    pub fn undecided(&self) -> Vec<ImageId> {
        self.candidates
            .iter()
            .map(|c| c.id)
            .filter(|id| !self.live.contains_key(id))
            .collect()
    }

    /// Closes the review. With `force`, undecided candidates are recorded as
    /// `remove` first; without it they are an error.
    pub fn finalize(&mut self, force: bool, decided_at: String) -> Result<Finalized, ReviewError> {
        if self.finalized.is_some() {
            return Err(ReviewError::AlreadyFinalized);
        }
        let undecided = self.undecided();
        if !undecided.is_empty() {
            if !force {
                return Err(ReviewError::Incomplete(undecided));
            }
            for id in undecided {
                self.decide(
                    id,
                    Verdict::Remove,
                    Some(FORCED_REVIEWER.to_string()),
                    decided_at.clone(),
                )?;
            }
        }
        let log = DecisionLog {
            decisions: self.live.values().cloned().collect(),
            candidate_count: self.candidates.len(),
            finalized: true,
        };
        let removal_ids: Vec<ImageId> = log.removal_ids().into_iter().collect();
        write_synced(
            &self.paths.removal_list,
            &serde_json::to_vec(&removal_ids).expect("ids serialize"),
        )?;
        write_synced(
            &self.paths.final_log,
            &serde_json::to_vec_pretty(&log).expect("log serializes"),
        )?;
        let done = Finalized { log, removal_ids };
        self.finalized = Some(done.clone());
        Ok(done)
    }

    pub fn finalized(&self) -> Option<&Finalized> {
        self.finalized.as_ref()
    }

    /// Every journaled decision in arrival order.
    pub fn history(&self) -> &[Decision] {
        &self.history
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), ReviewError> {
    let mut file = File::create(path).map_err(io_err(path))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use prunenet::dataset::class_histogram;
    use prunenet::pruning::Provenance;

    fn removal(n: u32) -> RemovalSet {
        let candidates: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                id: i * 3,
                actual: (i % 10) as u8,
                evidence: vec![FoldEvidence { fold: 0, predicted: 1, confidence: 0.5 }],
            })
            .collect();
        let labels: Vec<u8> = candidates.iter().map(|c| c.actual).collect();
        RemovalSet {
            ids: candidates.iter().map(|c| c.id).collect(),
            per_class: class_histogram(&labels),
            provenance: Provenance::AutoIntersection,
            candidates,
        }
    }

    fn now() -> String {
        "2024-05-01T12:00:00+00:00".into()
    }

    #[test]
    fn paging_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let store = DecisionStore::open(&removal(489), StorePaths::in_dir(dir.path())).unwrap();
        let first = store.list(1, 50, None, None).unwrap();
        assert_eq!((first.total, first.pages, first.items.len()), (489, 10, 50));
        assert_eq!(store.list(10, 50, None, None).unwrap().items.len(), 39);
        assert!(matches!(store.list(11, 50, None, None), Err(ReviewError::BadPage { .. })));
        assert!(matches!(store.list(0, 50, None, None), Err(ReviewError::BadPage { .. })));
        assert!(matches!(store.list(1, 0, None, None), Err(ReviewError::BadPage { .. })));
        let fours = store.list(1, 1000, Some(4), None).unwrap();
        assert!(fours.items.iter().all(|i| i.actual == 4));
        assert_eq!(fours.total, 49);
        let ids: Vec<_> = first.items.iter().map(|i| i.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let store = DecisionStore::open(&removal(0), StorePaths::in_dir(dir.path())).unwrap();
        let page = store.list(1, 50, None, None).unwrap();
        assert_eq!((page.total, page.items.len()), (0, 0));
    }

    #[test]
    fn decisions_overwrite_and_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let paths = StorePaths::in_dir(dir.path());
        let mut store = DecisionStore::open(&removal(5), paths.clone()).unwrap();
        assert_eq!(store.decide(3, Verdict::Keep, None, now()).unwrap().decided, 1);
        let t = store.decide(3, Verdict::Remove, None, now()).unwrap();
        assert_eq!((t.decided, t.remove, t.keep), (1, 1, 0));
        assert!(matches!(store.decide(4, Verdict::Keep, None, now()), Err(ReviewError::UnknownId(4))));
        drop(store);

        let mut store = DecisionStore::open(&removal(5), paths.clone()).unwrap();
        assert_eq!(store.verdict(3), Some(Verdict::Remove));
        assert_eq!(store.history().len(), 2);
        let undecided = store.list(1, 10, None, Some(StatusFilter::Undecided)).unwrap();
        assert_eq!(undecided.total, 4);
        match store.finalize(false, now()) {
            Err(ReviewError::Incomplete(ids)) => assert_eq!(ids, vec![0, 6, 9, 12]),
            other => panic!("{other:?}"),
        }
        for id in [0, 6, 9] {
            store.decide(id, Verdict::Remove, None, now()).unwrap();
        }
        store.decide(12, Verdict::Keep, Some("r".into()), now()).unwrap();
        let done = store.finalize(false, now()).unwrap();
        assert_eq!(done.removal_ids, vec![0, 3, 6, 9]);
        assert!(done.log.finalized);
        assert!(matches!(store.decide(0, Verdict::Keep, None, now()), Err(ReviewError::AlreadyFinalized)));
        drop(store);

        let store = DecisionStore::open(&removal(5), paths.clone()).unwrap();
        assert!(store.tally().finalized);
        let on_disk: Vec<u32> = serde_json::from_slice(&fs::read(&paths.removal_list).unwrap()).unwrap();
        assert_eq!(on_disk, vec![0, 3, 6, 9]);
    }

    #[test]
    fn forced_finalize_removes_undecided() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = DecisionStore::open(&removal(4), StorePaths::in_dir(dir.path())).unwrap();
        store.decide(0, Verdict::Keep, None, now()).unwrap();
        let done = store.finalize(true, now()).unwrap();
        assert_eq!(done.removal_ids, vec![3, 6, 9]);
        assert_eq!(done.log.decisions.len(), 4);
    }
}
