//! Noisy-label flagging, cross-fold intersection, and removal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{class_histogram, remove_indices, ClassHistogram, ImageId, ImageSet, NUM_CLASSES};

pub const DEFAULT_THRESHOLD: f64 = 0.99;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PruningError {
    #[error("image id {0} appears more than once")]
    DuplicateId(ImageId),
    #[error("confidence threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("no flag sets to intersect")]
    EmptyInput,
    #[error("image id {0} is not in the pool")]
    UnknownId(ImageId),
    #[error("{} removal candidates have no decision (first: {:?})", .0.len(), .0.first())]
    IncompleteDecisions(Vec<ImageId>),
    #[error("decision for id {0}, which is not a removal candidate")]
    UnexpectedDecision(ImageId),
}

pub type Result<T, E = PruningError> = std::result::Result<T, E>;

/// One model's verdict on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: ImageId,
    pub actual: u8,
    pub predicted: u8,
    /// Maximum softmax probability.
    pub confidence: f64,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.actual == self.predicted
    }
}

/// Images one fold model flags: wrongly classified (`wc`) and correct but at
/// or below the confidence threshold (`cn`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagSet {
    pub fold_index: usize,
    pub threshold: f64,
    pub wc: BTreeSet<ImageId>,
    pub cn: BTreeSet<ImageId>,
    /// The fold model's record for every flagged id.
    pub records: Vec<PredictionRecord>,
}

impl FlagSet {
    pub fn flagged(&self) -> BTreeSet<ImageId> {
        self.wc.union(&self.cn).copied().collect()
    }

    pub fn record(&self, id: ImageId) -> Option<&PredictionRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }
}

pub fn flag_noisy(
    fold_index: usize,
    records: &[PredictionRecord],
    threshold: f64,
) -> Result<FlagSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PruningError::BadThreshold(threshold));
    }
    let mut seen = HashSet::with_capacity(records.len());
    let mut wc = BTreeSet::new();
    let mut cn = BTreeSet::new();
    let mut flagged = Vec::new();
    for r in records {
        if !seen.insert(r.id) {
            return Err(PruningError::DuplicateId(r.id));
        }
        if !r.is_correct() {
            wc.insert(r.id);
        } else if r.confidence <= threshold {
            cn.insert(r.id);
        } else {
            continue;
        }
        flagged.push(*r);
    }
    flagged.sort_by_key(|r| r.id);
    Ok(FlagSet {
        fold_index,
        threshold,
        wc,
        cn,
        records: flagged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AutoIntersection,
    HumanReviewed,
}

/// What one fold model said about a candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEvidence {
    pub fold: usize,
    pub predicted: u8,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ImageId,
    pub actual: u8,
    pub evidence: Vec<FoldEvidence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalSet {
    pub ids: BTreeSet<ImageId>,
    pub per_class: ClassHistogram,
    pub provenance: Provenance,
    pub candidates: Vec<Candidate>,
}

impl RemovalSet {
    pub fn candidate(&self, id: ImageId) -> Option<&Candidate> {
        self.candidates
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.candidates[i])
    }
}

/// Ids flagged by every fold, with each fold's evidence.
pub fn intersect_flags(flagsets: &[FlagSet]) -> Result<RemovalSet> {
    let (first, rest) = flagsets.split_first().ok_or(PruningError::EmptyInput)?;
    let mut ids = first.flagged();
    for fs in rest {
        let other = fs.flagged();
        ids.retain(|id| other.contains(id));
    }
    let candidates: Vec<Candidate> = ids
        .iter()
        .map(|&id| {
            let records: Vec<&PredictionRecord> = flagsets
                .iter()
                .map(|fs| fs.record(id).expect("flagged ids carry records"))
                .collect();
            Candidate {
                id,
                actual: records[0].actual,
                evidence: flagsets
                    .iter()
                    .zip(&records)
                    .map(|(fs, r)| FoldEvidence {
                        fold: fs.fold_index,
                        predicted: r.predicted,
                        confidence: r.confidence,
                    })
                    .collect(),
            }
        })
        .collect();
    let labels: Vec<u8> = candidates.iter().map(|c| c.actual).collect();
    Ok(RemovalSet {
        ids,
        per_class: class_histogram(&labels),
        provenance: Provenance::AutoIntersection,
        candidates,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub wc: usize,
    pub cn: usize,
    pub tc: usize,
}

impl std::ops::AddAssign for FlagCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.wc += rhs.wc;
        self.cn += rhs.cn;
        self.tc += rhs.tc;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFlagSummary {
    pub fold_index: usize,
    pub per_class: [FlagCounts; NUM_CLASSES],
    pub total: FlagCounts,
}

/// Per-fold, per-class WC/CN/TC counts.
pub fn summarize_flags(flagsets: &[FlagSet], pool: &ImageSet) -> Result<Vec<FoldFlagSummary>> {
    let index = pool.id_index();
    let label = |id: ImageId| {
        index
            .get(&id)
            .map(|&pos| pool.label(pos) as usize)
            .ok_or(PruningError::UnknownId(id))
    };
    flagsets
        .iter()
        .map(|fs| {
            let mut per_class = [FlagCounts::default(); NUM_CLASSES];
            for &id in &fs.wc {
                let c = &mut per_class[label(id)?];
                c.wc += 1;
                c.tc += 1;
            }
            for &id in &fs.cn {
                let c = &mut per_class[label(id)?];
                c.cn += 1;
                c.tc += 1;
            }
            let mut total = FlagCounts::default();
            for c in per_class {
                total += c;
            }
            Ok(FoldFlagSummary {
                fold_index: fs.fold_index,
                per_class,
                total,
            })
        })
        .collect()
}

/// `fold,class,wc,cn,tc` rows; `class` is `total` on each fold's sum row.
pub fn flag_summary_csv(summary: &[FoldFlagSummary]) -> String {
    let mut out = String::from("fold,class,wc,cn,tc\n");
    for fold in summary {
        for (class, c) in fold.per_class.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", fold.fold_index + 1, class, c.wc, c.cn, c.tc);
        }
        let t = fold.total;
        let _ = writeln!(out, "{},total,{},{},{}", fold.fold_index + 1, t.wc, t.cn, t.tc);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Remove,
}

/// One reviewer judgement. `decided_at` is an RFC 3339 timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub id: ImageId,
    pub verdict: Verdict,
    pub decided_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
}

/// Review outcome over a removal candidate set. Later decisions for the same
/// id replace earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub decisions: Vec<Decision>,
    pub candidate_count: usize,
    pub finalized: bool,
}

impl DecisionLog {
    pub fn live(&self) -> BTreeMap<ImageId, Verdict> {
        self.decisions.iter().map(|d| (d.id, d.verdict)).collect()
    }

    pub fn removal_ids(&self) -> BTreeSet<ImageId> {
        self.live()
            .into_iter()
            .filter(|&(_, v)| v == Verdict::Remove)
            .map(|(id, _)| id)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    pub pool: ImageSet,
    pub removed: BTreeSet<ImageId>,
    pub histogram: ClassHistogram,
    pub provenance: Provenance,
}

/// Drops the removal ids from `pool`, or with `decisions` only those judged
/// `remove`.
pub fn apply_removal(
    pool: &ImageSet,
    removal: &RemovalSet,
    decisions: Option<&DecisionLog>,
) -> Result<Pruned> {
    let present: HashMap<ImageId, usize> = pool.id_index();
    if let Some(&id) = removal.ids.iter().find(|id| !present.contains_key(id)) {
        return Err(PruningError::UnknownId(id));
    }
    let (removed, provenance) = match decisions {
        None => (removal.ids.clone(), removal.provenance),
        Some(log) => {
            let live = log.live();
            if let Some(&id) = live.keys().find(|id| !removal.ids.contains(id)) {
                return Err(PruningError::UnexpectedDecision(id));
            }
            let missing: Vec<ImageId> = removal
                .ids
                .iter()
                .filter(|id| !live.contains_key(id))
                .copied()
                .collect();
            if !missing.is_empty() {
                return Err(PruningError::IncompleteDecisions(missing));
            }
            (log.removal_ids(), Provenance::HumanReviewed)
        }
    };
    let pool = remove_indices(pool, &removed).map_err(|_| {
        PruningError::UnknownId(*removed.iter().next().unwrap_or(&0))
    })?;
    Ok(Pruned {
        histogram: pool.histogram(),
        pool,
        removed,
        provenance,
    })
}
