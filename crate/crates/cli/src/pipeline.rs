//! Stage commands. Each writes under its own directory in the output root
//! and finishes by writing a `COMPLETE` marker holding the settings it ran
//! with; a stage whose marker matches the current settings is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use prunenet::dataset::{
    load_idx_images, load_idx_labels, stratified_subset, ImageId, ImageSet, SetRole,
};
use prunenet::nn::canonical_spec;
use prunenet::pruning::{
    apply_removal, flag_noisy, flag_summary_csv, intersect_flags, summarize_flags, DecisionLog,
    FlagSet, PredictionRecord, RemovalSet,
};
use prunenet::report::{
    cv_summary_csv, emit_distribution_report, emit_gallery, fold_metrics_csv, round4,
    summarize_folds, CvSummary,
};
use prunenet::training::{
    derive_seed, fold_dir, read_predictions, run_cv, CvOptions, FoldResult, Hyperparams,
    PREDICTIONS_FILE,
};
use prunenet_review::{serve, DecisionStore, Finalized, ReviewService, StorePaths};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::PipelineError;

pub const MARKER: &str = "COMPLETE";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const RESULTS_FILE: &str = "results.json";
pub const REMOVAL_FILE: &str = "removal.json";
pub const PRUNED_SUMMARY: &str = "summary.json";
pub const PRUNED_IMAGES: &str = "train-images-idx3-ubyte";
pub const PRUNED_LABELS: &str = "train-labels-idx1-ubyte";
pub const PRUNED_IDS: &str = "ids.json";
pub const SKIPPED_FILE: &str = "skipped.json";

const STAGE2_STREAM: u64 = 0x5354_4147_4532;
const SMOKE_POOL_STREAM: u64 = 0x534D_4F4B_4550;
const SMOKE_TEST_STREAM: u64 = 0x534D_4F4B_4554;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Flag,
    Review,
    Prune,
    Stage2,
    Report,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Flag => "flags",
            Stage::Review => "review",
            Stage::Prune => "pruned",
            Stage::Stage2 => "stage2",
            Stage::Report => "report",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Flag => "flag",
            Stage::Review => "review",
            Stage::Prune => "prune",
            Stage::Stage2 => "stage2",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub smoke: bool,
    /// Fold-level worker cap.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            smoke: false,
            threads: 1,
        }
    }
}

/// `PRUNENET_THREADS` if set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("PRUNENET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub options: RunOptions,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write(path, &serde_json::to_vec_pretty(value).expect("serializable"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
pub struct PrunedSummary {
    pub before: prunenet::dataset::ClassHistogram,
    pub after: prunenet::dataset::ClassHistogram,
    pub removed: Vec<ImageId>,
    pub provenance: prunenet::pruning::Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, options: RunOptions) -> Self {
        Self { config, options }
    }

    pub fn root(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root().join(stage.dir_name())
    }

    fn fingerprint(&self) -> Value {
        self.config.fingerprint(self.options.smoke)
    }

    fn marker_value(&self, upstream: Value) -> Value {
        json!({"config": self.fingerprint(), "upstream": upstream})
    }

    fn is_complete(&self, stage: Stage, upstream: &Value) -> bool {
        let path = self.dir(stage).join(MARKER);
        match read_json::<Value>(&path) {
            Ok(v) => v == self.marker_value(upstream.clone()),
            Err(_) => false,
        }
    }

    /// Clears the stage directory unless it was started with the same
    /// settings, in which case partial work inside it is kept.
    fn begin(&self, stage: Stage, upstream: &Value) -> Result<PathBuf, PipelineError> {
        let dir = self.dir(stage);
        let started = dir.join("started.json");
        let expected = self.marker_value(upstream.clone());
        let same = read_json::<Value>(&started).map(|v| v == expected).unwrap_or(false);
        if !same && dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        create_dir(&dir)?;
        let _ = fs::remove_file(dir.join(MARKER));
        write_json(&started, &expected)?;
        Ok(dir)
    }

    fn finish(&self, stage: Stage, upstream: &Value) -> Result<(), PipelineError> {
        write_json(&self.dir(stage).join(MARKER), &self.marker_value(upstream.clone()))
    }

    fn require(&self, stage: Stage, needed_by: Stage) -> Result<(), PipelineError> {
        let marker = self.dir(stage).join(MARKER);
        if marker.is_file() {
            Ok(())
        } else {
            Err(PipelineError::MissingArtifact {
                artifact: marker,
                command: stage.command(),
                needed_by: needed_by.command(),
            })
        }
    }

    fn write_effective_config(&self) -> Result<(), PipelineError> {
        create_dir(self.root())?;
        write(&self.root().join(EFFECTIVE_CONFIG), self.config.to_json().as_bytes())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let mut hp = self.config.hyperparams.clone();
        if self.options.smoke {
            hp.max_epochs = hp.max_epochs.min(self.config.smoke.max_epochs);
        }
        hp
    }

    pub fn k(&self) -> usize {
        if self.options.smoke {
            self.config.smoke.k
        } else {
            self.config.k
        }
    }

    /// Training pool and test set, capped under `--smoke`.
    pub fn load_inputs(&self) -> Result<(ImageSet, ImageSet), PipelineError> {
        self.config.check_data()?;
        let d = &self.config.data;
        let pool = ImageSet::load(&d.train_images, &d.train_labels, SetRole::TrainPool)?;
        let test = ImageSet::load(&d.test_images, &d.test_labels, SetRole::Test)?;
        if !self.options.smoke {
            return Ok((pool, test));
        }
        let seed = self.config.hyperparams.seed;
        let s = &self.config.smoke;
        Ok((
            stratified_subset(&pool, s.pool_size, derive_seed(seed, SMOKE_POOL_STREAM)),
            stratified_subset(&test, s.test_size, derive_seed(seed, SMOKE_TEST_STREAM)),
        ))
    }

    fn cross_validate(
        &self,
        stage: Stage,
        pool: &ImageSet,
        test: &ImageSet,
        hp: &Hyperparams,
        upstream: &Value,
    ) -> Result<StageReport, PipelineError> {
        let dir = self.begin(stage, upstream)?;
        let options = CvOptions {
            artifact_dir: Some(dir.clone()),
            threads: self.options.threads,
            resume: true,
        };
        let outcomes = run_cv(pool, test, hp, &canonical_spec(), self.k(), &options)?;
        let folds: Vec<FoldResult> = outcomes.into_iter().map(|o| o.result).collect();
        let metrics: Vec<_> = folds.iter().map(|f| f.metrics).collect();
        let summary = summarize_folds(&metrics)?;
        write(&dir.join("cv_summary.csv"), cv_summary_csv(&summary).as_bytes())?;
        write(&dir.join("fold_metrics.csv"), fold_metrics_csv(&metrics).as_bytes())?;
        let report = StageReport { folds, summary };
        write_json(&dir.join(RESULTS_FILE), &report)?;
        self.finish(stage, upstream)?;
        Ok(report)
    }

    pub fn stage1(&self) -> Result<StageReport, PipelineError> {
        self.write_effective_config()?;
        let upstream = Value::Null;
        if self.is_complete(Stage::Stage1, &upstream) {
            tracing::info!("stage 1 already complete");
            return read_json(&self.dir(Stage::Stage1).join(RESULTS_FILE));
        }
        let (pool, test) = self.load_inputs()?;
        tracing::info!(pool = pool.len(), test = test.len(), k = self.k(), "stage 1");
        self.cross_validate(Stage::Stage1, &pool, &test, &self.hyperparams(), &upstream)
    }

    fn fold_predictions(&self, stage: Stage) -> Result<Vec<Vec<PredictionRecord>>, PipelineError> {
        (0..self.k())
            .map(|fold| {
                let path = fold_dir(&self.dir(stage), fold).join(PREDICTIONS_FILE);
                if !path.is_file() {
                    return Err(PipelineError::MissingArtifact {
                        artifact: path,
                        command: stage.command(),
                        needed_by: Stage::Flag.command(),
                    });
                }
                Ok(read_predictions(&path)?.into_iter().map(|p| p.record).collect())
            })
            .collect()
    }

    pub fn flag(&self) -> Result<RemovalSet, PipelineError> {
        self.write_effective_config()?;
        self.require(Stage::Stage1, Stage::Flag)?;
        let upstream = Value::Null;
        let removal_path = self.dir(Stage::Flag).join(REMOVAL_FILE);
        if self.is_complete(Stage::Flag, &upstream) {
            tracing::info!("flagging already complete");
            return read_json(&removal_path);
        }
        let dir = self.begin(Stage::Flag, &upstream)?;
        let threshold = self.config.confidence_threshold;
        let flagsets = self
            .fold_predictions(Stage::Stage1)?
            .iter()
            .enumerate()
            .map(|(fold, records)| flag_noisy(fold, records, threshold))
            .collect::<Result<Vec<FlagSet>, _>>()?;
        for fs in &flagsets {
            write_json(&dir.join(format!("flags_fold{}.json", fs.fold_index + 1)), fs)?;
        }
        let removal = intersect_flags(&flagsets)?;
        let (pool, _) = self.load_inputs()?;
        let summary = summarize_flags(&flagsets, &pool)?;
        write(&dir.join("flag_summary.csv"), flag_summary_csv(&summary).as_bytes())?;
        write_json(&removal_path, &removal)?;
        tracing::info!(candidates = removal.ids.len(), "removal candidates");
        self.finish(Stage::Flag, &upstream)?;
        Ok(removal)
    }

    pub fn review_paths(&self) -> StorePaths {
        StorePaths::in_dir(&self.dir(Stage::Review))
    }

    /// Serves the review until it is finalized. Returns at once if it
    /// already was.
    pub fn review(&self) -> Result<Finalized, PipelineError> {
        self.write_effective_config()?;
        self.require(Stage::Flag, Stage::Review)?;
        let removal: RemovalSet = read_json(&self.dir(Stage::Flag).join(REMOVAL_FILE))?;
        let (pool, _) = self.load_inputs()?;
        let store = DecisionStore::open(&removal, self.review_paths())?;
        if let Some(done) = store.finalized() {
            tracing::info!("review already finalized");
            return Ok(done.clone());
        }
        let settings = &self.config.review;
        let svc = ReviewService::new(store, pool, settings.force_remove_undecided);
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(io_err(Path::new("tokio runtime")))?;
        let ui = settings.ui_dir.clone();
        let listen = settings.listen.clone();
        let done = runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind(&listen)
                .await
                .map_err(|source| PipelineError::Io {
                    path: PathBuf::from(&listen),
                    source,
                })?;
            let addr = listener.local_addr().map_err(io_err(Path::new(&listen)))?;
            tracing::info!(url = %format!("http://{addr}/"), candidates = removal.ids.len(), "review service listening");
            eprintln!("review service listening on http://{addr}/");
            serve(listener, svc, ui)
                .await
                .map_err(io_err(Path::new(&listen)))
        })?;
        Ok(done)
    }

    fn decision_log(&self) -> Result<Option<DecisionLog>, PipelineError> {
        let path = self.review_paths().final_log;
        if path.is_file() {
            Ok(Some(read_json(&path)?))
        } else {
            Ok(None)
        }
    }

    pub fn prune(&self) -> Result<PrunedSummary, PipelineError> {
        self.write_effective_config()?;
        self.require(Stage::Flag, Stage::Prune)?;
        let decisions = self.decision_log()?;
        let upstream = json!({"reviewed": decisions.as_ref().map(|d| d.removal_ids())});
        let summary_path = self.dir(Stage::Prune).join(PRUNED_SUMMARY);
        if self.is_complete(Stage::Prune, &upstream) {
            tracing::info!("pruning already complete");
            return read_json(&summary_path);
        }
        let removal: RemovalSet = read_json(&self.dir(Stage::Flag).join(REMOVAL_FILE))?;
        let (pool, _) = self.load_inputs()?;
        let dir = self.begin(Stage::Prune, &upstream)?;
        let pruned = apply_removal(&pool, &removal, decisions.as_ref())?;
        pruned
            .pool
            .write_idx(&dir.join(PRUNED_IMAGES), &dir.join(PRUNED_LABELS))?;
        write_json(&dir.join(PRUNED_IDS), &pruned.pool.ids())?;
        let summary = PrunedSummary {
            before: pool.histogram(),
            after: pruned.histogram,
            removed: pruned.removed.into_iter().collect(),
            provenance: pruned.provenance,
        };
        write_json(&summary_path, &summary)?;
        tracing::info!(before = pool.len(), after = pruned.pool.len(), "pruned pool");
        self.finish(Stage::Prune, &upstream)?;
        Ok(summary)
    }

    pub fn load_pruned(&self) -> Result<ImageSet, PipelineError> {
        let dir = self.dir(Stage::Prune);
        let images = load_idx_images(dir.join(PRUNED_IMAGES))?;
        let labels = load_idx_labels(dir.join(PRUNED_LABELS))?;
        let ids: Vec<ImageId> = read_json(&dir.join(PRUNED_IDS))?;
        Ok(ImageSet::new(images, labels, ids, SetRole::TrainPool)?)
    }

    fn pruned_upstream(&self) -> Result<Value, PipelineError> {
        let summary: PrunedSummary = read_json(&self.dir(Stage::Prune).join(PRUNED_SUMMARY))?;
        Ok(json!({"removed": summary.removed}))
    }

    pub fn stage2_hyperparams(&self) -> Hyperparams {
        let mut hp = self.hyperparams();
        hp.seed = derive_seed(hp.seed, STAGE2_STREAM);
        hp
    }

    /// `None` when the cleaned pool is too small to split into `k` folds;
    /// the stage is then recorded as skipped.
    pub fn stage2(&self) -> Result<Option<StageReport>, PipelineError> {
        self.write_effective_config()?;
        self.require(Stage::Prune, Stage::Stage2)?;
        let upstream = self.pruned_upstream()?;
        if self.is_complete(Stage::Stage2, &upstream) {
            tracing::info!("stage 2 already complete");
            return self.completed_report(Stage::Stage2);
        }
        let pool = self.load_pruned()?;
        if pool.len() < self.k() {
            let reason = format!(
                "cleaned pool has {} images, fewer than k={}",
                pool.len(),
                self.k()
            );
            tracing::warn!("stage 2 skipped: {reason}");
            let dir = self.begin(Stage::Stage2, &upstream)?;
            write_json(&dir.join(SKIPPED_FILE), &json!({"reason": reason}))?;
            self.finish(Stage::Stage2, &upstream)?;
            return Ok(None);
        }
        let (_, test) = self.load_inputs()?;
        tracing::info!(pool = pool.len(), k = self.k(), "stage 2");
        self.cross_validate(Stage::Stage2, &pool, &test, &self.stage2_hyperparams(), &upstream)
            .map(Some)
    }

    fn completed_report(&self, stage: Stage) -> Result<Option<StageReport>, PipelineError> {
        let dir = self.dir(stage);
        if dir.join(MARKER).is_file() && !dir.join(SKIPPED_FILE).is_file() {
            Ok(Some(read_json(&dir.join(RESULTS_FILE))?))
        } else {
            Ok(None)
        }
    }

    fn skip_reason(&self, stage: Stage) -> Result<Option<String>, PipelineError> {
        let path = self.dir(stage).join(SKIPPED_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let v: Value = read_json(&path)?;
        Ok(v["reason"].as_str().map(str::to_string))
    }

    /// Writes every report output that the completed stages allow.
    pub fn report(&self) -> Result<Value, PipelineError> {
        self.write_effective_config()?;
        self.require(Stage::Stage1, Stage::Report)?;
        let dir = self.root().join(Stage::Report.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        create_dir(&dir)?;
        let stage1 = self.completed_report(Stage::Stage1)?.expect("required above");
        let stage2 = self.completed_report(Stage::Stage2)?;
        let (pool, _) = self.load_inputs()?;

        for (name, report) in [("stage1", Some(&stage1)), ("stage2", stage2.as_ref())] {
            let Some(report) = report else { continue };
            let sub = dir.join(name);
            create_dir(&sub)?;
            write(&sub.join("cv_summary.csv"), cv_summary_csv(&report.summary).as_bytes())?;
            let metrics: Vec<_> = report.folds.iter().map(|f| f.metrics).collect();
            write(&sub.join("fold_metrics.csv"), fold_metrics_csv(&metrics).as_bytes())?;
            for f in &report.folds {
                for (split, c) in [
                    ("train", &f.confusion.train),
                    ("val", &f.confusion.val),
                    ("test", &f.confusion.test),
                ] {
                    let name = format!("confusion_{split}_fold{}.csv", f.fold_index + 1);
                    write(&sub.join(name), c.to_csv().as_bytes())?;
                }
            }
        }

        let first_fold = fold_dir(&self.dir(Stage::Stage1), 0).join(PREDICTIONS_FILE);
        let misclassified: Vec<PredictionRecord> = read_predictions(&first_fold)?
            .into_iter()
            .map(|p| p.record)
            .filter(|r| !r.is_correct())
            .collect();
        let gallery = emit_gallery(&misclassified, &pool, &dir.join("gallery"))?;

        let mut candidates = None;
        let flags = self.dir(Stage::Flag);
        if flags.join(MARKER).is_file() {
            let removal: RemovalSet = read_json(&flags.join(REMOVAL_FILE))?;
            let records: Vec<PredictionRecord> = removal
                .candidates
                .iter()
                .map(|c| PredictionRecord {
                    id: c.id,
                    actual: c.actual,
                    predicted: c.evidence[0].predicted,
                    confidence: c.evidence[0].confidence,
                })
                .collect();
            let m = emit_gallery(&records, &pool, &dir.join("candidates"))?;
            candidates = Some(m.count);
        }

        let mut distribution = None;
        if self.dir(Stage::Prune).join(MARKER).is_file() {
            let summary: PrunedSummary = read_json(&self.dir(Stage::Prune).join(PRUNED_SUMMARY))?;
            distribution = Some(emit_distribution_report(&summary.before, &summary.after, &dir)?);
        }

        let skipped = self.skip_reason(Stage::Stage2)?;
        let mut text = side_by_side(&stage1.summary, stage2.as_ref().map(|r| &r.summary));
        if let Some(reason) = &skipped {
            text.push_str(&format!("\nstage 2 skipped: {reason}\n"));
        }
        write(&dir.join("summary.txt"), text.as_bytes())?;
        let report = json!({
            "stage1": stage1.summary,
            "stage2": stage2.as_ref().map(|r| r.summary),
            "stage2_present": stage2.is_some(),
            "stage2_skipped": skipped,
            "misclassified_fold1": gallery.count,
            "removal_candidates": candidates,
            "distribution": distribution,
        });
        write_json(&dir.join("report.json"), &report)?;
        Ok(report)
    }

    /// stage1, flag, optional review, prune, stage2, report.
    pub fn run_all(&self) -> Result<Value, PipelineError> {
        self.stage1()?;
        self.flag()?;
        if self.config.review.mode == crate::config::ReviewMode::Serve {
            self.review()?;
        }
        self.prune()?;
        self.stage2()?;
        self.report()
    }
}

fn side_by_side(stage1: &CvSummary, stage2: Option<&CvSummary>) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("dataset   quantity  statistic  stage1   stage2\n");
    let rows = |s: &CvSummary| {
        let mut v = Vec::new();
        for (d, q) in [("train", s.train), ("val", s.val), ("test", s.test)] {
            for (name, st) in [("accuracy", q.accuracy), ("loss", q.loss)] {
                for (stat, x) in [("average", st.average), ("min", st.min), ("max", st.max)] {
                    v.push((d, name, stat, x));
                }
            }
        }
        v
    };
    let second = stage2.map(rows);
    for (i, (d, q, s, x)) in rows(stage1).into_iter().enumerate() {
        let other = match &second {
            Some(r) => format!("{:.4}", round4(r[i].3)),
            None => "absent".to_string(),
        };
        let _ = writeln!(out, "{d:<9} {q:<9} {s:<10} {:.4}   {other}", round4(x));
    }
    out
}
