//! Adam, early stopping, evaluation, and k-fold orchestration.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{kfold_split, normalize_into, DatasetError, ImageSet, IMAGE_PIXELS, NUM_CLASSES};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{softmax_xent, Mode, Model, ModelSpec, NnError, Real, Tensor};
use crate::pruning::PredictionRecord;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("cannot evaluate an empty set")]
    EmptySet,
    #[error("optimizer state holds {expected} arrays, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainingError + '_ {
    move |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 200,
            patience: 7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-7,
            seed: 0,
            deterministic: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainingError::InvalidHyperparams(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// SplitMix64 mix of `seed` and `stream`; distinct streams give unrelated seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            m: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &mut Model<T>) -> Self {
        let lengths: Vec<usize> = model.trainable_mut().iter().map(|a| a.len()).collect();
        Self::new(&lengths)
    }
}

pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    hp: &Hyperparams,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(TrainingError::ShapeMismatch {
            expected: state.m.len(),
            got: params.len().min(grads.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(TrainingError::ShapeMismatch {
                expected: m.len(),
                got: p.len().min(g.len()),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (hp.adam_beta1, hp.adam_beta2);
    let c1 = 1.0 / (1.0 - b1.powi(state.t as i32));
    let c2 = 1.0 / (1.0 - b2.powi(state.t as i32));
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    let (lr, eps) = (T::lit(hp.learning_rate), T::lit(hp.adam_eps));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1t * m[i] + ob1 * gi;
            v[i] = b2t * v[i] + ob2 * gi * gi;
            let m_hat = m[i] * c1;
            let v_hat = v[i] * c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Validation-loss monitor: stops after `patience` epochs without a strict
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopSignal {
        match self.best {
            Some((_, best)) if !(val_loss < best) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopSignal::Stop
                } else {
                    StopSignal::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.stale = 0;
                StopSignal::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Images at `positions` as a normalized `[n, 28, 28, 1]` tensor.
pub fn batch_tensor<T: Real>(set: &ImageSet, positions: &[usize]) -> Tensor<T> {
    let mut data = vec![T::zero(); positions.len() * IMAGE_PIXELS];
    for (chunk, &pos) in data.chunks_exact_mut(IMAGE_PIXELS).zip(positions) {
        normalize_into(set.image(pos), chunk);
    }
    Tensor::new(vec![positions.len(), 28, 28, 1], data).expect("length matches shape")
}

/// `counts[actual][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn add(&mut self, actual: u8, predicted: u8) {
        self.counts[actual as usize][predicted as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for c in 0..NUM_CLASSES {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (actual, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{actual}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: Confusion,
    /// One record per image, in set order.
    pub predictions: Vec<PredictionRecord>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predictions from raw logits against known labels.
pub fn score_logits<T: Real>(logits: &[T], labels: &[u8], ids: &[u32]) -> Evaluation {
    let classes = logits.len() / labels.len().max(1);
    let mut confusion = Confusion::default();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(labels.len());
    for ((row, &actual), &id) in logits.chunks_exact(classes).zip(labels).zip(ids) {
        let r = softmax_xent(row, actual as usize);
        let predicted = argmax(&r.probs) as u8;
        confusion.add(actual, predicted);
        loss += r.loss;
        predictions.push(PredictionRecord {
            id,
            actual,
            predicted,
            confidence: r.confidence,
        });
    }
    let n = labels.len() as f64;
    Evaluation {
        accuracy: confusion.trace() as f64 / n,
        loss: loss / n,
        confusion,
        predictions,
    }
}

/// Inference-mode metrics over the whole set.
pub fn evaluate<T: Real>(model: &Model<T>, set: &ImageSet, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(TrainingError::EmptySet);
    }
    let positions: Vec<usize> = (0..set.len()).collect();
    let mut logits = Vec::with_capacity(set.len() * NUM_CLASSES);
    for chunk in positions.chunks(batch_size.max(1)) {
        logits.extend_from_slice(model.logits(&batch_tensor(set, chunk))?.data());
    }
    Ok(score_logits(&logits, set.labels(), set.ids()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainedFold {
    /// Weights from the best validation-loss epoch.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Minibatch Adam with per-epoch reshuffling and early stopping on
/// validation loss. Epochs are numbered from 1.
pub fn train_fold(
    train: &ImageSet,
    val: &ImageSet,
    hp: &Hyperparams,
    spec: &ModelSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedFold> {
    hp.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainingError::EmptySet);
    }
    let mut model = Model::<f32>::from_spec(spec.clone(), derive_seed(hp.seed, INIT_STREAM))?;
    let mut adam = AdamState::for_model(&mut model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, SHUFFLE_STREAM));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, DROPOUT_STREAM));
    let mut stopper = EarlyStopping::new(hp.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = model.clone();

    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hp.batch_size) {
            let x = batch_tensor::<f32>(train, chunk);
            let labels: Vec<u8> = chunk.iter().map(|&p| train.label(p)).collect();
            let pass = model.forward(&x, Some(&labels), Mode::Training, &mut dropout_rng)?;
            let grads = model.backward(&pass)?;
            let grads = grads.slices();
            adam_step(&mut model.trainable_mut(), &grads, &mut adam, hp)?;
        }
        let t = evaluate(&model, train, hp.batch_size)?;
        let v = evaluate(&model, val, hp.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: t.loss,
            train_acc: t.accuracy,
            val_loss: v.loss,
            val_acc: v.accuracy,
        };
        history.push(record);
        on_epoch(&record);
        match stopper.observe(epoch, v.loss) {
            StopSignal::Improved => best = model.clone(),
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    Ok(TrainedFold {
        model: best,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub metrics: SplitMetrics<Metrics>,
    pub confusion: SplitMetrics<Confusion>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A pool prediction tagged with the split it belonged to for that fold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolPrediction {
    #[serde(flatten)]
    pub record: PredictionRecord,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub result: FoldResult,
    /// Every pool image, in pool order.
    pub predictions: Vec<PoolPrediction>,
    pub model: Model<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct CvOptions {
    /// Per-fold artifacts go to `<dir>/fold{i}/`.
    pub artifact_dir: Option<PathBuf>,
    /// Worker cap for fold-level parallelism; 0 or 1 runs folds in sequence.
    pub threads: usize,
    /// Reuse folds whose `result.json` already exists.
    pub resume: bool,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESULT_FILE: &str = "result.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn fold_dir(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{}", fold + 1))
}

/// Per-fold seed for run seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, 0x464F_4C44_0000_0000 | fold as u64)
}

/// k-fold cross-validation over `pool`: a fresh model per fold, trained on
/// the complement of its contiguous validation block, then scored on train,
/// validation, and `test`.
pub fn run_cv(
    pool: &ImageSet,
    test: &ImageSet,
    hp: &Hyperparams,
    spec: &ModelSpec,
    k: usize,
    options: &CvOptions,
) -> Result<Vec<FoldOutcome>> {
    hp.validate()?;
    let plan = kfold_split(pool.len(), k)?;
    let run = |fold: usize| run_fold(pool, test, hp, spec, &plan, fold, options);
    if options.threads > 1 {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads.min(k))
            .build()
            .expect("thread pool builds");
        workers.install(|| (0..k).into_par_iter().map(run).collect())
    } else {
        (0..k).map(run).collect()
    }
}

fn run_fold(
    pool: &ImageSet,
    test: &ImageSet,
    hp: &Hyperparams,
    spec: &ModelSpec,
    plan: &crate::dataset::FoldPlan,
    fold: usize,
    options: &CvOptions,
) -> Result<FoldOutcome> {
    let dir = options.artifact_dir.as_ref().map(|d| fold_dir(d, fold));
    if let (Some(dir), true) = (&dir, options.resume) {
        if dir.join(RESULT_FILE).exists() {
            tracing::info!(fold = fold + 1, "reusing completed fold");
            return load_fold(dir);
        }
    }
    let train_pos = plan.training_positions(fold);
    let val_pos = plan.validation_positions(fold);
    let train = pool.select(&train_pos);
    let val = pool.select(&val_pos);
    let fold_hp = Hyperparams {
        seed: fold_seed(hp.seed, fold),
        ..hp.clone()
    };
    tracing::info!(fold = fold + 1, train = train.len(), val = val.len(), "training fold");
    let trained = train_fold(&train, &val, &fold_hp, spec, |r| {
        tracing::info!(
            fold = fold + 1,
            epoch = r.epoch,
            train_loss = r.train_loss,
            train_acc = r.train_acc,
            val_loss = r.val_loss,
            val_acc = r.val_acc,
            "epoch"
        );
    })?;
    let model = trained.model;
    let on_train = evaluate(&model, &train, hp.batch_size)?;
    let on_val = evaluate(&model, &val, hp.batch_size)?;
    let on_test = evaluate(&model, test, hp.batch_size)?;

    let mut predictions = Vec::with_capacity(pool.len());
    let val_range = plan.validation_range(fold);
    let mut train_iter = on_train.predictions.iter();
    let mut val_iter = on_val.predictions.iter();
    for pos in 0..pool.len() {
        let (record, split) = if val_range.contains(&pos) {
            (val_iter.next(), Split::Val)
        } else {
            (train_iter.next(), Split::Train)
        };
        predictions.push(PoolPrediction {
            record: *record.expect("one prediction per pool image"),
            split,
        });
    }

    let metric = |e: &Evaluation| Metrics {
        accuracy: e.accuracy,
        loss: e.loss,
    };
    let mut result = FoldResult {
        fold_index: fold,
        train_size: train.len(),
        val_size: val.len(),
        history: trained.history,
        best_epoch: trained.best_epoch,
        metrics: SplitMetrics {
            train: metric(&on_train),
            val: metric(&on_val),
            test: metric(&on_test),
        },
        confusion: SplitMetrics {
            train: on_train.confusion,
            val: on_val.confusion,
            test: on_test.confusion,
        },
        checkpoint: None,
    };
    if let Some(dir) = &dir {
        write_fold(dir, &mut result, &predictions, &model, hp)?;
    }
    Ok(FoldOutcome {
        result,
        predictions,
        model,
    })
}

fn write_fold(
    dir: &Path,
    result: &mut FoldResult,
    predictions: &[PoolPrediction],
    model: &Model<f32>,
    hp: &Hyperparams,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let _ = fs::remove_file(dir.join(RESULT_FILE));
    let ckpt = dir.join(CHECKPOINT_FILE);
    let meta = serde_json::json!({
        "fold": result.fold_index + 1,
        "best_epoch": result.best_epoch,
        "hyperparams": hp,
    });
    checkpoint::save(model, &meta, &ckpt)?;
    result.checkpoint = Some(PathBuf::from(CHECKPOINT_FILE));

    write_file(&dir.join("history.csv"), history_csv(&result.history).as_bytes())?;
    for (name, c) in [
        ("train", &result.confusion.train),
        ("val", &result.confusion.val),
        ("test", &result.confusion.test),
    ] {
        write_file(&dir.join(format!("confusion_{name}.csv")), c.to_csv().as_bytes())?;
    }
    let path = dir.join(PREDICTIONS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p).map_err(|source| TrainingError::Json {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .map_err(io_err(&path))?;

    let json = serde_json::to_vec_pretty(result).expect("fold result serializes");
    write_file(&dir.join(RESULT_FILE), &json)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PoolPrediction>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TrainingError::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}

/// Reads back a fold written by [`run_cv`].
pub fn load_fold(dir: &Path) -> Result<FoldOutcome> {
    let path = dir.join(RESULT_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let result: FoldResult =
        serde_json::from_slice(&bytes).map_err(|source| TrainingError::Json { path, source })?;
    let predictions = read_predictions(&dir.join(PREDICTIONS_FILE))?;
    let (model, _) = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    Ok(FoldOutcome {
        result,
        predictions,
        model,
    })
}
