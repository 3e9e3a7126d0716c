//! Epoch-level training loop shared by every strategy.
//!
//! Each epoch runs four stages: read the sample store, build the epoch plan,
//! train over the plan's training list, then refresh hidden samples with a
//! forward-only pass. Comparator strategies replace the plan and training
//! stages with their own sampling.

pub mod compare;
pub mod lemma;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparators::{sb_select, ComparatorError, ForgetState, IswrState, SbState, SB_WINDOW};
use crate::data::{self, DataError, Dataset, SampleStore, SyntheticKind};
use crate::hiding::{self, EpochPlan, HidingConfig, HidingError};
use crate::model::{Arch, Model, ModelError, Scratch};
use crate::optim::{base_lr_at, OptimConfig, OptimError, Sgd};
use crate::rng::{run_rng, RunRng};

pub use metrics::{MetricsLog, MetricsRecord, Phase, RunSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Hiding(#[from] HidingError),
    #[error(transparent)]
    Comparator(#[from] ComparatorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated at epoch {epoch}: {message}")]
    Invariant { epoch: usize, message: String },
}

impl HarnessError {
    /// Whether the error stems from the configuration rather than execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Optim(OptimError::InvalidConfig(_))
                | HarnessError::Hiding(HidingError::InvalidConfig(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Baseline,
    Kakurenbo,
    Iswr,
    Sb,
    Forget,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::Kakurenbo,
        Strategy::Iswr,
        Strategy::Sb,
        Strategy::Forget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Kakurenbo => "kakurenbo",
            Strategy::Iswr => "iswr",
            Strategy::Sb => "sb",
            Strategy::Forget => "forget",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected baseline, kakurenbo, iswr, sb or forget)"))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub generator: SyntheticKind,
    /// Synthetic training-set size.
    pub n: usize,
    pub test_n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Seed of the synthetic generator; independent of the run seed.
    pub seed: u64,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub csv_path: PathBuf,
    pub label_column: String,
    /// Trailing fraction of CSV rows held out for testing.
    pub test_fraction: f64,
    /// Keep only the first `train_limit` training rows (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            generator: SyntheticKind::Blobs,
            n: 2000,
            test_n: 500,
            dim: 2,
            classes: 3,
            seed: 1234,
            train_images: PathBuf::new(),
            train_labels: PathBuf::new(),
            test_images: PathBuf::new(),
            test_labels: PathBuf::new(),
            csv_path: PathBuf::new(),
            label_column: "label".into(),
            test_fraction: 0.2,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

impl DatasetSpec {
    pub fn mnist(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            source: DataSource::Idx,
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            ..Default::default()
        }
    }

    /// Loads `(train, test)` with a common class count.
    pub fn load(&self) -> Result<(Dataset, Dataset), HarnessError> {
        let (train, test) = match self.source {
            DataSource::Synthetic => {
                if self.test_n == 0 {
                    return Err(HarnessError::Config("dataset.test-n must be >= 1".into()));
                }
                let all = data::gen_synthetic(self.generator, self.n + self.test_n, self.dim, self.classes, self.seed)?;
                all.split_tail(self.test_n)?
            }
            DataSource::Idx => (
                data::load_idx(&self.train_images, &self.train_labels)?,
                data::load_idx(&self.test_images, &self.test_labels)?,
            ),
            DataSource::Csv => {
                let all = data::load_csv(&self.csv_path, &self.label_column)?;
                let tail = hiding::fraction_count(self.test_fraction, all.n).max(1);
                all.split_tail(tail)?
            }
        };
        let limit = |ds: Dataset, limit: usize| {
            if limit == 0 || limit >= ds.n {
                ds
            } else {
                ds.subset(&(0..limit).collect::<Vec<_>>())
            }
        };
        let (train, test) = (limit(train, self.train_limit), limit(test, self.test_limit));
        if train.d != test.d {
            return Err(HarnessError::Config(format!(
                "train and test feature dimensions differ ({} vs {})",
                train.d, test.d
            )));
        }
        let k = train.k.max(test.k);
        Ok((train.with_classes(k), test.with_classes(k)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp1,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SbConfig {
    pub beta: f64,
    pub window: usize,
}

impl Default for SbConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            window: SB_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ForgetConfig {
    pub count_epochs: usize,
}

impl Default for ForgetConfig {
    fn default() -> Self {
        Self { count_epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Directory for per-epoch binary plan dumps; empty disables.
    pub dump_plans: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub hiding: HidingConfig,
    pub sb: SbConfig,
    pub forget: ForgetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Kakurenbo,
            seed: 42,
            epochs: 10,
            batch_size: 128,
            dump_plans: PathBuf::new(),
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            optim: OptimConfig::default(),
            hiding: HidingConfig::default(),
            sb: SbConfig::default(),
            forget: ForgetConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch-size must be >= 1".into());
        }
        if self.model.arch == Arch::Mlp1 && self.model.hidden == 0 {
            return bad("model.hidden must be >= 1 for mlp1".into());
        }
        if !(self.sb.beta >= 0.0 && self.sb.beta.is_finite()) {
            return bad(format!("sb.beta must be >= 0 (got {})", self.sb.beta));
        }
        if self.sb.window == 0 {
            return bad("sb.window must be >= 1".into());
        }
        let ds = &self.dataset;
        if ds.source == DataSource::Csv && !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
            return bad(format!("dataset.test-fraction must be in (0, 1) (got {})", ds.test_fraction));
        }
        self.optim.validate()?;
        self.hiding.validate()?;
        Ok(())
    }

    /// Checks that depend on the loaded training set.
    pub fn validate_for(&self, train: &Dataset) -> Result<(), HarnessError> {
        if self.batch_size > train.n {
            return Err(HarnessError::Config(format!(
                "batch-size {} exceeds the {} training samples",
                self.batch_size, train.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct EpochStats {
    forward: usize,
    backward: usize,
    steps: usize,
    loss_sum: f64,
}

/// Mutable state of one run.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    pub model: Model,
    sgd: Sgd,
    pub store: SampleStore,
    rng: RunRng,
    grad: Vec<f64>,
    scratch: Scratch,
    prev_hidden: Vec<usize>,
    iswr: Option<IswrState>,
    sb: Option<SbState>,
    forget: Option<ForgetState>,
    gradient_evaluations: u64,
    last_plan: Option<EpochPlan>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self, HarnessError> {
        let mut rng = run_rng(cfg.seed);
        let model = Model::init(cfg.model.arch, train.d, cfg.model.hidden, train.k, &mut rng)?;
        let sgd = Sgd::new(&cfg.optim, model.num_params());
        Ok(Self {
            cfg,
            train,
            test,
            grad: vec![0.0; model.num_params()],
            model,
            sgd,
            store: SampleStore::new(train.n),
            rng,
            scratch: Scratch::default(),
            prev_hidden: Vec::new(),
            iswr: (cfg.strategy == Strategy::Iswr).then(|| IswrState::uniform(train.n)),
            sb: (cfg.strategy == Strategy::Sb).then(|| SbState::new(cfg.sb.beta, cfg.sb.window)),
            forget: None,
            gradient_evaluations: 0,
            last_plan: None,
        })
    }

    pub fn gradient_evaluations(&self) -> u64 {
        self.gradient_evaluations
    }

    /// Plan of the most recent KAKURENBO (or baseline) epoch.
    pub fn last_plan(&self) -> Option<&EpochPlan> {
        self.last_plan.as_ref()
    }

    fn enable_forget_counting(&mut self, epochs: usize) {
        self.forget = Some(ForgetState::new(self.train.n, epochs));
    }

    /// Forward + backward over `batch`, recording every forward in the
    /// store, then one SGD step at `lr`.
    fn train_batch(&mut self, batch: &[usize], epoch: usize, lr: f64, stats: &mut EpochStats) -> Result<(), HarnessError> {
        self.grad.fill(0.0);
        for &i in batch {
            let o = self.model.sample_pass(
                self.train.row(i),
                self.train.labels[i],
                &mut self.scratch,
                Some(&mut self.grad),
            );
            self.store.record_forward(i, o.loss, o.pa, o.pc, epoch)?;
            if let Some(f) = self.forget.as_mut() {
                f.update(i, o.pa)?;
            }
            stats.loss_sum += o.loss;
        }
        stats.forward += batch.len();
        self.apply_gradient(batch.len(), lr, stats)
    }

    fn apply_gradient(&mut self, count: usize, lr: f64, stats: &mut EpochStats) -> Result<(), HarnessError> {
        let scale = 1.0 / count as f64;
        for g in &mut self.grad {
            *g *= scale;
        }
        self.gradient_evaluations += count as u64;
        stats.backward += count;
        stats.steps += 1;
        self.sgd.step(&mut self.model, &self.grad, lr)?;
        Ok(())
    }

    fn train_list(&mut self, list: &[usize], epoch: usize, lr: f64, stats: &mut EpochStats) -> Result<(), HarnessError> {
        for batch in list.chunks(self.cfg.batch_size) {
            self.train_batch(batch, epoch, lr, stats)?;
        }
        Ok(())
    }

    fn iswr_epoch(&mut self, epoch: usize, lr: f64, stats: &mut EpochStats) -> Result<(), HarnessError> {
        let mut iswr = self.iswr.take().expect("ISWR state present");
        iswr.rebuild();
        let mut remaining = self.train.n;
        while remaining > 0 {
            let size = remaining.min(self.cfg.batch_size);
            let batch = iswr.draw(size, &mut self.rng);
            self.train_batch(&batch, epoch, lr, stats)?;
            for &i in &batch {
                iswr.update(i, self.store.states()[i].lagging_loss);
            }
            remaining -= size;
        }
        self.iswr = Some(iswr);
        Ok(())
    }

    fn sb_epoch(&mut self, order: &[usize], epoch: usize, lr: f64, stats: &mut EpochStats) -> Result<(), HarnessError> {
        let mut sb = self.sb.take().expect("SB state present");
        let mut losses = Vec::with_capacity(self.cfg.batch_size);
        for batch in order.chunks(self.cfg.batch_size) {
            losses.clear();
            for &i in batch {
                let o = self
                    .model
                    .sample_pass(self.train.row(i), self.train.labels[i], &mut self.scratch, None);
                self.store.record_forward(i, o.loss, o.pa, o.pc, epoch)?;
                stats.loss_sum += o.loss;
                losses.push(o.loss);
            }
            stats.forward += batch.len();
            let selected = sb_select(&losses, &mut sb, &mut self.rng);
            if selected.is_empty() {
                continue;
            }
            self.grad.fill(0.0);
            for &pos in &selected {
                let i = batch[pos];
                self.model.sample_pass(
                    self.train.row(i),
                    self.train.labels[i],
                    &mut self.scratch,
                    Some(&mut self.grad),
                );
            }
            self.apply_gradient(selected.len(), lr, stats)?;
        }
        self.sb = Some(sb);
        Ok(())
    }

    /// Top-1 accuracy on the test set.
    pub fn evaluate(&mut self) -> f64 {
        let mut correct = 0usize;
        for i in 0..self.test.n {
            let o = self
                .model
                .sample_pass(self.test.row(i), self.test.labels[i], &mut self.scratch, None);
            correct += o.pa as usize;
        }
        correct as f64 / self.test.n as f64
    }

    /// Runs one epoch of the configured strategy.
    pub fn run_epoch(&mut self, epoch: usize, phase: Phase) -> Result<MetricsRecord, HarnessError> {
        let started = Instant::now();
        let n = self.train.n;
        let base_lr = base_lr_at(&self.cfg.optim, epoch);
        let writes_before = self.store.writes();
        let mut stats = EpochStats::default();
        let strategy = if phase == Phase::Count {
            Strategy::Baseline
        } else {
            self.cfg.strategy
        };

        let plan = match strategy {
            Strategy::Baseline | Strategy::Forget => {
                let plan = EpochPlan::full(epoch, n, 0.0, base_lr, base_lr, &mut self.rng);
                self.train_list(&plan.training_list, epoch, plan.eta, &mut stats)?;
                plan
            }
            Strategy::Kakurenbo => {
                let plan = hiding::select_hidden(&self.store, &self.cfg.hiding, epoch, base_lr, &mut self.rng)?;
                self.store.set_hidden(&plan.hidden_list);
                self.train_list(&plan.training_list, epoch, plan.eta, &mut stats)?;
                stats.forward += hiding::refresh_hidden(&self.model, self.train, &plan, &mut self.store)?;
                plan
            }
            Strategy::Iswr => {
                self.iswr_epoch(epoch, base_lr, &mut stats)?;
                EpochPlan {
                    epoch,
                    training_list: Vec::new(),
                    hidden_list: Vec::new(),
                    dropped_top_list: Vec::new(),
                    fraction: 0.0,
                    realized_fraction: 0.0,
                    moved_back: 0,
                    base_lr,
                    eta: base_lr,
                }
            }
            Strategy::Sb => {
                let plan = EpochPlan::full(epoch, n, 0.0, base_lr, base_lr, &mut self.rng);
                self.sb_epoch(&plan.training_list, epoch, plan.eta, &mut stats)?;
                plan
            }
        };

        if matches!(strategy, Strategy::Baseline | Strategy::Kakurenbo | Strategy::Forget) {
            self.check_epoch(&plan, &stats, writes_before)?;
        }
        if let Some(f) = self.forget.as_mut() {
            f.end_epoch()?;
        }
        if !self.cfg.dump_plans.as_os_str().is_empty() && strategy == Strategy::Kakurenbo {
            hiding::dump_plan(&plan, &self.cfg.dump_plans)?;
        }

        let hidden_again = count_common(&plan.hidden_list, &self.prev_hidden);
        let test_top1 = self.evaluate();
        let trained = stats.forward - plan.hidden_list.len() - plan.dropped_top_list.len();
        let record = MetricsRecord {
            epoch,
            phase,
            train_loss: if trained == 0 { 0.0 } else { stats.loss_sum / trained as f64 },
            test_top1,
            f_e: plan.fraction,
            f_star: plan.realized_fraction,
            hidden: plan.hidden_list.len(),
            dropped: plan.dropped_top_list.len(),
            moved_back: plan.moved_back,
            hidden_again,
            forward_count: stats.forward,
            backward_count: stats.backward,
            steps: stats.steps,
            base_lr,
            eta_e: plan.eta,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.prev_hidden = plan.hidden_list.clone();
        self.last_plan = Some(plan);
        Ok(record)
    }

    /// Accounting identities that must hold after every full-dataset or
    /// hiding epoch.
    fn check_epoch(&self, plan: &EpochPlan, stats: &EpochStats, writes_before: u64) -> Result<(), HarnessError> {
        let n = self.train.n;
        let fail = |message: String| {
            Err(HarnessError::Invariant {
                epoch: plan.epoch,
                message,
            })
        };
        if let Err(e) = plan.check_partition(n) {
            return fail(format!("plan is not a partition: {e}"));
        }
        if plan.realized_fraction > plan.fraction {
            return fail(format!("F* {} exceeds F_e {}", plan.realized_fraction, plan.fraction));
        }
        let expected_backward = n - plan.hidden_list.len() - plan.dropped_top_list.len();
        if stats.backward != expected_backward {
            return fail(format!("{} backward passes, expected {expected_backward}", stats.backward));
        }
        if stats.forward != n {
            return fail(format!("{} forward passes, expected {n}", stats.forward));
        }
        if self.store.writes() - writes_before != n as u64 {
            return fail(format!("{} store writes, expected {n}", self.store.writes() - writes_before));
        }
        if self.store.states().iter().any(|s| s.refreshed_at != Some(plan.epoch)) {
            return fail("a sample was not refreshed this epoch".into());
        }
        if stats.steps != hiding::steps_per_epoch(n, n - expected_backward, self.cfg.batch_size) {
            return fail(format!("{} steps taken", stats.steps));
        }
        Ok(())
    }
}

/// Size of the intersection of two ascending index lists.
fn count_common(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub model: Model,
    /// Indices removed by FORGET (ascending), empty otherwise.
    pub pruned: Vec<usize>,
    /// FORGET counting-phase statistics.
    pub forget: Option<ForgetState>,
}

impl RunOutcome {
    /// Writes `metrics.jsonl` and `model.ckpt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let metrics = dir.join("metrics.jsonl");
        let file = std::fs::File::create(&metrics).map_err(io_err(&metrics))?;
        metrics::write_jsonl(std::io::BufWriter::new(file), &self.records, &self.summary).map_err(io_err(&metrics))?;
        let ckpt = dir.join("model.ckpt");
        std::fs::write(&ckpt, self.model.to_checkpoint_bytes()).map_err(io_err(&ckpt))?;
        Ok(())
    }
}

fn summarize(cfg: &RunConfig, records: &[MetricsRecord], counting_epochs: usize, pruned: usize, gradient_evaluations: u64) -> RunSummary {
    let train: Vec<&MetricsRecord> = records.iter().filter(|r| r.phase == Phase::Train).collect();
    RunSummary {
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        epochs: train.len(),
        counting_epochs,
        pruned,
        best_test_top1: train.iter().map(|r| r.test_top1).fold(0.0, f64::max),
        final_test_top1: train.last().map_or(0.0, |r| r.test_top1),
        total_forward: records.iter().map(|r| r.forward_count as u64).sum(),
        total_backward: records.iter().map(|r| r.backward_count as u64).sum(),
        gradient_evaluations,
        total_steps: records.iter().map(|r| r.steps as u64).sum(),
        total_wall_clock_ms: records.iter().map(|r| r.wall_clock_ms).sum(),
    }
}

/// Runs a whole experiment on already-loaded data. Deterministic given the
/// config; `on_epoch` sees every record as it is produced.
pub fn run_with_data(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    cfg.validate_for(train)?;
    let mut records = Vec::new();

    if cfg.strategy != Strategy::Forget {
        let mut trainer = Trainer::new(cfg, train, test)?;
        for epoch in 0..cfg.epochs {
            let r = trainer.run_epoch(epoch, Phase::Train)?;
            on_epoch(&r);
            records.push(r);
        }
        let evals = trainer.gradient_evaluations();
        check_accounting(&records, evals)?;
        return Ok(RunOutcome {
            summary: summarize(cfg, &records, 0, 0, evals),
            records,
            model: trainer.model,
            pruned: Vec::new(),
            forget: None,
        });
    }

    // FORGET: count forgetting events on the full set, prune, restart.
    let count_epochs = cfg.forget.count_epochs;
    let mut counter = Trainer::new(cfg, train, test)?;
    counter.enable_forget_counting(count_epochs);
    for epoch in 0..count_epochs {
        let r = counter.run_epoch(epoch, Phase::Count)?;
        on_epoch(&r);
        records.push(r);
    }
    let mut state = counter.forget.take().expect("counting state present");
    let pruned = state.prune(cfg.hiding.max_fraction)?;
    let mut keep_mask = vec![true; train.n];
    for &i in &pruned {
        keep_mask[i] = false;
    }
    let kept: Vec<usize> = (0..train.n).filter(|&i| keep_mask[i]).collect();
    let reduced = train.subset(&kept);
    cfg.validate_for(&reduced)?;
    let mut trainer = Trainer::new(cfg, &reduced, test)?;
    for epoch in 0..cfg.epochs {
        let r = trainer.run_epoch(epoch, Phase::Train)?;
        on_epoch(&r);
        records.push(r);
    }
    let evals = counter.gradient_evaluations() + trainer.gradient_evaluations();
    check_accounting(&records, evals)?;
    Ok(RunOutcome {
        summary: summarize(cfg, &records, count_epochs, pruned.len(), evals),
        records,
        model: trainer.model,
        pruned,
        forget: Some(state),
    })
}

fn check_accounting(records: &[MetricsRecord], gradient_evaluations: u64) -> Result<(), HarnessError> {
    let logged: u64 = records.iter().map(|r| r.backward_count as u64).sum();
    if logged != gradient_evaluations {
        return Err(HarnessError::Invariant {
            epoch: records.len(),
            message: format!("logged {logged} backward passes but computed {gradient_evaluations} sample gradients"),
        });
    }
    Ok(())
}

/// Loads the configured data, runs, and writes metrics, checkpoint and the
/// plan dumps (if enabled) under `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let outcome = run_with_data(cfg, &train, &test, |_| {})?;
    if let Some(dir) = out_dir {
        outcome.write_to(dir)?;
    }
    Ok(outcome)
}
