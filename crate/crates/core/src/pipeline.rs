//! Training orchestration: SGD over taped networks, activation annealing,
//! shape-adaptive weight transplantation, warmup with layer freezing, and
//! the two bundled transfer pipelines.
//!
//! pipe-S anneals a sharpened-ReLU network to an exact step, then
//! transplants into a multi-step spiking run. pipe-D trains an analog
//! network on static frames, transplants onto event data through a LIAF
//! stage (warming up only reinitialized layers), and finishes in LIF.
//!
//! One pipeline run is a sequential state machine; per-stage checkpoints on
//! disk double as resume points. All randomness is derived from the run
//! seed by stage label, so a resumed run reproduces an uninterrupted one
//! byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, SurrogateSpec, Tape};
use crate::error::{Error, Result};
use crate::eventdata::{load_dataset, sample_input, Dataset, SampleData};
use crate::model::{
    build, conv_stack, dense_stack, forward, load, micro_resnet, save, taped_forward, Checkpoint,
    CheckpointMeta, NetworkSpec, Regime, RegimeParams,
};
use crate::neurons::{rate_decode, srelu_alpha_schedule};
use crate::tensor::{Rng, Tensor};

/// Step-decay learning rate: `initial`, multiplied by `factor` once per
/// listed epoch that has been reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_epochs: Vec::new(),
            factor: 0.1,
        }
    }

    /// Learning rate in force at a 0-based epoch.
    pub fn at(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.initial * self.factor.powi(hits as i32)
    }
}

/// Training objective over the rate-decoded logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Everything one training stage needs besides the data.
#[derive(Debug, Clone)]
pub struct StageOptions {
    /// Stage tag used in report rows, snapshot names, and RNG derivation.
    pub label: String,
    pub regime: RegimeParams,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    /// Frozen names: an entry freezes the parameter of that exact name and
    /// any parameter under it ("conv1" freezes conv1.weight and conv1.bias).
    pub frozen: BTreeSet<String>,
    pub momentum: f64,
    pub loss: LossKind,
    /// Ramp the sharpened-ReLU knee linearly to an exact step over the
    /// stage's epochs (requires the sann regime and at least 2 epochs).
    pub anneal: bool,
    /// When set, a checkpoint is written here after every epoch.
    pub snapshot_dir: Option<PathBuf>,
}

impl StageOptions {
    /// Plain stage: batch 8, no freezing, momentum 0, cross-entropy.
    pub fn basic(label: &str, regime: RegimeParams, epochs: usize, lr: f64) -> Self {
        StageOptions {
            label: label.to_string(),
            regime,
            epochs,
            lr: LrSchedule::constant(lr),
            batch_size: 8,
            frozen: BTreeSet::new(),
            momentum: 0.0,
            loss: LossKind::CrossEntropy,
            anneal: false,
            snapshot_dir: None,
        }
    }
}

/// One epoch of one stage.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub regime: Regime,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Present only while annealing.
    pub alpha: Option<f64>,
    pub wall_s: f64,
}

/// Per-epoch records plus the headline numbers derived from them.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_acc: f64,
    pub best_epoch: usize,
}

pub const REPORT_CSV_HEADER: &str = "epoch,stage,regime,train_loss,test_acc,alpha,wall_s";

impl TrainReport {
    pub fn from_records(records: Vec<EpochRecord>) -> Self {
        let mut best_acc = 0.0;
        let mut best_epoch = 0;
        for r in &records {
            if r.test_acc > best_acc {
                best_acc = r.test_acc;
                best_epoch = r.epoch;
            }
        }
        TrainReport {
            records,
            best_acc,
            best_epoch,
        }
    }

    /// First epoch whose accuracy reaches each threshold; None if never.
    /// Monotone in the threshold.
    pub fn epochs_to_threshold(&self, thresholds: &[f64]) -> Vec<(f64, Option<usize>)> {
        thresholds
            .iter()
            .map(|&t| {
                let hit = self
                    .records
                    .iter()
                    .find(|r| r.test_acc >= t)
                    .map(|r| r.epoch);
                (t, hit)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&csv_row(r));
        }
        s
    }
}

fn csv_row(r: &EpochRecord) -> String {
    let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{:.3}\n",
        r.epoch,
        r.stage,
        r.regime.as_str(),
        r.train_loss,
        r.test_acc,
        alpha,
        r.wall_s
    )
}

/// Bins or broadcasts raw samples into network inputs for a given step
/// count.
pub fn prepare_samples(
    samples: &[(SampleData, usize)],
    t_steps: usize,
) -> Result<Vec<(Tensor, usize)>> {
    samples
        .iter()
        .map(|(data, label)| Ok((sample_input(data, t_steps)?, *label)))
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose rate-decoded argmax matches the label.
pub fn evaluate(
    spec: &NetworkSpec,
    ckpt: &Checkpoint,
    samples: &[(Tensor, usize)],
    rp: &RegimeParams,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate", "no samples to evaluate"));
    }
    let hits = samples
        .par_iter()
        .map(|(input, label)| -> Result<usize> {
            let logits = forward(spec, ckpt, input, rp)?;
            let decoded = rate_decode(&logits)?;
            Ok(usize::from(argmax(decoded.data()) == *label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

fn frozen_matches(frozen: &BTreeSet<String>, name: &str) -> bool {
    frozen.iter().any(|f| {
        name == f
            || name
                .strip_prefix(f.as_str())
                .map_or(false, |rest| rest.starts_with('.'))
    })
}

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, classes]);
    t.set(&[0, label], 1.0);
    t
}

fn fisher_yates(order: &mut [usize], rng: &mut Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
}

/// Mean gradient and mean loss over one batch, one tape per sample, reduced
/// in batch order so thread count never changes the result.
fn batch_gradients(
    spec: &NetworkSpec,
    params: &BTreeMap<String, Tensor>,
    batch: &[usize],
    train: &[(Tensor, usize)],
    rp: &RegimeParams,
    loss_kind: LossKind,
) -> Result<(Gradients, f64)> {
    let per_sample = batch
        .par_iter()
        .map(|&i| -> Result<(Gradients, f64)> {
            let (input, label) = &train[i];
            let mut tape = Tape::new();
            let net = taped_forward(&mut tape, spec, params, input, rp)?;
            let loss_node = match loss_kind {
                LossKind::CrossEntropy => tape.softmax_cross_entropy(net.decoded, &[*label])?,
                LossKind::Mse => tape.mse_loss(net.decoded, one_hot(*label, spec.classes))?,
            };
            let grads = tape.backward(loss_node)?;
            Ok((grads, tape.value(loss_node).data()[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = per_sample.into_iter();
    let (mut grads, mut loss_sum) = iter.next().expect("batch is never empty");
    for (g, l) in iter {
        grads.accumulate(&g)?;
        loss_sum += l;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale_in_place(inv);
    Ok((grads, loss_sum * inv))
}

fn apply_update(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    velocity: &mut BTreeMap<String, Tensor>,
    frozen: &BTreeSet<String>,
) {
    if lr == 0.0 && momentum == 0.0 {
        return;
    }
    for (name, g) in grads.iter() {
        if frozen_matches(frozen, name) {
            continue;
        }
        let w = params.get_mut(name).expect("gradient for unknown parameter");
        if momentum > 0.0 {
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            for (wi, vi) in w.data_mut().iter_mut().zip(v.data()) {
                *wi -= lr * vi;
            }
        } else {
            for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *wi -= lr * gi;
            }
        }
        w.round_to_f32();
    }
}

fn sanitize(label: &str) -> String {
    label.replace(['/', '\\', '.'], "_")
}

/// Minibatch SGD over taped networks. Frozen parameters are bitwise
/// untouched; updated parameters are snapped back to the f32 grid after
/// every step. A non-finite epoch loss aborts with a divergence error
/// naming the last finite epoch.
pub fn train_stage(
    ckpt: &Checkpoint,
    spec: &NetworkSpec,
    train: &[(Tensor, usize)],
    test: &[(Tensor, usize)],
    opts: &StageOptions,
    rng: &Rng,
) -> Result<(Checkpoint, TrainReport)> {
    ckpt.verify_against(spec)?;
    if train.is_empty() {
        return Err(Error::contract("train_stage", "empty training set"));
    }
    if opts.batch_size == 0 {
        return Err(Error::contract("train_stage", "batch_size must be >= 1"));
    }
    if opts.anneal {
        if opts.regime.regime != Regime::Sann {
            return Err(Error::contract(
                "train_stage",
                "annealing requires the sann regime",
            ));
        }
        if opts.epochs < 2 {
            return Err(Error::contract(
                "train_stage",
                "annealing needs at least 2 epochs (ramp start and step end)",
            ));
        }
    }
    if !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::contract(
            "train_stage",
            format!("momentum must be in [0, 1), got {}", opts.momentum),
        ));
    }
    if let Some(dir) = &opts.snapshot_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut params = ckpt.params.clone();
    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut records = Vec::with_capacity(opts.epochs);
    let mut last_finite: Option<(usize, f64)> = None;

    for epoch in 0..opts.epochs {
        let t0 = Instant::now();
        let mut rp = opts.regime;
        if opts.anneal {
            rp.alpha = srelu_alpha_schedule(epoch as u32, (opts.epochs - 1) as u32, rp.u_th);
        }
        let lr = opts.lr.at(epoch);

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng.derive(&format!("epoch{}/shuffle", epoch));
        fisher_yates(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let (grads, batch_loss) =
                batch_gradients(spec, &params, batch, train, &rp, opts.loss)?;
            loss_sum += batch_loss * batch.len() as f64;
            apply_update(&mut params, &grads, lr, opts.momentum, &mut velocity, &opts.frozen);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            let detail = match last_finite {
                Some((e, l)) => format!(
                    "train loss became non-finite; last finite epoch {} had loss {:.6}",
                    e, l
                ),
                None => "train loss became non-finite in the first epoch".to_string(),
            };
            return Err(Error::Divergence {
                stage: opts.label.clone(),
                epoch: epoch as u32,
                detail,
            });
        }
        last_finite = Some((epoch, train_loss));

        let epoch_ckpt = Checkpoint {
            spec_hash: ckpt.spec_hash,
            meta: CheckpointMeta {
                regime: rp.regime,
                t_steps: rp.t_steps,
                epoch,
                seed: ckpt.meta.seed,
                alpha: rp.alpha,
            },
            params: params.clone(),
        };
        let test_acc = if test.is_empty() {
            0.0
        } else {
            evaluate(spec, &epoch_ckpt, test, &rp)?
        };
        if let Some(dir) = &opts.snapshot_dir {
            save(
                &epoch_ckpt,
                &dir.join(format!("{}_e{:03}.snnf", sanitize(&opts.label), epoch)),
            )?;
        }
        records.push(EpochRecord {
            epoch,
            stage: opts.label.clone(),
            regime: rp.regime,
            train_loss,
            test_acc,
            alpha: if opts.anneal { Some(rp.alpha) } else { None },
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }

    let final_rp = records.last().map(|r| (r.regime, r.alpha)).unwrap_or((
        opts.regime.regime,
        None,
    ));
    let out = Checkpoint {
        spec_hash: ckpt.spec_hash,
        meta: CheckpointMeta {
            regime: final_rp.0,
            t_steps: opts.regime.t_steps,
            epoch: opts.epochs.saturating_sub(1),
            seed: ckpt.meta.seed,
            alpha: final_rp.1.unwrap_or(opts.regime.alpha),
        },
        params,
    };
    Ok((out, TrainReport::from_records(records)))
}

/// Copies every parameter whose name and shape match the target
/// architecture; the rest are freshly initialized and reported in the
/// returned set. Copied values are moved verbatim, no rescaling.
pub fn transplant(
    source: &Checkpoint,
    target_spec: &NetworkSpec,
    rng: &mut Rng,
) -> Result<(Checkpoint, BTreeSet<String>)> {
    let mut fresh = build(target_spec, rng)?;
    let mut changed: BTreeSet<String> = fresh.params.keys().cloned().collect();
    for (name, t) in fresh.params.iter_mut() {
        if let Some(src) = source.params.get(name) {
            if src.shape() == t.shape() {
                *t = src.clone();
                changed.remove(name);
            }
        }
    }
    if changed.len() == fresh.params.len() {
        return Err(Error::contract(
            "transplant",
            "no parameter matches by name and shape; wrong architecture pair?",
        ));
    }
    fresh.meta = CheckpointMeta {
        regime: source.meta.regime,
        t_steps: source.meta.t_steps,
        epoch: 0,
        seed: source.meta.seed,
        alpha: source.meta.alpha,
    };
    Ok((fresh, changed))
}

/// Short adaptation pass that trains only the `changed` parameters,
/// freezing everything else. An empty changed set is a no-op.
pub fn warmup(
    ckpt: &Checkpoint,
    spec: &NetworkSpec,
    changed: &BTreeSet<String>,
    train: &[(Tensor, usize)],
    test: &[(Tensor, usize)],
    opts: &StageOptions,
    rng: &Rng,
) -> Result<(Checkpoint, TrainReport)> {
    for name in changed {
        if !ckpt.params.contains_key(name) {
            return Err(Error::contract(
                "warmup",
                format!("changed set names unknown parameter {}", name),
            ));
        }
    }
    if changed.is_empty() || opts.epochs == 0 {
        return Ok((ckpt.clone(), TrainReport::default()));
    }
    let mut frozen: BTreeSet<String> = ckpt.params.keys().cloned().collect();
    for name in changed {
        frozen.remove(name);
    }
    let mut wopts = opts.clone();
    wopts.frozen = frozen;
    wopts.anneal = false;
    train_stage(ckpt, spec, train, test, &wopts, rng)
}

/// Which transfer pipeline a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipeKind {
    S,
    D,
}

/// Network family built per stage from the stage dataset's dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    MicroResnet,
    ConvStack { stages: Vec<[usize; 2]> },
    DenseStack { hidden: Vec<usize> },
}

impl ArchConfig {
    pub fn spec(&self, channels: usize, hw: usize, classes: usize) -> NetworkSpec {
        match self {
            ArchConfig::MicroResnet => micro_resnet(channels, hw, classes),
            ArchConfig::ConvStack { stages } => {
                let pairs: Vec<(usize, usize)> = stages.iter().map(|s| (s[0], s[1])).collect();
                conv_stack(channels, hw, &pairs, classes)
            }
            ArchConfig::DenseStack { hidden } => {
                dense_stack([channels, hw, hw], hidden, classes)
            }
        }
    }
}

fn default_t_steps() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    #[serde(default = "default_t_steps")]
    pub t_steps: usize,
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Half-width of a rectangular surrogate window for this stage's spike
    /// backward; None keeps the regime's default box. A window wider than
    /// the threshold lets gradient reach subthreshold cells, which matters
    /// when training spiking networks from random initializations.
    #[serde(default)]
    pub surrogate_width: Option<f64>,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

/// A full pipeline run: stage list, datasets, seed, and optimizer knobs.
/// The first stage trains on the source dataset, later stages on the
/// target; transplantation bridges every stage boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipe: PipeKind,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Dataset manifest paths; relative paths resolve against the config
    /// file's directory when loaded from disk.
    pub source_data: PathBuf,
    pub target_data: PathBuf,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let regimes: Vec<Regime> = self.stages.iter().map(|s| s.regime).collect();
        let expect: &[Regime] = match self.pipe {
            PipeKind::S => &[Regime::Sann, Regime::Lif],
            PipeKind::D => &[Regime::Ann, Regime::Liaf, Regime::Lif],
        };
        if regimes != expect {
            return Err(Error::Config(format!(
                "pipe {:?} needs stages {:?}, got {:?}",
                self.pipe, expect, regimes
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let tag = format!("stage {} ({})", i + 1, s.regime.as_str());
            if s.epochs == 0 {
                return Err(Error::Config(format!("{}: epochs must be >= 1", tag)));
            }
            if s.regime == Regime::Sann && s.epochs < 2 {
                return Err(Error::Config(format!(
                    "{}: annealing needs at least 2 epochs",
                    tag
                )));
            }
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{}: batch_size must be >= 1", tag)));
            }
            if s.t_steps == 0 {
                return Err(Error::Config(format!("{}: t_steps must be >= 1", tag)));
            }
            if !s.regime.is_stateful() && s.t_steps != 1 {
                return Err(Error::Config(format!(
                    "{}: single-step regime cannot take t_steps {}",
                    tag, s.t_steps
                )));
            }
            if !(s.lr.initial >= 0.0) {
                return Err(Error::Config(format!("{}: bad learning rate", tag)));
            }
            if !(s.lr.factor > 0.0 && s.lr.factor <= 1.0) {
                return Err(Error::Config(format!(
                    "{}: decay factor must be in (0, 1]",
                    tag
                )));
            }
            if let Some(w) = s.surrogate_width {
                if !matches!(s.regime, Regime::Lif | Regime::Liaf) {
                    return Err(Error::Config(format!(
                        "{}: surrogate_width applies only to spiking stages",
                        tag
                    )));
                }
                if !(w > 0.0) {
                    return Err(Error::Config(format!(
                        "{}: surrogate_width must be > 0",
                        tag
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a pipeline config, resolving relative dataset paths
/// against the config file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!(
        "cannot read config {}: {}",
        path.display(),
        e
    )))?;
    let mut config: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Config(
        format!("config {} is not valid: {}", path.display(), e),
    ))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for p in [&mut config.source_data, &mut config.target_data] {
        if p.is_relative() {
            *p = base.join(&p);
        }
    }
    config.validate()?;
    Ok(config)
}

/// Thresholds reported in every run summary.
pub const SUMMARY_THRESHOLDS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub label: String,
    pub regime: String,
    pub epochs: usize,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub epochs_to_threshold: BTreeMap<String, Option<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub pipe: String,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
}

/// Everything a pipeline run leaves behind.
pub struct PipeOutput {
    pub final_checkpoint: Checkpoint,
    pub report: TrainReport,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Condenses one stage's report into the summary form used in run
/// summaries (deliberately free of wall-clock times so identical seeds
/// produce identical bytes).
pub fn stage_summary(label: &str, regime: Regime, report: &TrainReport) -> StageSummary {
    let mut map = BTreeMap::new();
    for (t, e) in report.epochs_to_threshold(&SUMMARY_THRESHOLDS) {
        map.insert(t.to_string(), e);
    }
    StageSummary {
        label: label.to_string(),
        regime: regime.as_str().to_string(),
        epochs: report.records.len(),
        best_acc: report.best_acc,
        best_epoch: report.best_epoch,
        final_train_loss: report.records.last().map(|r| r.train_loss).unwrap_or(0.0),
        epochs_to_threshold: map,
    }
}

fn append_report_rows(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let add_header = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if add_header {
        writeln!(f, "{}", REPORT_CSV_HEADER)?;
    }
    for r in rows {
        f.write_all(csv_row(r).as_bytes())?;
    }
    Ok(())
}

/// Runs every stage of a pipeline, transplanting between stages and warming
/// up reinitialized layers. Each stage's checkpoint persists in `out_dir`;
/// an existing stage checkpoint is loaded instead of retrained, which makes
/// an interrupted run resumable with identical results.
pub fn run_pipe(config: &PipelineConfig, out_dir: &Path) -> Result<PipeOutput> {
    config.validate()?;
    let source = load_dataset(&config.source_data)?;
    let target = if config.target_data == config.source_data {
        source.clone()
    } else {
        load_dataset(&config.target_data)?
    };
    std::fs::create_dir_all(out_dir)?;
    let snapshots = out_dir.join("snapshots");
    let report_path = out_dir.join("report.csv");
    let root = Rng::new(config.seed);

    let mut all_rows: Vec<EpochRecord> = Vec::new();
    let mut summaries: Vec<StageSummary> = Vec::new();
    let mut ckpt_paths: Vec<PathBuf> = Vec::new();
    let mut current: Option<Checkpoint> = None;

    for (i, stage) in config.stages.iter().enumerate() {
        let ds: &Dataset = if i == 0 { &source } else { &target };
        if ds.height != ds.width {
            return Err(Error::Data(format!(
                "dataset is {}x{}, networks here want square frames",
                ds.height, ds.width
            )));
        }
        let spec = config.arch.spec(ds.channels(), ds.height, ds.classes);
        let label = format!("s{}-{}", i + 1, stage.regime.as_str());
        let ckpt_path = out_dir.join(format!("ckpt_{}.snnf", label));
        ckpt_paths.push(ckpt_path.clone());
        if ckpt_path.exists() {
            let loaded = load(&ckpt_path)?;
            loaded.verify_against(&spec)?;
            current = Some(loaded);
            continue;
        }

        let stage_rng = root.derive(&label);
        let train = prepare_samples(&ds.train, stage.t_steps)?;
        let test = prepare_samples(&ds.test, stage.t_steps)?;

        let mut rp = match stage.regime {
            Regime::Ann => RegimeParams::ann(),
            Regime::Sann => RegimeParams::sann(0.0),
            Regime::Liaf => RegimeParams::liaf(stage.t_steps),
            Regime::Lif => RegimeParams::lif(stage.t_steps),
        };
        if let Some(w) = stage.surrogate_width {
            rp.surrogate = SurrogateSpec::rectangular(w, rp.u_th)?;
        }
        let (mut ckpt, changed) = match &current {
            None => {
                let mut init_rng = stage_rng.derive("init");
                let mut fresh = build(&spec, &mut init_rng)?;
                fresh.meta.seed = config.seed;
                (fresh, BTreeSet::new())
            }
            Some(prev) => {
                let mut t_rng = stage_rng.derive("transplant");
                transplant(prev, &spec, &mut t_rng)?
            }
        };

        let opts = StageOptions {
            label: label.clone(),
            regime: rp,
            epochs: stage.epochs,
            lr: stage.lr.clone(),
            batch_size: stage.batch_size,
            frozen: stage.frozen.iter().cloned().collect(),
            momentum: config.momentum,
            loss: config.loss,
            anneal: stage.regime == Regime::Sann,
            snapshot_dir: Some(snapshots.clone()),
        };

        if stage.warmup_epochs > 0 && !changed.is_empty() {
            let mut wopts = opts.clone();
            wopts.label = format!("{}-warmup", label);
            wopts.epochs = stage.warmup_epochs;
            wopts.snapshot_dir = None;
            let wrng = stage_rng.derive("warmup");
            let (next, wreport) = warmup(&ckpt, &spec, &changed, &train, &test, &wopts, &wrng)?;
            ckpt = next;
            append_report_rows(&report_path, &wreport.records)?;
            summaries.push(stage_summary(&wopts.label, stage.regime, &wreport));
            all_rows.extend(wreport.records);
        }

        let train_rng = stage_rng.derive("train");
        let (next, report) = train_stage(&ckpt, &spec, &train, &test, &opts, &train_rng)?;
        save(&next, &ckpt_path)?;
        append_report_rows(&report_path, &report.records)?;
        summaries.push(stage_summary(&label, stage.regime, &report));
        all_rows.extend(report.records);
        current = Some(next);
    }

    let summary = RunSummary {
        pipe: match config.pipe {
            PipeKind::S => "s".to_string(),
            PipeKind::D => "d".to_string(),
        },
        seed: config.seed,
        stages: summaries,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let final_checkpoint = current.ok_or_else(|| Error::Config("empty stage list".into()))?;
    Ok(PipeOutput {
        final_checkpoint,
        report: TrainReport::from_records(all_rows),
        checkpoint_paths: ckpt_paths,
    })
}

/// Static pipeline: annealed sharpened-ReLU stage, then multi-step LIF.
pub fn run_pipe_s(config: &PipelineConfig, out_dir: &Path) -> Result<PipeOutput> {
    if config.pipe != PipeKind::S {
        return Err(Error::Config("config is not a pipe-S config".into()));
    }
    run_pipe(config, out_dir)
}

/// Dynamic pipeline: analog stage on static frames, LIAF stage on events
/// with warmup, then LIF.
pub fn run_pipe_d(config: &PipelineConfig, out_dir: &Path) -> Result<PipeOutput> {
    if config.pipe != PipeKind::D {
        return Err(Error::Config("config is not a pipe-D config".into()));
    }
    run_pipe(config, out_dir)
}
