//! Three-stage training: autoencoder, decoder refinement, flow head.
//!
//! Each stage writes `stageK/last` after every epoch, `stageK/final` when it
//! completes, and appends one JSON record per epoch to `stageK/metrics.jsonl`.
//! All randomness is derived from `(seed, stage, step)` or
//! `(seed, stage, epoch)`, so a resumed run replays the exact same streams.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderConfig, Stage1Weights, TEACHER_PREFIXES};
use crate::batch::{collate_text, MotionItem, TextBatch};
use crate::checkpoint::{self, insert_namespace, namespace, CheckpointMeta};
use crate::distill::{ema_update, lambda_schedule, update_center};
use crate::error::{ModelError, Result};
use crate::flow::{fm_loss, interpolate, velocity_target, LatentStats};
use crate::flow_head::{FlowHead, FlowHeadConfig};
use crate::losses::{kinematic_terms, masked_mse, Denormalizer};
use crate::nn::{scalar, Ctx, DropoutRng};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::ParamStore;
use motionflow_core::dataset::{Dataset, Normalization, Split};
use motionflow_core::rng::{substream, substream_seed};
use motionflow_core::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub commit: f64,
    pub fk_stage1: f64,
    pub fk_stage2: f64,
    /// Posterior KL to the standard normal.
    pub kl: f64,
    pub vel: f64,
    pub acc: f64,
    pub jerk: f64,
    pub global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, commit: 0.01, fk_stage1: 0.5, fk_stage2: 0.1, kl: 1e-4, vel: 0.2, acc: 0.05, jerk: 0.01, global: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("rec", self.rec),
            ("commit", self.commit),
            ("fk_stage1", self.fk_stage1),
            ("fk_stage2", self.fk_stage2),
            ("kl", self.kl),
            ("vel", self.vel),
            ("acc", self.acc),
            ("jerk", self.jerk),
            ("global", self.global),
        ];
        for (k, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!("weights.{k} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Upper bound on batches per epoch (0 = the whole training split).
    pub max_batches: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, lr: 2e-4, max_batches: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: AutoencoderConfig,
    pub flow: FlowHeadConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    /// Probability of dropping a caption during flow training.
    pub cfg_drop: f64,
    /// Test-split sequences used for the per-epoch flow validation loss.
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            model: AutoencoderConfig::default(),
            flow: FlowHeadConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            stage1: StageConfig { epochs: 50, ..Default::default() },
            stage2: StageConfig { epochs: 20, ..Default::default() },
            stage3: StageConfig { epochs: 200, ..Default::default() },
            cfg_drop: 0.1,
            val_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        self.weights.validate()?;
        for (k, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if s.batch_size == 0 {
                return Err(ModelError::Config(format!("{k}.batch_size must be >= 1")));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(ModelError::Config(format!("{k}.lr must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.cfg_drop) {
            return Err(ModelError::Config("cfg_drop must be in [0, 1]".into()));
        }
        if self.flow.max_latent_len < self.model.vae.max_latent_len {
            return Err(ModelError::Config("flow.max_latent_len must cover model.vae.max_latent_len".into()));
        }
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }
}

/// One training or evaluation sequence.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub item: MotionItem,
    pub caption: String,
    pub class_label: String,
}

/// Normalized train/test sequences.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalization: Normalization,
    pub num_joints: usize,
    pub fps: f64,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let norm = &ds.manifest.normalization;
        let collect = |split| {
            ds.split(split)
                .map(|(e, m)| {
                    Ok(Sample {
                        id: e.id,
                        item: MotionItem { frames: norm.normalize(m)?, mask: m.valid_mask().to_vec() },
                        caption: e.caption.clone(),
                        class_label: e.class_label.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: collect(Split::Train)?,
            test: collect(Split::Test)?,
            normalization: norm.clone(),
            num_joints: ds.manifest.num_joints,
            fps: ds.manifest.fps,
        })
    }
}

/// Data facts a trained run depends on, stored as `data.json` in the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub normalization: Normalization,
    pub num_joints: usize,
    pub fps: f64,
}

pub const DATA_FILE: &str = "data.json";

impl DataInfo {
    pub fn of(data: &TrainData) -> Self {
        Self { normalization: data.normalization.clone(), num_joints: data.num_joints, fps: data.fps }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(DATA_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| ModelError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stage 1 records the data facts; later stages must see the same data.
fn sync_data_info(run_dir: &Path, data: &TrainData, stage: u8) -> Result<()> {
    let info = DataInfo::of(data);
    let p = run_dir.join(DATA_FILE);
    if stage == 1 {
        std::fs::create_dir_all(run_dir).map_err(|e| ModelError::io(run_dir, e))?;
        return std::fs::write(&p, serde_json::to_string_pretty(&info)?).map_err(|e| ModelError::io(&p, e));
    }
    if p.is_file() && DataInfo::load(run_dir)? != info {
        return Err(ModelError::Config(format!("stage {stage} data differs from the data stage 1 was trained on")));
    }
    Ok(())
}

/// Metrics for one epoch, one line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    pub seconds: f64,
    pub train: BTreeMap<String, f64>,
    pub val: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from `stageK/last` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (the stage stays
    /// incomplete and can be resumed).
    pub max_epochs_this_run: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: u8,
    pub complete: bool,
    /// `stageK/final` when complete, else `stageK/last`.
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub history: Vec<EpochRecord>,
}

pub fn stage_dir(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join(format!("stage{stage}"))
}

pub fn final_dir(run_dir: &Path, stage: u8) -> PathBuf {
    stage_dir(run_dir, stage).join("final")
}

pub fn last_dir(run_dir: &Path, stage: u8) -> PathBuf {
    stage_dir(run_dir, stage).join("last")
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Errors if any parameter in `frozen` received a non-zero gradient.
pub fn assert_frozen(grads: &GradStore, frozen: &[(String, Var)]) -> Result<()> {
    for (name, v) in frozen {
        if let Some(g) = grads.get(v.as_tensor()) {
            if scalar(&g.abs()?.sum_all()?)? != 0.0 {
                return Err(ModelError::Validation(format!("frozen parameter {name} received a gradient")));
            }
        }
    }
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| ModelError::io(path, e))
}

fn append_record(path: &Path, r: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| ModelError::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| ModelError::io(path, e))
}

/// Running means of named scalars.
#[derive(Default)]
struct Averages {
    sums: BTreeMap<String, f64>,
    counts: BTreeMap<String, f64>,
}

impl Averages {
    fn add(&mut self, k: &str, v: f64) {
        *self.sums.entry(k.to_string()).or_default() += v;
        *self.counts.entry(k.to_string()).or_default() += 1.0;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums.iter().map(|(k, s)| (k.clone(), s / self.counts[k])).collect()
    }
}

fn epoch_batches(n: usize, st: &StageConfig, seed: u64, stage: u8, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "train", &[stage as u64, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(st.batch_size).map(|c| c.to_vec()).collect();
    if st.max_batches > 0 {
        batches.truncate(st.max_batches);
    }
    batches
}

fn steps_per_epoch(n: usize, st: &StageConfig) -> usize {
    let b = n.div_ceil(st.batch_size);
    if st.max_batches > 0 {
        b.min(st.max_batches)
    } else {
        b
    }
}

fn check_finite(v: f64, what: &str, step: usize, last_good: &Path) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Divergence { step, msg: format!("{what} is {v}; last good checkpoint: {}", last_good.display()) })
    }
}

/// Loads a completed stage's final checkpoint or fails with a dependency
/// error naming the missing stage.
fn require_stage(run_dir: &Path, stage: u8, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let dir = final_dir(run_dir, stage);
    if !checkpoint::exists(&dir) {
        return Err(ModelError::Dependency(format!(
            "stage {} requires a completed stage {stage} checkpoint at {}",
            stage + 1,
            dir.display()
        )));
    }
    let (meta, tensors) = checkpoint::load(&dir, device)?;
    if !meta.complete || meta.stage != stage {
        return Err(ModelError::Dependency(format!("{} is not a completed stage {stage} checkpoint", dir.display())));
    }
    Ok((meta, tensors))
}

fn config_value(cfg: &TrainConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn check_model_config(meta: &CheckpointMeta, cfg: &TrainConfig) -> Result<()> {
    let want = serde_json::to_value(&cfg.model)?;
    if meta.config.get("model") != Some(&want) {
        return Err(ModelError::Config(format!("stage {} checkpoint was trained with a different model configuration", meta.stage)));
    }
    Ok(())
}

/// Loads the autoencoder from a completed stage-1 or stage-2 checkpoint.
pub fn load_autoencoder(
    meta: &CheckpointMeta,
    tensors: &BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<Autoencoder> {
    check_model_config(meta, cfg)?;
    let mut ae = Autoencoder::new(&cfg.model, cfg.seed, cfg.precision.dtype(), device)?;
    ae.load_tensors(tensors)?;
    ae.load_host_state(meta.codebook.clone(), meta.center.clone())?;
    Ok(ae)
}

/// Common resume/checkpoint bookkeeping for one stage.
struct StageRun<'a> {
    stage: u8,
    cfg: &'a TrainConfig,
    dir: PathBuf,
    metrics: PathBuf,
    history: Vec<EpochRecord>,
    start_epoch: usize,
    resume: Option<(CheckpointMeta, BTreeMap<String, Tensor>)>,
}

impl<'a> StageRun<'a> {
    fn open(stage: u8, cfg: &'a TrainConfig, run_dir: &Path, opts: &RunOptions, device: &Device) -> Result<Self> {
        let dir = stage_dir(run_dir, stage);
        std::fs::create_dir_all(&dir).map_err(|e| ModelError::io(&dir, e))?;
        let metrics = dir.join(METRICS_FILE);
        let last = last_dir(run_dir, stage);
        let mut run = Self { stage, cfg, dir, metrics, history: Vec::new(), start_epoch: 0, resume: None };
        if opts.resume && checkpoint::exists(&last) {
            let (meta, tensors) = checkpoint::load(&last, device)?;
            if meta.stage != stage {
                return Err(ModelError::Checkpoint(format!("{} holds stage {}", last.display(), meta.stage)));
            }
            if meta.config != config_value(cfg)? {
                return Err(ModelError::Config("cannot resume: configuration differs from the checkpoint".into()));
            }
            run.history = read_history(&run.metrics)?.into_iter().filter(|r| r.epoch <= meta.epoch).collect();
            write_history(&run.metrics, &run.history)?;
            run.start_epoch = meta.epoch;
            log::info!("stage {stage}: resuming after epoch {} (step {})", meta.epoch, meta.step);
            run.resume = Some((meta, tensors));
        } else {
            write_history(&run.metrics, &[])?;
            let fin = run.dir.join("final");
            if fin.exists() {
                std::fs::remove_dir_all(&fin).map_err(|e| ModelError::io(&fin, e))?;
            }
        }
        Ok(run)
    }

    fn last(&self) -> PathBuf {
        self.dir.join("last")
    }

    fn meta(&self, epoch: usize, step: usize, complete: bool) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            version: checkpoint::CHECKPOINT_VERSION,
            stage: self.stage,
            epoch,
            step,
            complete,
            config: config_value(self.cfg)?,
            codebook: None,
            center: None,
            latent_stats: None,
            reseed_pool: Vec::new(),
            shapes: BTreeMap::new(),
        })
    }

    fn record(&mut self, r: EpochRecord) -> Result<()> {
        log::info!(
            "stage {} epoch {}: {}",
            r.stage,
            r.epoch,
            r.train.iter().chain(&r.val).map(|(k, v)| format!("{k}={v:.5}")).collect::<Vec<_>>().join(" ")
        );
        append_record(&self.metrics, &r)?;
        self.history.push(r);
        Ok(())
    }

    fn finish(self, complete: bool) -> StageOutcome {
        let checkpoint = if complete { self.dir.join("final") } else { self.dir.join("last") };
        StageOutcome { stage: self.stage, complete, checkpoint, metrics: self.metrics, history: self.history }
    }
}

fn with_optimizer(tensors: &mut BTreeMap<String, Tensor>, opt: &Adam) {
    insert_namespace(tensors, "optim", opt.state());
}

fn epochs_to_run(start: usize, total: usize, opts: &RunOptions) -> usize {
    let end = match opts.max_epochs_this_run {
        Some(n) => (start + n).min(total),
        None => total,
    };
    end.max(start)
}

/// Runs one stage. Stages must run in order: stage 2 needs a completed stage
/// 1, stage 3 a completed stage 2.
pub fn run_stage(stage: u8, cfg: &TrainConfig, data: &TrainData, run_dir: &Path, opts: &RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(ModelError::Validation("training split is empty".into()));
    }
    let device = Device::Cpu;
    if (1..=3).contains(&stage) {
        sync_data_info(run_dir, data, stage)?;
    }
    match stage {
        1 => stage1(cfg, data, run_dir, opts, &device),
        2 => stage2(cfg, data, run_dir, opts, &device),
        3 => stage3(cfg, data, run_dir, opts, &device),
        s => Err(ModelError::Config(format!("stage must be 1, 2 or 3, got {s}"))),
    }
}

/// Runs stages 1 to 3 in order.
pub fn run_all(cfg: &TrainConfig, data: &TrainData, run_dir: &Path) -> Result<Vec<StageOutcome>> {
    (1..=3).map(|s| run_stage(s, cfg, data, run_dir, &RunOptions::default())).collect()
}

fn stage1(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, opts: &RunOptions, device: &Device) -> Result<StageOutcome> {
    let dtype = cfg.precision.dtype();
    let mut run = StageRun::open(1, cfg, run_dir, opts, device)?;
    let mut ae = Autoencoder::new(&cfg.model, cfg.seed, dtype, device)?;
    let mut opt = Adam::new(ae.store.vars(), AdamConfig { lr: cfg.stage1.lr, ..cfg.adam })?;
    if let Some((meta, tensors)) = run.resume.take() {
        ae.load_tensors(&tensors)?;
        ae.load_host_state(meta.codebook.clone(), meta.center.clone())?;
        opt.load_state(&namespace(&tensors, "optim"), meta.step)?;
    }
    let denorm = Denormalizer::new(&data.normalization, dtype, device)?;
    let st = &cfg.stage1;
    let total = st.epochs * steps_per_epoch(data.train.len(), st);
    let teacher_vars = ae.teacher_store.vars();
    let dropout_seed = substream_seed(cfg.seed, "dropout", &[1]);
    let dcfg = cfg.model.distill.clone();
    let end = epochs_to_run(run.start_epoch, st.epochs, opts);
    for epoch in run.start_epoch..end {
        let started = Instant::now();
        let mut avg = Averages::default();
        let mut pool: Vec<Vec<f64>> = Vec::new();
        let mut lr = 0.0;
        for idx in epoch_batches(data.train.len(), st, cfg.seed, 1, epoch) {
            let step = opt.step;
            let mut rng = substream(cfg.seed, "step", &[1, step as u64]);
            let drop = DropoutRng::new(dropout_seed, step as u64);
            let ctx = Ctx::train(&drop);
            let items: Vec<&MotionItem> = idx.iter().map(|&i| &data.train[i].item).collect();
            let batch = ae.collate(&items)?;
            let post = ae.encode(&batch, ctx)?;
            let z = post.reparameterize(&mut rng)?;
            if let Some(q) = ae.quantizer.as_mut().filter(|q| !q.codebook.initialized) {
                let (zq, _) = crate::vae::split_latent(&z, cfg.model.vae.d_q)?;
                let rows = valid_rows(&zq, &batch.latent_lengths)?;
                q.init_from(&rows, &mut substream(cfg.seed, "codebook", &[]))?;
            }
            let lam = lambda_schedule(dcfg.lambda_peak, step, total);
            let mut teacher_mean = None;
            let dis = if lam > 0.0 {
                let k = if dcfg.subset == 0 { items.len() } else { dcfg.subset.min(items.len()) };
                let out = ae.distill(&items[..k], &mut rng, ctx)?;
                teacher_mean = Some(out.teacher_mean);
                Some(out.loss)
            } else {
                None
            };
            let (terms, ep) = ae.stage1_terms(&batch, &post, &z, dis, &denorm, ctx)?;
            let w = &cfg.weights;
            let weights = Stage1Weights { rec: w.rec, commit: w.commit, fk: w.fk_stage1, kl: w.kl, dis: lam };
            let loss = terms.composite(&weights)?;
            let lv = scalar(&loss)?;
            check_finite(lv, "stage-1 loss", step, &run.last())?;
            let grads = loss.backward()?;
            assert_frozen(&grads, &teacher_vars)?;
            lr = cosine_lr(st.lr, step, total);
            let stats = opt.step(&grads, lr)?;
            if let (Some(q), Some(out)) = (ae.quantizer.as_mut(), ep.quant.as_ref()) {
                let a = out.assignments();
                pool = a.iter().map(|(_, f)| f.clone()).collect();
                q.update(&a);
            }
            ema_update(&ae.teacher_store, &ae.store, &TEACHER_PREFIXES, dcfg.teacher_momentum)?;
            if let Some(m) = teacher_mean {
                update_center(&mut ae.center, &m, dcfg.center_momentum);
            }
            for (k, t) in [("rec", &terms.rec), ("commit", &terms.commit), ("fk", &terms.fk), ("kl", &terms.kl), ("dis", &terms.dis)] {
                avg.add(k, scalar(t)?);
            }
            avg.add("total", lv);
            avg.add("grad_norm", stats.grad_norm);
            avg.add("lambda_dis", lam);
        }
        let mut train = avg.means();
        if let Some(q) = ae.quantizer.as_mut() {
            let used = q.codebook.usage_count.iter().filter(|&&u| u > 0).count();
            let reseeded = q.reseed_dead(&pool, &mut substream(cfg.seed, "reseed", &[epoch as u64]));
            train.insert("codebook_used".into(), used as f64);
            train.insert("codebook_reseeded".into(), reseeded as f64);
        }
        let mut meta = run.meta(epoch + 1, opt.step, false)?;
        meta.codebook = ae.quantizer.as_ref().map(|q| q.codebook.clone());
        meta.center = Some(ae.center.clone());
        let mut tensors = ae.tensors()?;
        with_optimizer(&mut tensors, &opt);
        checkpoint::save(&run.last(), &meta, &tensors)?;
        let rec = EpochRecord {
            stage: 1,
            epoch: epoch + 1,
            step: opt.step,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            train,
            val: BTreeMap::new(),
        };
        run.record(rec)?;
    }
    finish_stage(
        run,
        end == st.epochs,
        |meta| {
            meta.codebook = ae.quantizer.as_ref().map(|q| q.codebook.clone());
            meta.center = Some(ae.center.clone());
            ae.tensors()
        },
        opt.step,
    )
}

fn finish_stage(
    run: StageRun,
    complete: bool,
    fill: impl FnOnce(&mut CheckpointMeta) -> Result<BTreeMap<String, Tensor>>,
    step: usize,
) -> Result<StageOutcome> {
    if complete {
        let epochs = run.cfg.stage(run.stage).epochs;
        let mut meta = run.meta(epochs, step, true)?;
        let tensors = fill(&mut meta)?;
        checkpoint::save(&run.dir.join("final"), &meta, &tensors)?;
    }
    Ok(run.finish(complete))
}

/// Rows `[d]` of `z: [B, n, d]` at valid positions.
fn valid_rows(z: &Tensor, lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
    let zv = z.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(zv.into_iter().zip(lengths).flat_map(|(rows, &n)| rows.into_iter().take(n)).collect())
}

fn stage2(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, opts: &RunOptions, device: &Device) -> Result<StageOutcome> {
    let dtype = cfg.precision.dtype();
    let (meta1, tensors1) = require_stage(run_dir, 1, device)?;
    let ae = load_autoencoder(&meta1, &tensors1, cfg, device)?;
    let mut run = StageRun::open(2, cfg, run_dir, opts, device)?;
    let mut opt = Adam::new(ae.store.vars_with_prefix(&["dec."]), AdamConfig { lr: cfg.stage2.lr, ..cfg.adam })?;
    if let Some((meta, tensors)) = run.resume.take() {
        ae.load_tensors(&tensors)?;
        opt.load_state(&namespace(&tensors, "optim"), meta.step)?;
    }
    let frozen: Vec<(String, Var)> = ae.store.vars().into_iter().filter(|(k, _)| !k.starts_with("dec.")).collect();
    let denorm = Denormalizer::new(&data.normalization, dtype, device)?;
    let st = &cfg.stage2;
    let total = st.epochs * steps_per_epoch(data.train.len(), st);
    let dropout_seed = substream_seed(cfg.seed, "dropout", &[2]);
    let w = cfg.weights;
    let end = epochs_to_run(run.start_epoch, st.epochs, opts);
    for epoch in run.start_epoch..end {
        let started = Instant::now();
        let mut avg = Averages::default();
        let mut lr = 0.0;
        for idx in epoch_batches(data.train.len(), st, cfg.seed, 2, epoch) {
            let step = opt.step;
            let drop = DropoutRng::new(dropout_seed, step as u64);
            let items: Vec<&MotionItem> = idx.iter().map(|&i| &data.train[i].item).collect();
            let batch = ae.collate(&items)?;
            // The frozen encoder path is evaluated without a graph.
            let z_gt = ae.mean_endpoint(&batch)?.detach();
            let recon = ae.decode(&z_gt, &batch, Ctx::train(&drop))?;
            let rec = masked_mse(&recon, &batch.x, &batch.frame_mask)?;
            let kin = kinematic_terms(&denorm.apply(&recon)?, &denorm.apply(&batch.x)?, &batch.frame_mask)?;
            let loss = ((((((&rec * w.rec)? + (&kin.vel * w.vel)?)? + (&kin.acc * w.acc)?)? + (&kin.jerk * w.jerk)?)?
                + (&kin.global * w.global)?)?
                + (&kin.fk * w.fk_stage2)?)?;
            let lv = scalar(&loss)?;
            check_finite(lv, "stage-2 loss", step, &run.last())?;
            let grads = loss.backward()?;
            assert_frozen(&grads, &frozen)?;
            lr = cosine_lr(st.lr, step, total);
            let stats = opt.step(&grads, lr)?;
            for (k, t) in
                [("rec", &rec), ("vel", &kin.vel), ("acc", &kin.acc), ("jerk", &kin.jerk), ("global", &kin.global), ("fk", &kin.fk)]
            {
                avg.add(k, scalar(t)?);
            }
            avg.add("total", lv);
            avg.add("grad_norm", stats.grad_norm);
        }
        let mut meta = run.meta(epoch + 1, opt.step, false)?;
        meta.codebook = ae.quantizer.as_ref().map(|q| q.codebook.clone());
        meta.center = Some(ae.center.clone());
        let mut tensors = ae.tensors()?;
        with_optimizer(&mut tensors, &opt);
        checkpoint::save(&run.last(), &meta, &tensors)?;
        let rec = EpochRecord {
            stage: 2,
            epoch: epoch + 1,
            step: opt.step,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            train: avg.means(),
            val: BTreeMap::new(),
        };
        run.record(rec)?;
    }
    finish_stage(
        run,
        end == st.epochs,
        |meta| {
            meta.codebook = ae.quantizer.as_ref().map(|q| q.codebook.clone());
            meta.center = Some(ae.center.clone());
            ae.tensors()
        },
        opt.step,
    )
}

/// Endpoints of a set of sequences, one `n_i × d` host array each.
pub fn endpoints(ae: &Autoencoder, items: &[&MotionItem], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = ae.collate(chunk)?;
        let z = ae.mean_endpoint(&batch)?;
        let d = z.dim(2)?;
        for (rows, &n) in z.to_dtype(DType::F64)?.to_vec3::<f64>()?.into_iter().zip(&batch.latent_lengths) {
            let flat: Vec<f64> = rows.into_iter().take(n).flatten().collect();
            debug_assert_eq!(flat.len(), n * d);
            out.push(flat);
        }
    }
    Ok(out)
}

/// Pads host latents into `[B, n_pad, d]` plus a `[B, n_pad]` mask.
pub fn pad_latents(latents: &[&[f64]], d: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let n_pad = latents.iter().map(|z| z.len() / d).max().unwrap_or(0);
    if n_pad == 0 {
        return Err(ModelError::Validation("empty latent batch".into()));
    }
    let b = latents.len();
    let mut z = vec![0.0; b * n_pad * d];
    let mut m = vec![0.0; b * n_pad];
    for (i, l) in latents.iter().enumerate() {
        z[i * n_pad * d..i * n_pad * d + l.len()].copy_from_slice(l);
        m[i * n_pad..i * n_pad + l.len() / d].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok((Tensor::from_vec(z, (b, n_pad, d), device)?.to_dtype(dtype)?, Tensor::from_vec(m, (b, n_pad), device)?.to_dtype(dtype)?))
}

fn normalize_host(stats: &LatentStats, z: &[f64]) -> Vec<f64> {
    let d = stats.mean.len();
    z.iter().enumerate().map(|(i, v)| (v - stats.mean[i % d]) / stats.std[i % d]).collect()
}

fn gaussian(shape: &[usize], rng: &mut motionflow_core::rng::Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Caption batch with the rows where `keep` is false turned into null
/// captions (all tokens masked).
fn captions_with_drop(captions: &[&str], keep: &[bool], vocab: &Vocabulary, dtype: DType, device: &Device) -> Result<TextBatch> {
    let tb = collate_text(captions, vocab, dtype, device)?;
    let k: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let k = Tensor::from_vec(k, (keep.len(), 1), device)?.to_dtype(dtype)?;
    Ok(TextBatch { ids: tb.ids, mask: tb.mask.broadcast_mul(&k)? })
}

/// Flow-matching loss on a fixed set with fixed noise and times, plus the
/// loss of the zero predictor (`E‖u‖²`) on the same draws.
struct Validation {
    z1: Tensor,
    mask: Tensor,
    z0: Tensor,
    t: Vec<f64>,
    text: TextBatch,
}

impl Validation {
    fn new(
        latents: &[Vec<f64>],
        captions: &[&str],
        d: usize,
        seed: u64,
        vocab: &Vocabulary,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let refs: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
        let (z1, mask) = pad_latents(&refs, d, dtype, device)?;
        let mut rng = substream(seed, "val", &[]);
        let z0 = gaussian(z1.dims(), &mut rng, dtype, device)?;
        let t = (0..latents.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let text = collate_text(captions, vocab, dtype, device)?;
        Ok(Self { z1, mask, z0, t, text })
    }

    fn losses(&self, head: &FlowHead) -> Result<(f64, f64)> {
        let zt = interpolate(&self.z0, &self.z1, &self.t)?;
        let u = velocity_target(&self.z0, &self.z1)?;
        let cond = head.encode_caption(&self.text, Ctx::eval())?;
        let v = head.forward(&zt, &self.t, &cond, &self.mask, None, Ctx::eval())?;
        Ok((scalar(&fm_loss(&v, &u, &self.mask)?)?, scalar(&fm_loss(&u.zeros_like()?, &u, &self.mask)?)?))
    }
}

pub const FLOW_PREFIX: &str = "flow.";

/// Builds the flow head and its parameter store for a configuration.
pub fn build_flow(cfg: &TrainConfig, vocab: &Vocabulary, device: &Device) -> Result<(ParamStore, FlowHead)> {
    let store = ParamStore::new(substream_seed(cfg.seed, "init", &[3]), cfg.precision.dtype(), device);
    let head = FlowHead::new(&store.scope("flow"), &cfg.flow, cfg.model.vae.d_total, vocab.len())?;
    Ok((store, head))
}

fn stage3(cfg: &TrainConfig, data: &TrainData, run_dir: &Path, opts: &RunOptions, device: &Device) -> Result<StageOutcome> {
    let dtype = cfg.precision.dtype();
    let (meta2, tensors2) = require_stage(run_dir, 2, device)?;
    let ae = load_autoencoder(&meta2, &tensors2, cfg, device)?;
    let frozen = ae.store.vars();
    let d = cfg.model.vae.d_total;
    let vocab = Vocabulary::desk();

    // Endpoints are fixed during this stage: compute and standardize once.
    let train_items: Vec<&MotionItem> = data.train.iter().map(|s| &s.item).collect();
    let raw = endpoints(&ae, &train_items, 64)?;
    let stats = {
        let refs: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
        let (z, m) = pad_latents(&refs, d, DType::F64, device)?;
        LatentStats::fit(&[(z, m)])?
    };
    let z1_all: Vec<Vec<f64>> = raw.iter().map(|z| normalize_host(&stats, z)).collect();
    let val_src: Vec<&Sample> = if data.test.is_empty() { data.train.iter().collect() } else { data.test.iter().collect() };
    let val_src = &val_src[..cfg.val_size.clamp(1, val_src.len())];
    let val_items: Vec<&MotionItem> = val_src.iter().map(|s| &s.item).collect();
    let val_latents: Vec<Vec<f64>> = endpoints(&ae, &val_items, 64)?.iter().map(|z| normalize_host(&stats, z)).collect();
    let val_captions: Vec<&str> = val_src.iter().map(|s| s.caption.as_str()).collect();
    let val = Validation::new(&val_latents, &val_captions, d, cfg.seed, &vocab, dtype, device)?;

    let (store, head) = build_flow(cfg, &vocab, device)?;
    let mut run = StageRun::open(3, cfg, run_dir, opts, device)?;
    let mut opt = Adam::new(store.vars(), AdamConfig { lr: cfg.stage3.lr, ..cfg.adam })?;
    if let Some((meta, tensors)) = run.resume.take() {
        store.load_values(&namespace(&tensors, "flow"), &[""])?;
        opt.load_state(&namespace(&tensors, "optim"), meta.step)?;
    }
    let (_, baseline) = val.losses(&head)?;
    let st = &cfg.stage3;
    let total = st.epochs * steps_per_epoch(data.train.len(), st);
    let dropout_seed = substream_seed(cfg.seed, "dropout", &[3]);
    let end = epochs_to_run(run.start_epoch, st.epochs, opts);
    for epoch in run.start_epoch..end {
        let started = Instant::now();
        let mut avg = Averages::default();
        let mut lr = 0.0;
        for idx in epoch_batches(data.train.len(), st, cfg.seed, 3, epoch) {
            let step = opt.step;
            let mut rng = substream(cfg.seed, "step", &[3, step as u64]);
            let drop = DropoutRng::new(dropout_seed, step as u64);
            let ctx = Ctx::train(&drop);
            let refs: Vec<&[f64]> = idx.iter().map(|&i| z1_all[i].as_slice()).collect();
            let (z1, mask) = pad_latents(&refs, d, dtype, device)?;
            let keep: Vec<bool> = idx.iter().map(|_| rng.random_range(0.0..1.0) >= cfg.cfg_drop).collect();
            let captions: Vec<&str> = idx.iter().map(|&i| data.train[i].caption.as_str()).collect();
            let text = captions_with_drop(&captions, &keep, &vocab, dtype, device)?;
            let z0 = gaussian(z1.dims(), &mut rng, dtype, device)?;
            let t: Vec<f64> = idx.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let zt = interpolate(&z0, &z1, &t)?;
            let u = velocity_target(&z0, &z1)?;
            let cond = head.encode_caption(&text, ctx)?;
            let v = head.forward(&zt, &t, &cond, &mask, None, ctx)?;
            let loss = fm_loss(&v, &u, &mask)?;
            let lv = scalar(&loss)?;
            check_finite(lv, "flow loss", step, &run.last())?;
            let grads = loss.backward()?;
            assert_frozen(&grads, &frozen)?;
            lr = cosine_lr(st.lr, step, total);
            let stats = opt.step(&grads, lr)?;
            avg.add("fm", lv);
            avg.add("grad_norm", stats.grad_norm);
        }
        let (val_fm, _) = val.losses(&head)?;
        let vals = BTreeMap::from([("fm".to_string(), val_fm), ("baseline".to_string(), baseline)]);
        let mut meta = run.meta(epoch + 1, opt.step, false)?;
        meta.latent_stats = Some(stats.clone());
        let mut tensors = BTreeMap::new();
        insert_namespace(&mut tensors, "flow", store.snapshot()?);
        with_optimizer(&mut tensors, &opt);
        checkpoint::save(&run.last(), &meta, &tensors)?;
        let rec = EpochRecord {
            stage: 3,
            epoch: epoch + 1,
            step: opt.step,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            train: avg.means(),
            val: vals,
        };
        run.record(rec)?;
    }
    finish_stage(
        run,
        end == st.epochs,
        |meta| {
            meta.latent_stats = Some(stats.clone());
            let mut tensors = BTreeMap::new();
            insert_namespace(&mut tensors, "flow", store.snapshot()?);
            Ok(tensors)
        },
        opt.step,
    )
}
