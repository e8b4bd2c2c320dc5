//! Experiment configuration and the two training loops: DDPM pretraining on
//! clean shapes, and restoration training with or without DiffLoss.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::{self, CheckpointManifest};
use crate::denoiser::{Denoiser, DenoiserConfig, FrozenDenoiser};
use crate::diffloss::{compute_pixel_only, compute_total_loss, DiffLossConfig, Variant};
use crate::diffusion::{NoiseSchedule, ScheduleDescriptor, Timesteps};
use crate::error::{ensure_config, CheckpointError, Error, Result};
use crate::hspace::PerturbSpec;
use crate::image::{Image, ImageBatch};
use crate::metrics::{csv_error, evaluate_images, mean_psnr, ssim, write_rows_csv, EvalReference, MetricReport, ProbeConfig};
use crate::nn::{Adam, AdamConfig};
use crate::restorer::{Restorer, RestorerConfig};
use crate::rng::{randn, set_global_seed, streams, Rng, SeedBundle, StreamState};
use crate::synthdata::{generate_shapes, DegradationSpec, PairedDataset, ShapesDatasetSpec, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer")]
    pub name: OptimizerName,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
}

fn default_optimizer() -> OptimizerName {
    OptimizerName::Adam
}
fn default_lr() -> f64 {
    1e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: default_optimizer(),
            lr: default_lr(),
            betas: default_betas(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            ..AdamConfig::default()
        }
    }
}

/// Settings only the DDPM pretraining phase reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleDescriptor,
    /// Validation images used for the held-out noise-prediction loss.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Save a resumable checkpoint every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stop once the held-out loss falls below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
}

fn default_held_out() -> usize {
    256
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleDescriptor::default(),
            held_out: default_held_out(),
            checkpoint_every: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Clean training images for the probe.
    #[serde(default = "default_probe_train")]
    pub probe_train: usize,
    /// Reuse a trained probe instead of training one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_ckpt: Option<PathBuf>,
}

fn default_n_test() -> usize {
    256
}
fn default_probe_train() -> usize {
    2000
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_test: default_n_test(),
            probe: ProbeConfig::default(),
            probe_train: default_probe_train(),
            probe_ckpt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HspaceSection {
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_hspace_images")]
    pub n_images: usize,
    /// Restorer checkpoints for the two restored conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restorer_with: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restorer_without: Option<PathBuf>,
}

fn default_t0() -> f64 {
    0.5
}
fn default_deltas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}
fn default_hspace_images() -> usize {
    64
}

impl HspaceSection {
    pub fn perturb_spec(&self, fallback_seed: u64) -> PerturbSpec {
        PerturbSpec {
            t0: self.t0,
            deltas: self.deltas.clone(),
            seed: self.seed.unwrap_or(fallback_seed),
            ..PerturbSpec::new(0)
        }
    }
}

impl Default for HspaceSection {
    fn default() -> Self {
        Self {
            t0: default_t0(),
            deltas: default_deltas(),
            seed: None,
            n_images: default_hspace_images(),
            restorer_with: None,
            restorer_without: None,
        }
    }
}

/// One experiment. Sections a command does not need may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: ShapesDatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
    #[serde(default = "RestorerConfig::efficient")]
    pub restorer: RestorerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser_ckpt: Option<PathBuf>,
    /// Absent means the loss is disabled (pure L2 training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffloss: Option<DiffLossConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Validation cadence in steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hspace: Option<HspaceSection>,
}

fn default_batch() -> usize {
    16
}
fn default_max_steps() -> usize {
    5000
}

impl ExperimentConfig {
    /// Minimal restoration experiment on low-light shapes.
    pub fn desk(run_id: &str, seed: u64) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            out_dir: None,
            dataset: ShapesDatasetSpec {
                n_images: 2000,
                resolution: 32,
                n_classes: 8,
                seed,
                split: Split::Train,
            },
            degradation: Some(DegradationSpec::new(
                crate::synthdata::Degradation::default_for("lowlight").expect("known kind"),
                seed,
            )),
            restorer: RestorerConfig::efficient(),
            denoiser_ckpt: None,
            diffloss: None,
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            patch_size: None,
            max_steps: default_max_steps(),
            eval_every: 0,
            pretrain: None,
            eval: EvalSection::default(),
            hspace: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(!self.run_id.is_empty(), "run_id must not be empty");
        ensure_config!(
            self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
            "run_id `{}` may only contain letters, digits, `-`, `_` and `.`",
            self.run_id
        );
        self.dataset.validate()?;
        self.restorer.validate()?;
        ensure_config!(self.batch_size >= 1, "batch_size must be positive");
        ensure_config!(self.max_steps >= 1, "max_steps must be positive");
        ensure_config!(self.eval.n_test >= 2, "eval.n_test must be at least 2");
        self.optimizer.adam().validate()?;
        if let Some(p) = self.patch_size {
            ensure_config!(
                p >= 1 && p <= self.dataset.resolution,
                "patch_size {p} must lie in [1, {}]",
                self.dataset.resolution
            );
        }
        if let Some(h) = &self.hspace {
            h.perturb_spec(self.seed).validate()?;
        }
        Ok(())
    }

    pub fn bundle(&self) -> SeedBundle {
        set_global_seed(self.seed)
    }

    pub fn test_spec(&self) -> ShapesDatasetSpec {
        self.dataset.with_split(Split::Test, self.eval.n_test)
    }

    pub fn degradation(&self) -> Result<DegradationSpec> {
        self.degradation
            .ok_or_else(|| Error::Config("a [degradation] section is required for restoration".into()))
    }
}

/// Append-only CSV log. The header is written only when the file is new.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Where a training loop writes. Any field may be left out.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub log: Option<PathBuf>,
    pub eval_log: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: Some(dir.join("logs").join("train.csv")),
            eval_log: Some(dir.join("logs").join("eval.csv")),
            checkpoints: Some(dir.join("checkpoints")),
            resume: None,
        }
    }

    fn open(path: &Option<PathBuf>) -> Result<Option<CsvLog>> {
        path.as_deref().map(CsvLog::append).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub held_out: Option<f64>,
    pub wallclock: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub denoiser: Denoiser,
    pub schedule: ScheduleDescriptor,
    pub steps: usize,
    pub initial_held_out: Option<f64>,
    pub final_held_out: f64,
    pub reached_target: bool,
    pub rows: Vec<PretrainRow>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Fixed `(x_t, t, eps)` triples over the validation split, so the held-out
/// loss is a deterministic function of the parameters.
struct HeldOut {
    x_t: Tensor,
    t: Vec<usize>,
    eps: Tensor,
}

const HELD_OUT_DRAWS: usize = 2;

impl HeldOut {
    fn new(images: &[Image], schedule: &NoiseSchedule, bundle: &SeedBundle) -> Result<Self> {
        let x0 = ImageBatch::from_images(images)?.to_symmetric().into_tensor().to_kind(Kind::Float);
        let x0 = x0.repeat([HELD_OUT_DRAWS as i64, 1, 1, 1]);
        let mut rng = bundle.stream(streams::EVAL);
        let n = x0.size()[0] as usize;
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps = randn(&mut rng, &x0.size(), Kind::Float);
        let x_t = schedule.forward_diffuse(&x0, &eps, Timesteps::PerSample(t.clone()))?;
        Ok(Self { x_t, t, eps })
    }

    fn loss(&self, denoiser: &Denoiser) -> Result<f64> {
        let n = self.t.len() as i64;
        let chunk = 256;
        let mut total = 0.0;
        tch::no_grad(|| -> Result<()> {
            for s in (0..n).step_by(chunk) {
                let len = (chunk as i64).min(n - s);
                let ts = Timesteps::PerSample(self.t[s as usize..(s + len) as usize].to_vec());
                let out = denoiser.denoise_with_h(&self.x_t.narrow(0, s, len), &ts)?;
                let err = (self.eps.narrow(0, s, len) - out.eps_hat).abs().sum(Kind::Double);
                total += err.double_value(&[]);
            }
            Ok(())
        })?;
        Ok(total / self.eps.numel() as f64)
    }
}

struct PretrainRngs {
    order: Rng,
    timestep: Rng,
    noise: Rng,
}

impl PretrainRngs {
    fn fresh(bundle: &SeedBundle) -> Self {
        Self {
            order: bundle.stream(streams::DATA_ORDER),
            timestep: bundle.stream(streams::TIMESTEP),
            noise: bundle.stream(streams::NOISE),
        }
    }

    fn save(&self, m: &mut CheckpointManifest) {
        for (k, r) in [("data_order", &self.order), ("timestep", &self.timestep), ("noise", &self.noise)] {
            m.rng_state.insert(k.into(), StreamState::capture(r).encode());
        }
    }

    fn restore(m: &CheckpointManifest, bundle: &SeedBundle, path: &Path) -> Result<Self> {
        let get = |k: &str| -> Result<Rng> {
            m.rng_state
                .get(k)
                .and_then(|s| StreamState::decode(s))
                .map(|s| s.restore(bundle))
                .ok_or_else(|| {
                    CheckpointError::Corrupt {
                        path: path.to_path_buf(),
                        reason: format!("missing rng state `{k}`"),
                    }
                    .into()
                })
        };
        Ok(Self {
            order: get("data_order")?,
            timestep: get("timestep")?,
            noise: get("noise")?,
        })
    }
}

fn save_pretrain_checkpoint(
    dir: &Path,
    denoiser: &Denoiser,
    opt: &Adam,
    rngs: &PretrainRngs,
    schedule: ScheduleDescriptor,
    seed: u64,
    held_out: Option<f64>,
) -> Result<()> {
    let mut m = denoiser.manifest(schedule, opt.steps_taken(), seed)?;
    rngs.save(&mut m);
    m.has_optimizer_state = true;
    if let Some(h) = held_out {
        m.metrics.insert("held_out_loss".into(), h);
    }
    let mut tensors = denoiser.named_tensors();
    tensors.extend(opt.state_tensors());
    checkpoint::save(dir, &m, &tensors)
}

/// Trains the toy DDPM on the clean split with uniformly sampled per-sample
/// timesteps and the L1 noise-prediction loss.
pub fn pretrain_ddpm(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pre = cfg.pretrain.clone().unwrap_or_default();
    ensure_config!(
        pre.denoiser.resolution as usize == cfg.dataset.resolution,
        "pretrain.denoiser.resolution {} differs from dataset.resolution {}",
        pre.denoiser.resolution,
        cfg.dataset.resolution
    );
    ensure_config!(pre.held_out >= 1, "pretrain.held_out must be positive");
    let schedule = pre.schedule.build()?;
    let bundle = cfg.bundle();
    let adam = cfg.optimizer.adam();

    let train = generate_shapes(&cfg.dataset)?;
    let val = generate_shapes(&cfg.dataset.with_split(Split::Val, pre.held_out))?;
    let x_train = ImageBatch::from_images(&train.images)?
        .to_symmetric()
        .into_tensor()
        .to_kind(Kind::Float);
    let held = HeldOut::new(&val.images, &schedule, &bundle)?;

    let (denoiser, mut opt, mut rngs) = match &paths.resume {
        Some(path) => {
            let (d, loaded) = Denoiser::load_checkpoint(path, Some(&pre.denoiser))?;
            let m = &loaded.manifest;
            if m.seed != cfg.seed {
                return Err(CheckpointError::ConfigMismatch {
                    key: "seed".into(),
                    found: m.seed.to_string(),
                    expected: cfg.seed.to_string(),
                }
                .into());
            }
            if m.schedule != Some(pre.schedule) {
                return Err(CheckpointError::ConfigMismatch {
                    key: "schedule".into(),
                    found: format!("{:?}", m.schedule),
                    expected: format!("{:?}", pre.schedule),
                }
                .into());
            }
            let mut opt = Adam::new(d.var_store(), adam);
            opt.load_state(m.training_steps, &loaded.tensors)?;
            let rngs = PretrainRngs::restore(m, &bundle, path)?;
            (d, opt, rngs)
        }
        None => {
            let d = Denoiser::new(pre.denoiser, &mut bundle.stream(streams::INIT))?;
            let opt = Adam::new(d.var_store(), adam);
            (d, opt, PretrainRngs::fresh(&bundle))
        }
    };

    let mut log = RunPaths::open(&paths.log)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut push = |row: PretrainRow, log: &mut Option<CsvLog>| -> Result<()> {
        if let Some(l) = log {
            l.write(&row)?;
        }
        rows.push(row);
        Ok(())
    };

    let first = opt.steps_taken() as usize;
    let mut initial_held_out = None;
    let mut last_held_out = None;
    if first == 0 {
        let h = held.loss(&denoiser)?;
        initial_held_out = Some(h);
        last_held_out = Some(h);
        push(
            PretrainRow {
                step: 0,
                loss: None,
                lr: adam.lr,
                held_out: Some(h),
                wallclock: 0.0,
            },
            &mut log,
        )?;
    }

    let n_train = train.len();
    let mut reached_target = false;
    let mut step = first;
    while step < cfg.max_steps {
        let idx: Vec<i64> = (0..cfg.batch_size)
            .map(|_| rngs.order.gen_range(0..n_train) as i64)
            .collect();
        let x0 = x_train.index_select(0, &Tensor::from_slice(&idx));
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rngs.timestep.gen_range(1..=schedule.steps()))
            .collect();
        let eps = randn(&mut rngs.noise, &x0.size(), Kind::Float);
        let loss = schedule.ddpm_loss(&denoiser, &x0, Timesteps::PerSample(ts), &eps)?;
        let value = loss.double_value(&[]);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("DDPM loss became non-finite ({value}) at step {step}")));
        }
        opt.backward_step(&loss);
        step += 1;

        let eval_now = step == cfg.max_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let held_value = if eval_now { Some(held.loss(&denoiser)?) } else { None };
        if held_value.is_some() {
            last_held_out = held_value;
        }
        push(
            PretrainRow {
                step,
                loss: Some(value),
                lr: adam.lr,
                held_out: held_value,
                wallclock: start.elapsed().as_secs_f64(),
            },
            &mut log,
        )?;
        if let (Some(dir), true) = (&paths.checkpoints, pre.checkpoint_every > 0 && step % pre.checkpoint_every == 0) {
            save_pretrain_checkpoint(
                &dir.join(format!("step-{step}")),
                &denoiser,
                &opt,
                &rngs,
                pre.schedule,
                cfg.seed,
                held_value,
            )?;
        }
        if let (Some(target), Some(h)) = (pre.target_loss, held_value) {
            if h < target {
                reached_target = true;
                log::info!("held-out loss {h:.4} below target {target} after {step} steps");
                break;
            }
        }
    }

    let final_held_out = match last_held_out {
        Some(h) if rows.last().is_some_and(|r| r.held_out.is_some()) => h,
        _ => held.loss(&denoiser)?,
    };
    let final_checkpoint = match &paths.checkpoints {
        Some(dir) => {
            let path = dir.join("final");
            save_pretrain_checkpoint(&path, &denoiser, &opt, &rngs, pre.schedule, cfg.seed, Some(final_held_out))?;
            Some(path)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        denoiser,
        schedule: pre.schedule,
        steps: step,
        initial_held_out,
        final_held_out,
        reached_target,
        rows,
        final_checkpoint,
    })
}

/// Loads a pretrained denoiser for use as a frozen loss network, together
/// with the schedule it was trained under.
pub fn load_prior(path: &Path) -> Result<(FrozenDenoiser, NoiseSchedule)> {
    let (d, loaded) = FrozenDenoiser::load(path, None)?;
    let desc = loaded.manifest.schedule.ok_or_else(|| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason: "denoiser checkpoint lacks a schedule".into(),
    })?;
    Ok((d, desc.build()?))
}

/// Frozen denoiser plus schedule, borrowed by restoration training.
#[derive(Clone, Copy)]
pub struct DiffusionPrior<'a> {
    pub denoiser: &'a FrozenDenoiser,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l_pix: f64,
    pub l_nat: f64,
    pub l_sem: f64,
    pub l_diff: f64,
    pub l_total: f64,
    pub t_used: Option<usize>,
    pub wallclock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug)]
pub struct RestorationOutcome {
    pub restorer: Restorer,
    pub rows: Vec<LossRow>,
    pub eval_rows: Vec<EvalRow>,
    /// Restorer checksum right after initialisation.
    pub init_checksum: String,
    /// Denoiser checksum before and after training, when one was used.
    pub denoiser_checksums: Option<(String, String)>,
    pub final_checkpoint: Option<PathBuf>,
}

const VAL_IMAGES: usize = 64;

/// Trains a restorer on degraded/clean pairs. With `cfg.diffloss` unset the
/// objective is plain L2; otherwise DiffLoss through `prior` is added.
pub fn train_restoration(
    cfg: &ExperimentConfig,
    prior: Option<DiffusionPrior<'_>>,
    paths: &RunPaths,
) -> Result<RestorationOutcome> {
    cfg.validate()?;
    let degradation = cfg.degradation()?;
    let loss_cfg = match (&cfg.diffloss, prior) {
        (Some(dl), Some(p)) => {
            dl.validate(p.schedule)?;
            Some((dl, p))
        }
        (Some(_), None) => {
            return Err(Error::Config(
                "diffloss is enabled but no denoiser checkpoint was provided (set denoiser_ckpt)".into(),
            ))
        }
        (None, _) => None,
    };
    let bundle = cfg.bundle();
    let train = PairedDataset::from_clean(&generate_shapes(&cfg.dataset)?, &degradation);
    let val = PairedDataset::from_clean(
        &generate_shapes(&cfg.dataset.with_split(Split::Val, VAL_IMAGES))?,
        &degradation,
    );
    let restorer = Restorer::new(cfg.restorer, &mut bundle.stream(streams::INIT))?;
    let init_checksum = restorer.checksum();
    let denoiser_before = prior.map(|p| p.denoiser.checksum());
    let mut opt = Adam::new(restorer.var_store(), cfg.optimizer.adam());
    let mut stream = train.stream(
        cfg.batch_size,
        cfg.patch_size,
        bundle.stream(streams::DATA_ORDER),
        bundle.stream(streams::CROP),
    );
    let mut loss_rng = bundle.stream(streams::NOISE);
    let mut log = RunPaths::open(&paths.log)?;
    let mut eval_log = RunPaths::open(&paths.eval_log)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.max_steps);
    let mut eval_rows = Vec::new();

    for step in 0..cfg.max_steps {
        let batch = stream.next_batch()?;
        let z = restorer.restore(&batch.degraded)?;
        let loss = match loss_cfg {
            Some((dl, p)) => compute_total_loss(&batch.clean, &z, p.denoiser, p.schedule, dl, &mut loss_rng)?,
            None => compute_pixel_only(&batch.clean, &z)?,
        };
        let r = loss.report;
        if !r.l_total.is_finite() {
            return Err(Error::Numeric(format!("restoration loss became non-finite at step {step}: {r:?}")));
        }
        opt.backward_step(&loss.total);
        let row = LossRow {
            step,
            l_pix: r.l_pix,
            l_nat: r.l_nat,
            l_sem: r.l_sem,
            l_diff: r.l_diff,
            l_total: r.l_total,
            t_used: r.t_used,
            wallclock: start.elapsed().as_secs_f64(),
        };
        if let Some(l) = &mut log {
            l.write(&row)?;
        }
        rows.push(row);

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.max_steps {
            let e = validation(&restorer, &val, done)?;
            if let Some(l) = &mut eval_log {
                l.write(&e)?;
            }
            eval_rows.push(e);
            if let Some(dir) = &paths.checkpoints {
                restorer.save_checkpoint(&dir.join(format!("step-{done}")), done as u64, cfg.seed)?;
            }
        }
    }
    let e = validation(&restorer, &val, cfg.max_steps)?;
    if let Some(l) = &mut eval_log {
        l.write(&e)?;
    }
    eval_rows.push(e);

    let final_checkpoint = match &paths.checkpoints {
        Some(dir) => {
            let path = dir.join("final");
            restorer.save_checkpoint(&path, cfg.max_steps as u64, cfg.seed)?;
            Some(path)
        }
        None => None,
    };
    let denoiser_checksums = match (denoiser_before, prior) {
        (Some(before), Some(p)) => Some((before, p.denoiser.checksum())),
        _ => None,
    };
    Ok(RestorationOutcome {
        restorer,
        rows,
        eval_rows,
        init_checksum,
        denoiser_checksums,
        final_checkpoint,
    })
}

fn validation(restorer: &Restorer, val: &PairedDataset, step: usize) -> Result<EvalRow> {
    let z = restore_images(restorer, &val.degraded)?;
    let x = ImageBatch::from_images(&val.clean)?;
    Ok(EvalRow {
        step,
        psnr_db: mean_psnr(&z, &x)?,
        ssim: ssim(&z, &x)?,
    })
}

/// Runs the restorer over `images` in inference mode.
pub fn restore_images(restorer: &Restorer, images: &[Image]) -> Result<ImageBatch> {
    let y = ImageBatch::from_images(images)?;
    let n = y.len() as i64;
    let chunk = 128;
    let parts = tch::no_grad(|| -> Result<Vec<Tensor>> {
        (0..n)
            .step_by(chunk)
            .map(|s| Ok(restorer.restore(&y.narrow(s, (chunk as i64).min(n - s)))?.into_tensor()))
            .collect()
    })?;
    ImageBatch::unit(Tensor::cat(&parts, 0))
}

/// Scores a restorer on degraded/clean test pairs.
pub fn evaluate_restorer(restorer: &Restorer, test: &PairedDataset, reference: &EvalReference<'_>) -> Result<MetricReport> {
    let z = restore_images(restorer, &test.degraded)?;
    let x = ImageBatch::from_images(&test.clean)?;
    evaluate_images(&z, &x, &test.labels, reference)
}

/// Lower edge and upper edge of the loss-weight band reported as best.
pub const REFERENCE_GAMMA_BAND: (f64, f64) = (0.0005, 0.005);
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.0005, 0.001, 0.005, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub desk_fid: f64,
    pub top1: f64,
    pub in_reference_band: bool,
}

/// One restoration run per loss weight, all from the same seed.
pub fn weight_sweep(
    cfg: &ExperimentConfig,
    gammas: &[f64],
    prior: DiffusionPrior<'_>,
    test: &PairedDataset,
    reference: &EvalReference<'_>,
) -> Result<Vec<SweepRow>> {
    ensure_config!(!gammas.is_empty(), "sweep needs at least one gamma");
    let base = cfg.diffloss.unwrap_or_default();
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let run = ExperimentConfig {
            diffloss: Some(DiffLossConfig { gamma, ..base }),
            ..cfg.clone()
        };
        let out = train_restoration(&run, Some(prior), &RunPaths::default())?;
        let m = evaluate_restorer(&out.restorer, test, reference)?;
        log::info!("gamma {gamma}: psnr {:.3} dB, desk-fid {:.4}", m.psnr_db, m.desk_fid);
        rows.push(SweepRow {
            gamma,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            desk_fid: m.desk_fid,
            top1: m.top1,
            in_reference_band: (REFERENCE_GAMMA_BAND.0..=REFERENCE_GAMMA_BAND.1).contains(&gamma),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub desk_fid: f64,
    pub top1: f64,
    /// Rank by desk-FID here (1 = lowest).
    pub desk_rank: usize,
    /// Full-scale reference FID for the same constraint.
    pub reference_fid: f64,
    pub reference_rank: usize,
}

fn reference_ablation(v: Variant) -> (f64, usize) {
    match v {
        Variant::Epsilon => (293.01, 1),
        Variant::XPrev => (343.31, 2),
        Variant::X0 => (429.73, 3),
    }
}

/// Trains one restorer per constraint variant and tabulates the results.
/// The full-scale reference ordering is carried along for comparison only.
pub fn variant_ablation(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    prior: DiffusionPrior<'_>,
    test: &PairedDataset,
    reference: &EvalReference<'_>,
) -> Result<Vec<AblationRow>> {
    let base = cfg.diffloss.unwrap_or_default();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let run = ExperimentConfig {
            diffloss: Some(DiffLossConfig { variant, ..base }),
            ..cfg.clone()
        };
        let out = train_restoration(&run, Some(prior), &RunPaths::default())?;
        let m = evaluate_restorer(&out.restorer, test, reference)?;
        let (reference_fid, reference_rank) = reference_ablation(variant);
        rows.push(AblationRow {
            variant: variant.as_str().to_string(),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            desk_fid: m.desk_fid,
            top1: m.top1,
            desk_rank: 0,
            reference_fid,
            reference_rank,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].desk_fid.total_cmp(&rows[b].desk_fid));
    for (rank, i) in order.into_iter().enumerate() {
        rows[i].desk_rank = rank + 1;
    }
    Ok(rows)
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_rows_csv(path, rows)
}
