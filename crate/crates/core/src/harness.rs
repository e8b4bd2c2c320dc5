//! Run directories, run manifests and the experiment commands exposed by
//! the command-line tool.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::config::load_strict;
use crate::diffloss::DiffLossConfig;
use crate::error::{ensure_config, CheckpointError, Error, Result};
use crate::hspace::{feature_distance_sweep, render_histogram};
use crate::image::{save_grid, Image, ImageBatch};
use crate::metrics::{train_probe, write_rows_csv, EvalReference, MetricReport, ProbeClassifier};
use crate::restorer::Restorer;
use crate::synthdata::{generate_shapes, PairedDataset, Split};
use crate::trainer::{
    evaluate_restorer, load_prior, pretrain_ddpm, restore_images, train_restoration, weight_sweep, DiffusionPrior,
    ExperimentConfig, RunPaths, SweepRow,
};

pub const OUT_DIR_ENV: &str = "DIFFLOSS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";
pub const RUN_MANIFEST_FILE: &str = "run.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FORMAT_VERSION: u32 = 1;
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub command: String,
    /// SHA-256 of `config.toml` exactly as stored in the run directory.
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("serializing run manifest: {e}")))?;
        write_atomic(&dir.join(RUN_MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        load_strict(&dir.join(RUN_MANIFEST_FILE))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Output root: the config's `out_dir`, else `$DIFFLOSS_OUT_DIR`, else `runs`.
pub fn out_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} does not exist", path.display())));
    }
    let cfg: ExperimentConfig = load_strict(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// An open run directory. Holds an advisory lock until dropped.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates (or reuses) `root/run_id`, takes its lock, stores the config
    /// and writes the initial manifest.
    pub fn create(root: &Path, cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let path = root.join(&cfg.run_id);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        take_lock(&path)?;
        let mut run = Self {
            path: path.clone(),
            manifest: RunManifest {
                format_version: RUN_FORMAT_VERSION,
                run_id: cfg.run_id.clone(),
                command: command.to_string(),
                config_sha256: String::new(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.seed,
                started_at: now(),
                finished_at: None,
                artifacts: BTreeMap::new(),
            },
        };
        let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        write_atomic(&path.join(CONFIG_FILE), text.as_bytes())?;
        run.manifest.config_sha256 = sha256_hex(text.as_bytes());
        run.record(CONFIG_FILE, &path.join(CONFIG_FILE));
        run.manifest.write(&path)?;
        Ok(run)
    }

    /// Reopens an existing run directory, keeping its manifest and config.
    pub fn reopen(path: &Path) -> Result<Self> {
        let manifest = RunManifest::read(path)?;
        take_lock(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
        })
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path.join(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn record(&mut self, name: &str, path: &Path) {
        let rel = path.strip_prefix(&self.path).unwrap_or(path);
        self.manifest.artifacts.insert(name.to_string(), rel.display().to_string());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finished_at = Some(now());
        self.manifest.write(&self.path)?;
        Ok(self.path.clone())
    }
}

fn take_lock(dir: &Path) -> Result<()> {
    let lock = dir.join(LOCK_FILE);
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
        .map(drop)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                "run directory {} is locked by another command (remove {} if stale)",
                dir.display(),
                lock.display()
            )),
            _ => Error::io(&lock, e),
        })
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

/// Reads the config stored in a run directory, checking it against the
/// manifest hash.
pub fn read_run_config(dir: &Path) -> Result<ExperimentConfig> {
    let manifest = RunManifest::read(dir)?;
    let path = dir.join(CONFIG_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != manifest.config_sha256 {
        return Err(Error::Data(format!(
            "{} does not match the hash recorded in {}",
            path.display(),
            RUN_MANIFEST_FILE
        )));
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    crate::config::parse_strict(&text, &path.display().to_string())
}

fn require_path(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("`{what}` must be set for this command")))
}

fn ensure_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CheckpointError::Missing(p.to_path_buf()).into())
    }
}

/// `ddpm-train`: pretrains the toy DDPM and writes its checkpoints, log and
/// a grid of samples.
pub fn cmd_ddpm_train(config: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let cfg = load_config(config)?;
    ensure_config!(cfg.pretrain.is_some(), "ddpm-train needs a [pretrain] section");
    if let Some(r) = resume {
        ensure_exists(r)?;
    }
    let mut run = RunDir::create(&out_root(&cfg), &cfg, "ddpm-train")?;
    let mut paths = RunPaths::in_dir(&run.path);
    paths.eval_log = None;
    paths.resume = resume.map(Path::to_path_buf);
    let out = pretrain_ddpm(&cfg, &paths)?;
    run.record("train_log", paths.log.as_deref().expect("log path"));
    if let Some(ck) = &out.final_checkpoint {
        run.record("checkpoint", ck);
    }

    #[derive(Serialize)]
    struct Row {
        steps: usize,
        initial_held_out: Option<f64>,
        final_held_out: f64,
        zero_predictor_baseline: f64,
        reached_target: bool,
    }
    let metrics = run.subdir("metrics")?.join("ddpm.csv");
    write_rows_csv(
        &metrics,
        &[Row {
            steps: out.steps,
            initial_held_out: out.initial_held_out,
            final_held_out: out.final_held_out,
            zero_predictor_baseline: (2.0 / std::f64::consts::PI).sqrt(),
            reached_target: out.reached_target,
        }],
    )?;
    run.record("metrics", &metrics);

    let schedule = out.schedule.build()?;
    let r = out.denoiser.config().resolution;
    let mut rng = cfg.bundle().stream(crate::rng::streams::EVAL);
    let samples = schedule.sample(&out.denoiser, &[8, 3, r, r], &mut rng)?;
    let grid = run.subdir("grids")?.join("samples.png");
    save_grid(&[ImageBatch::symmetric(samples)?.to_unit().to_images()], &grid)?;
    run.record("samples", &grid);
    run.finish()
}

/// `restore-train`: trains one restoration arm, then evaluates it. The
/// `diffloss` flag overrides the config; when it is given the run id gets
/// an arm suffix so both arms can share one config file.
pub fn cmd_restore_train(config: &Path, diffloss: Option<bool>) -> Result<PathBuf> {
    let mut cfg = load_config(config)?;
    match diffloss {
        Some(true) => {
            cfg.diffloss = Some(cfg.diffloss.unwrap_or_default());
            cfg.run_id = format!("{}-diffloss", cfg.run_id);
        }
        Some(false) => {
            cfg.diffloss = None;
            cfg.run_id = format!("{}-baseline", cfg.run_id);
        }
        None => {}
    }
    cfg.degradation()?;
    let prior = match &cfg.diffloss {
        Some(_) => {
            let path = require_path(&cfg.denoiser_ckpt, "denoiser_ckpt")?;
            ensure_exists(&path)?;
            Some(load_prior(&path)?)
        }
        None => None,
    };
    let mut run = RunDir::create(&out_root(&cfg), &cfg, "restore-train")?;
    let paths = RunPaths::in_dir(&run.path);
    let out = train_restoration(
        &cfg,
        prior.as_ref().map(|(d, s)| DiffusionPrior {
            denoiser: d,
            schedule: s,
        }),
        &paths,
    )?;
    if let Some((before, after)) = &out.denoiser_checksums {
        if before != after {
            return Err(Error::Numeric("denoiser parameters changed during restoration training".into()));
        }
    }
    run.record("train_log", paths.log.as_deref().expect("log path"));
    run.record("eval_log", paths.eval_log.as_deref().expect("eval log path"));
    if let Some(ck) = &out.final_checkpoint {
        run.record("checkpoint", ck);
    }
    evaluate_into(&mut run, &cfg, &out.restorer)?;
    run.finish()
}

/// Locates or trains the probe for `cfg`. Trained probes are cached under
/// the output root keyed by everything that determines them, so paired
/// runs share one probe.
pub fn obtain_probe(cfg: &ExperimentConfig) -> Result<ProbeClassifier> {
    if let Some(p) = &cfg.eval.probe_ckpt {
        ensure_exists(p)?;
        return Ok(ProbeClassifier::load_checkpoint(p)?.0);
    }
    #[derive(Serialize)]
    struct Key<'a> {
        resolution: usize,
        n_classes: usize,
        data_seed: u64,
        probe_train: usize,
        n_test: usize,
        probe: &'a crate::metrics::ProbeConfig,
    }
    let key = Key {
        resolution: cfg.dataset.resolution,
        n_classes: cfg.dataset.n_classes,
        data_seed: cfg.dataset.seed,
        probe_train: cfg.eval.probe_train,
        n_test: cfg.eval.n_test,
        probe: &cfg.eval.probe,
    };
    let text = toml::to_string(&key).map_err(|e| Error::Config(format!("probe key: {e}")))?;
    let dir = out_root(cfg).join("probes").join(&sha256_hex(text.as_bytes())[..16]);
    if dir.join(crate::checkpoint::MANIFEST_FILE).is_file() {
        return Ok(ProbeClassifier::load_checkpoint(&dir)?.0);
    }
    let train = generate_shapes(&cfg.dataset.with_split(Split::Train, cfg.eval.probe_train))?;
    let test = generate_shapes(&cfg.test_spec())?;
    let probe = train_probe(&train, &test, cfg.eval.probe, cfg.dataset.seed)?;
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    probe.save_checkpoint(&tmp, cfg.eval.probe.steps as u64, cfg.dataset.seed)?;
    if fs::rename(&tmp, &dir).is_err() {
        // another process finished first; both copies are identical
        let _ = fs::remove_dir_all(&tmp);
    }
    Ok(probe)
}

fn reference_name(cfg: &ExperimentConfig) -> String {
    format!("clean-test:seed={}:n={}", cfg.dataset.seed, cfg.eval.n_test)
}

fn test_pairs(cfg: &ExperimentConfig) -> Result<PairedDataset> {
    Ok(PairedDataset::from_clean(&generate_shapes(&cfg.test_spec())?, &cfg.degradation()?))
}

fn evaluate_into(run: &mut RunDir, cfg: &ExperimentConfig, restorer: &Restorer) -> Result<MetricReport> {
    let probe = obtain_probe(cfg)?;
    let test = test_pairs(cfg)?;
    let clean = ImageBatch::from_images(&test.clean)?;
    let reference = EvalReference::new(&probe, &clean, &reference_name(cfg))?;
    let report = evaluate_restorer(restorer, &test, &reference)?;
    let path = run.subdir("metrics")?.join(METRICS_FILE);
    report.write_csv(&path)?;
    run.record("metrics", &path);

    let n = test.len().min(8);
    let restored = restore_images(restorer, &test.degraded[..n])?.to_images();
    let grid = run.subdir("grids")?.join("restoration.png");
    save_grid(
        &[test.degraded[..n].to_vec(), restored, test.clean[..n].to_vec()],
        &grid,
    )?;
    run.record("grid", &grid);
    Ok(report)
}

/// `evaluate`: recomputes the metric report of a finished restoration run.
pub fn cmd_evaluate(run_dir: &Path) -> Result<PathBuf> {
    ensure_exists(run_dir)?;
    let cfg = read_run_config(run_dir)?;
    let ck = run_dir.join("checkpoints").join("final");
    ensure_exists(&ck)?;
    let (restorer, _) = Restorer::load_checkpoint(&ck, Some(&cfg.restorer))?;
    let mut run = RunDir::reopen(run_dir)?;
    evaluate_into(&mut run, &cfg, &restorer)?;
    run.finish()
}

/// `hspace-probe`: the h-space perturbation sweep over clean, degraded and
/// both restored conditions.
pub fn cmd_hspace_probe(config: &Path) -> Result<PathBuf> {
    let cfg = load_config(config)?;
    let section = cfg
        .hspace
        .clone()
        .ok_or_else(|| Error::Config("hspace-probe needs an [hspace] section".into()))?;
    let ck = require_path(&cfg.denoiser_ckpt, "denoiser_ckpt")?;
    ensure_exists(&ck)?;
    let (denoiser, schedule) = load_prior(&ck)?;
    let probe = obtain_probe(&cfg)?;
    let spec = section.perturb_spec(cfg.seed);
    let mut run = RunDir::create(&out_root(&cfg), &cfg, "hspace-probe")?;

    let test = generate_shapes(&cfg.dataset.with_split(Split::Test, section.n_images))?;
    let clean = ImageBatch::from_images(&test.images)?;
    let degraded_images = cfg
        .degradation
        .map(|d| PairedDataset::from_clean(&test, &d).degraded);
    let restored = |p: &Option<PathBuf>| -> Result<Option<ImageBatch>> {
        match (p, &degraded_images) {
            (Some(p), Some(deg)) => {
                ensure_exists(p)?;
                let (r, _) = Restorer::load_checkpoint(p, None)?;
                Ok(Some(restore_images(&r, deg)?))
            }
            _ => Ok(None),
        }
    };
    let conditions = vec![
        ("clean".to_string(), Some(clean.clone())),
        (
            "degraded".to_string(),
            degraded_images.as_deref().map(ImageBatch::from_images).transpose()?,
        ),
        ("restored_with".to_string(), restored(&section.restorer_with)?),
        ("restored_without".to_string(), restored(&section.restorer_without)?),
    ];
    let table = feature_distance_sweep(&conditions, &spec, &denoiser, &schedule, &probe)?;
    let csv = run.subdir("metrics")?.join("hspace.csv");
    table.write_csv(&csv)?;
    run.record("metrics", &csv);
    let hist = run.subdir("grids")?.join("hspace_histogram.png");
    render_histogram(&table, &hist)?;
    run.record("histogram", &hist);

    let few = clean.narrow(0, clean.len().min(6) as i64);
    let regen = crate::hspace::generate_perturbed(&few, &spec, &denoiser, &schedule)?;
    let mut rows: Vec<Vec<Image>> = vec![few.to_images()];
    rows.extend(regen.images.iter().map(ImageBatch::to_images));
    let grid = run.join("grids").join("hspace_regenerations.png");
    save_grid(&rows, &grid)?;
    run.record("regenerations", &grid);
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRow {
    pub run: String,
    pub degradation: String,
    pub diffloss: bool,
    pub top1_restored: f64,
    pub top1_degraded: f64,
    pub top1_clean: f64,
    pub n: usize,
}

fn report_run_id(prefix: &str, dirs: &[PathBuf]) -> String {
    let names: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    format!("{prefix}-{}", &sha256_hex(names.join("\n").as_bytes())[..10])
}

fn report_dir(prefix: &str, dirs: &[PathBuf], out: Option<&Path>) -> Result<(ExperimentConfig, PathBuf)> {
    ensure_config!(!dirs.is_empty(), "{prefix} needs at least one run directory");
    let mut first = read_run_config(&dirs[0])?;
    first.run_id = report_run_id(prefix, dirs);
    let root = match out {
        Some(p) => p.to_path_buf(),
        None => dirs[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((first, root))
}

/// `classify-eval`: probe top-1 on restored, degraded and clean test images
/// for each run.
pub fn cmd_classify_eval(dirs: &[PathBuf], out: Option<&Path>) -> Result<PathBuf> {
    let (report_cfg, root) = report_dir("classify", dirs, out)?;
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        ensure_exists(dir)?;
        let cfg = read_run_config(dir)?;
        let ck = dir.join("checkpoints").join("final");
        ensure_exists(&ck)?;
        let (restorer, _) = Restorer::load_checkpoint(&ck, Some(&cfg.restorer))?;
        let probe = obtain_probe(&cfg)?;
        let test = test_pairs(&cfg)?;
        let restored = restore_images(&restorer, &test.degraded)?;
        rows.push(ClassifyRow {
            run: cfg.run_id.clone(),
            degradation: cfg.degradation()?.kind().to_string(),
            diffloss: cfg.diffloss.is_some_and(|d: DiffLossConfig| d.gamma > 0.0),
            top1_restored: probe.top1(&restored, &test.labels)?,
            top1_degraded: probe.top1(&ImageBatch::from_images(&test.degraded)?, &test.labels)?,
            top1_clean: probe.top1(&ImageBatch::from_images(&test.clean)?, &test.labels)?,
            n: test.len(),
        });
    }
    let mut run = RunDir::create(&root, &report_cfg, "classify-eval")?;
    let path = run.subdir("metrics")?.join("classify.csv");
    write_rows_csv(&path, &rows)?;
    run.record("metrics", &path);
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub diffloss: bool,
    pub psnr_db: f64,
    pub ssim: f64,
    pub desk_fid: f64,
    pub top1: f64,
    pub n_samples: usize,
    pub fid_reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub run: String,
    pub baseline: String,
    pub d_psnr_db: f64,
    pub d_ssim: f64,
    pub d_desk_fid: f64,
    pub d_top1: f64,
}

/// `report`: side-by-side metric table plus deltas of every run against
/// the baseline arm (the first run without DiffLoss, else the first run).
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<PathBuf> {
    let (report_cfg, root) = report_dir("report", dirs, out)?;
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        ensure_exists(dir)?;
        let cfg = read_run_config(dir)?;
        let path = dir.join("metrics").join(METRICS_FILE);
        ensure_exists(&path)?;
        let m = MetricReport::read_csv(&path)?
            .pop()
            .ok_or_else(|| Error::Data(format!("{} has no rows", path.display())))?;
        rows.push(ReportRow {
            run: cfg.run_id.clone(),
            diffloss: cfg.diffloss.is_some_and(|d| d.gamma > 0.0),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            desk_fid: m.desk_fid,
            top1: m.top1,
            n_samples: m.n_samples,
            fid_reference: m.fid_reference,
        });
    }
    let base = rows.iter().position(|r| !r.diffloss).unwrap_or(0);
    let deltas: Vec<DeltaRow> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != base)
        .map(|(_, r)| DeltaRow {
            run: r.run.clone(),
            baseline: rows[base].run.clone(),
            d_psnr_db: r.psnr_db - rows[base].psnr_db,
            d_ssim: r.ssim - rows[base].ssim,
            d_desk_fid: r.desk_fid - rows[base].desk_fid,
            d_top1: r.top1 - rows[base].top1,
        })
        .collect();
    let mut run = RunDir::create(&root, &report_cfg, "report")?;
    let dir = run.subdir("metrics")?;
    write_rows_csv(&dir.join("report.csv"), &rows)?;
    write_rows_csv(&dir.join("delta.csv"), &deltas)?;
    run.record("report", &dir.join("report.csv"));
    run.record("delta", &dir.join("delta.csv"));
    run.finish()
}

/// `sweep-gamma`: one run per loss weight, written as a CSV table and a
/// PSNR-versus-weight plot.
pub fn cmd_sweep_gamma(config: &Path, gammas: &[f64]) -> Result<PathBuf> {
    let mut cfg = load_config(config)?;
    ensure_config!(!gammas.is_empty(), "--gammas must list at least one value");
    ensure_config!(
        gammas.iter().all(|g| g.is_finite() && *g >= 0.0),
        "--gammas must be finite and non-negative"
    );
    let path = require_path(&cfg.denoiser_ckpt, "denoiser_ckpt")?;
    ensure_exists(&path)?;
    let (denoiser, schedule) = load_prior(&path)?;
    cfg.diffloss = Some(cfg.diffloss.unwrap_or_default());
    let probe = obtain_probe(&cfg)?;
    let test = test_pairs(&cfg)?;
    let clean = ImageBatch::from_images(&test.clean)?;
    let reference = EvalReference::new(&probe, &clean, &reference_name(&cfg))?;
    cfg.run_id = format!("{}-sweep", cfg.run_id);
    let mut run = RunDir::create(&out_root(&cfg), &cfg, "sweep-gamma")?;
    let rows = weight_sweep(
        &cfg,
        gammas,
        DiffusionPrior {
            denoiser: &denoiser,
            schedule: &schedule,
        },
        &test,
        &reference,
    )?;
    let csv = run.subdir("metrics")?.join("sweep.csv");
    write_rows_csv(&csv, &rows)?;
    run.record("metrics", &csv);
    let plot = run.subdir("grids")?.join("psnr_vs_gamma.png");
    render_sweep_plot(&rows, &plot)?;
    run.record("plot", &plot);
    run.finish()
}

/// Line plot of PSNR over the sweep entries (in the given order), with the
/// reference best-weight band shaded.
pub fn render_sweep_plot(rows: &[SweepRow], path: &Path) -> Result<()> {
    const W: u32 = 400;
    const H: u32 = 240;
    const PAD: u32 = 20;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.psnr_db), b.max(r.psnr_db))
    });
    let span = (hi - lo).max(1e-9);
    let n = rows.len().max(2) as f64 - 1.0;
    let point = |i: usize, v: f64| -> (i64, i64) {
        let x = PAD as f64 + (W - 2 * PAD) as f64 * i as f64 / n;
        let y = (H - PAD) as f64 - (H - 2 * PAD) as f64 * (v - lo) / span;
        (x.round() as i64, y.round() as i64)
    };
    for (i, r) in rows.iter().enumerate() {
        if r.in_reference_band {
            let (x, _) = point(i, r.psnr_db);
            for dx in -6..=6 {
                for y in PAD..H - PAD {
                    put(&mut img, x + dx, y as i64, [230, 230, 245]);
                }
            }
        }
    }
    for x in PAD..W - PAD {
        put(&mut img, x as i64, (H - PAD) as i64, [0, 0, 0]);
    }
    for y in PAD..H - PAD {
        put(&mut img, PAD as i64, y as i64, [0, 0, 0]);
    }
    for i in 1..rows.len() {
        let (x0, y0) = point(i - 1, rows[i - 1].psnr_db);
        let (x1, y1) = point(i, rows[i].psnr_db);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            put(&mut img, x, y, [31, 119, 180]);
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let (x, y) = point(i, r.psnr_db);
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(&mut img, x + dx, y + dy, [214, 39, 40]);
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("encoding plot: {e}")))?;
    write_atomic(path, &bytes)
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
    }
}
