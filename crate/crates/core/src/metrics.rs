//! Image quality metrics, the Fréchet feature distance and the probe
//! classifier whose penultimate features it is computed over.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, VarStore};
use tch::{Device, Kind, Tensor};

use crate::checkpoint::{self, CheckpointManifest, LoadedCheckpoint};
use crate::error::{ensure_arg, ensure_config, Error, Result};
use crate::image::ImageBatch;
use crate::nn::{conv3x3, init_params, Adam, AdamConfig};
use crate::rng::{streams, SeedBundle};
use crate::synthdata::ShapesDataset;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const PROBE_GATE: f64 = 0.90;
pub const PROBE_CHECKPOINT_KIND: &str = "probe";

const SSIM_WINDOW: i64 = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

fn check_pair(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    ensure_arg!(
        a.shape() == b.shape(),
        "image batches differ in shape: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    ensure_arg!(!a.is_empty(), "empty image batch");
    Ok(())
}

fn unit_f64(a: &ImageBatch) -> Tensor {
    a.to_unit().tensor().to_kind(Kind::Double)
}

/// PSNR over the whole batch with peak value 1. Returns `+inf` when the
/// batches are identical.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    check_pair(a, b)?;
    let mse = (unit_f64(a) - unit_f64(b)).square().mean(Kind::Double).double_value(&[]);
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

pub fn psnr_per_image(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let mse = (unit_f64(a) - unit_f64(b)).square().mean_dim([1i64, 2, 3].as_slice(), false, Kind::Double);
    Ok(Vec::<f64>::try_from(&mse)
        .expect("double tensor")
        .into_iter()
        .map(psnr_from_mse)
        .collect())
}

/// Mean of per-image PSNR, each capped at [`PSNR_CAP_DB`]. This is the value
/// that goes into reports.
pub fn mean_psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let v = psnr_per_image(a, b)?;
    Ok(v.iter().map(|&x| cap_psnr(x)).sum::<f64>() / v.len() as f64)
}

fn gray(t: &Tensor) -> Tensor {
    let w = Tensor::from_slice(&GRAY_WEIGHTS).view([1, 3, 1, 1]);
    (t * w).sum_dim_intlist([1i64].as_slice(), true, Kind::Double)
}

fn gaussian_window() -> Tensor {
    let half = (SSIM_WINDOW - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g = Tensor::from_slice(&g) / s;
    g.view([SSIM_WINDOW, 1])
        .matmul(&g.view([1, SSIM_WINDOW]))
        .view([1, 1, SSIM_WINDOW, SSIM_WINDOW])
}

/// Mean SSIM on luminance with an 11x11 Gaussian window (sigma 1.5), valid
/// positions only.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    check_pair(a, b)?;
    let [_, _, h, w] = a.shape();
    ensure_arg!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "images of {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
    );
    let x = gray(&unit_f64(a));
    let y = gray(&unit_f64(b));
    let k = gaussian_window();
    let filt = |t: &Tensor| t.conv2d(&k, None::<Tensor>, [1, 1], [0, 0], [1, 1], 1);
    let (mx, my) = (filt(&x), filt(&y));
    let sxx = filt(&(&x * &x)) - &mx * &mx;
    let syy = filt(&(&y * &y)) - &my * &my;
    let sxy = filt(&(&x * &y)) - &mx * &my;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = (&mx * &my * 2.0 + c1) * (sxy * 2.0 + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    Ok((num / den).mean(Kind::Double).double_value(&[]))
}

/// Row-per-sample feature matrix from an `(N, D)` tensor.
pub fn feature_matrix(t: &Tensor) -> DMatrix<f64> {
    let size = t.size();
    assert_eq!(size.len(), 2, "feature tensor must be 2-D");
    let (n, d) = (size[0] as usize, size[1] as usize);
    let data = Vec::<f64>::try_from(&t.to_kind(Kind::Double).contiguous().view(-1)).expect("double tensor");
    DMatrix::from_row_slice(n, d, &data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidOptions {
    /// Blend toward a scaled identity when a set has no more samples than
    /// dimensions. `None` makes that case an error.
    pub shrinkage: Option<f64>,
}

impl Default for FidOptions {
    fn default() -> Self {
        Self { shrinkage: Some(0.1) }
    }
}

fn moments(x: &DMatrix<f64>, opts: FidOptions) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.shape();
    ensure_arg!(n >= 2, "need at least 2 feature vectors, got {n}");
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if n < d + 1 {
        let Some(alpha) = opts.shrinkage else {
            return Err(Error::Argument(format!(
                "{n} samples cannot support a {d}-dimensional covariance; enable shrinkage or supply at least {}",
                d + 1
            )));
        };
        let target = cov.trace() / d as f64;
        cov *= 1.0 - alpha;
        for i in 0..d {
            cov[(i, i)] += alpha * target;
        }
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((S1 S2)^(1/2))` as `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))`, which only
/// needs symmetric eigendecompositions. Negative eigenvalues clip to zero.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let r = psd_sqrt(s1);
    let inner = &r * s2 * &r;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

pub fn frechet_distance_with(a: &DMatrix<f64>, b: &DMatrix<f64>, opts: FidOptions) -> Result<f64> {
    ensure_arg!(
        a.ncols() == b.ncols(),
        "feature dimensions differ: {} vs {}",
        a.ncols(),
        b.ncols()
    );
    let (m1, s1) = moments(a, opts)?;
    let (m2, s2) = moments(b, opts)?;
    // averaging both orderings makes the result exactly symmetric
    let cross = 0.5 * (trace_sqrt_product(&s1, &s2) + trace_sqrt_product(&s2, &s1));
    let d = (&m1 - &m2).norm_squared() + (s1.trace() + s2.trace()) - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between two feature sets (rows are samples).
pub fn desk_fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    frechet_distance_with(a, b, FidOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub width: i64,
    pub feature_dim: i64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            width: 16,
            feature_dim: 64,
            steps: 1500,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.width >= 1, "probe.width must be positive");
        ensure_config!(self.feature_dim >= 1, "probe.feature_dim must be positive");
        ensure_config!(self.batch_size >= 1, "probe.batch_size must be positive");
        ensure_config!(self.lr > 0.0, "probe.lr must be positive");
        Ok(())
    }
}

/// Everything needed to rebuild the probe's graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeShape {
    probe: ProbeConfig,
    n_classes: i64,
    resolution: i64,
}

#[derive(Debug)]
struct ProbeNet {
    convs: Vec<nn::Conv2D>,
    fc_feat: nn::Linear,
    fc_out: nn::Linear,
}

impl ProbeNet {
    fn new(p: &nn::Path, s: &ProbeShape) -> Self {
        let w = s.probe.width;
        let chans = [3, w, 2 * w, 4 * w];
        let convs = (0..3).map(|i| conv3x3(p / "conv" / i, chans[i], chans[i + 1])).collect();
        let side = s.resolution / 8;
        let fc_feat = nn::linear(p / "fc_feat", 4 * w * side * side, s.probe.feature_dim, Default::default());
        let fc_out = nn::linear(p / "fc_out", s.probe.feature_dim, s.n_classes, Default::default());
        Self { convs, fc_feat, fc_out }
    }

    fn features(&self, x: &Tensor) -> Tensor {
        let mut h = x.shallow_clone();
        for c in &self.convs {
            h = h.apply(c).relu().avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
        }
        h.flatten(1, -1).apply(&self.fc_feat).relu()
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        self.fc_out.forward(&self.features(x))
    }
}

/// Small CNN classifier trained on clean shapes only. Its penultimate layer
/// provides the features for [`desk_fid`].
#[derive(Debug)]
pub struct ProbeClassifier {
    shape: ProbeShape,
    vs: VarStore,
    net: ProbeNet,
    clean_accuracy: Option<f64>,
}

impl ProbeClassifier {
    pub fn new(cfg: ProbeConfig, n_classes: usize, resolution: usize, bundle: &SeedBundle) -> Result<Self> {
        cfg.validate()?;
        ensure_config!(
            resolution >= 8 && resolution % 8 == 0,
            "probe resolution must be a positive multiple of 8, got {resolution}"
        );
        ensure_config!(n_classes >= 2, "probe needs at least 2 classes");
        let shape = ProbeShape {
            probe: cfg,
            n_classes: n_classes as i64,
            resolution: resolution as i64,
        };
        let vs = VarStore::new(Device::Cpu);
        let net = ProbeNet::new(&vs.root(), &shape);
        init_params(&vs, &mut bundle.stream(streams::INIT));
        Ok(Self {
            shape,
            vs,
            net,
            clean_accuracy: None,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.shape.probe
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.probe.feature_dim as usize
    }

    pub fn n_classes(&self) -> usize {
        self.shape.n_classes as usize
    }

    /// Clean-test accuracy recorded when the probe was trained.
    pub fn clean_accuracy(&self) -> Option<f64> {
        self.clean_accuracy
    }

    pub fn gate_passed(&self) -> bool {
        self.clean_accuracy.is_some_and(|a| a >= PROBE_GATE)
    }

    pub fn ensure_gate(&self) -> Result<()> {
        match self.clean_accuracy {
            Some(a) if a >= PROBE_GATE => Ok(()),
            Some(a) => Err(Error::Data(format!(
                "probe clean-test accuracy {a:.4} is below the {PROBE_GATE} gate; refusing to evaluate"
            ))),
            None => Err(Error::Data("probe has no recorded clean-test accuracy; refusing to evaluate".into())),
        }
    }

    pub fn checksum(&self) -> String {
        crate::nn::checksum(&self.vs)
    }

    fn input(&self, images: &ImageBatch) -> Result<Tensor> {
        let [_, _, h, w] = images.shape();
        ensure_arg!(
            h == self.shape.resolution && w == self.shape.resolution,
            "probe expects {r}x{r} images, got {h}x{w}",
            r = self.shape.resolution
        );
        Ok(images.to_unit().tensor().to_kind(Kind::Float))
    }

    fn batched<F: Fn(&Tensor) -> Tensor>(&self, images: &ImageBatch, f: F) -> Result<Tensor> {
        let x = self.input(images)?;
        let n = x.size()[0];
        let chunk = 256;
        let parts: Vec<Tensor> = tch::no_grad(|| {
            (0..n)
                .step_by(chunk as usize)
                .map(|s| f(&x.narrow(0, s, chunk.min(n - s))))
                .collect()
        });
        Ok(Tensor::cat(&parts, 0))
    }

    fn predictions(&self, images: &ImageBatch) -> Result<Vec<i64>> {
        let logits = self.batched(images, |x| self.net.logits(x))?;
        Ok(Vec::<i64>::try_from(&logits.argmax(1, false)).expect("int tensor"))
    }

    fn accuracy_unchecked(&self, images: &ImageBatch, labels: &[usize]) -> Result<f64> {
        ensure_arg!(
            images.len() == labels.len(),
            "{} images but {} labels",
            images.len(),
            labels.len()
        );
        ensure_arg!(!labels.is_empty(), "no images to classify");
        let pred = self.predictions(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, &l)| **p == l as i64).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Fraction of images classified correctly.
    pub fn top1(&self, images: &ImageBatch, labels: &[usize]) -> Result<f64> {
        self.ensure_gate()?;
        self.accuracy_unchecked(images, labels)
    }

    /// Penultimate activations, one row per image.
    pub fn features(&self, images: &ImageBatch) -> Result<DMatrix<f64>> {
        self.ensure_gate()?;
        Ok(feature_matrix(&self.batched(images, |x| self.net.features(x))?))
    }

    pub fn save_checkpoint(&self, path: &Path, training_steps: u64, seed: u64) -> Result<()> {
        let mut manifest = CheckpointManifest::new(PROBE_CHECKPOINT_KIND, &self.shape, training_steps, seed)?;
        if let Some(a) = self.clean_accuracy {
            manifest.metrics.insert("clean_accuracy".into(), a);
        }
        checkpoint::save(path, &manifest, &crate::nn::sorted_variables(&self.vs))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, LoadedCheckpoint)> {
        let loaded = checkpoint::load(path, PROBE_CHECKPOINT_KIND)?;
        let shape: ProbeShape = loaded.manifest.config_as(path)?;
        shape.probe.validate()?;
        let mut vs = VarStore::new(Device::Cpu);
        let net = ProbeNet::new(&vs.root(), &shape);
        loaded.apply_to(&vs)?;
        vs.freeze();
        let clean_accuracy = loaded.manifest.metrics.get("clean_accuracy").copied();
        Ok((
            Self {
                shape,
                vs,
                net,
                clean_accuracy,
            },
            loaded,
        ))
    }
}

/// Trains a probe on clean `train` images and records its accuracy on the
/// clean `test` split. The returned probe is frozen.
pub fn train_probe(
    train: &ShapesDataset,
    test: &ShapesDataset,
    cfg: ProbeConfig,
    seed: u64,
) -> Result<ProbeClassifier> {
    ensure_arg!(!train.is_empty() && !test.is_empty(), "probe needs non-empty train and test splits");
    let bundle = SeedBundle::new(seed).child("probe");
    let mut probe = ProbeClassifier::new(cfg, train.spec.n_classes, train.spec.resolution, &bundle)?;
    let images = ImageBatch::from_images(&train.images)?.tensor().to_kind(Kind::Float);
    let labels = Tensor::from_slice(&train.labels.iter().map(|&l| l as i64).collect::<Vec<_>>());
    let mut opt = Adam::new(
        &probe.vs,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order_rng = bundle.stream(streams::DATA_ORDER);
    let mut order: Vec<i64> = Vec::new();
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<i64> = (0..train.len() as i64).collect();
            fresh.shuffle(&mut order_rng);
            order.extend(fresh);
        }
        let idx = Tensor::from_slice(&order.drain(..cfg.batch_size).collect::<Vec<_>>());
        let x = images.index_select(0, &idx);
        let y = labels.index_select(0, &idx);
        let loss = probe.net.logits(&x).cross_entropy_for_logits(&y);
        let value = loss.double_value(&[]);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("probe loss became non-finite ({value})")));
        }
        opt.backward_step(&loss);
    }
    probe.vs.freeze();
    let test_batch = ImageBatch::from_images(&test.images)?;
    probe.clean_accuracy = Some(probe.accuracy_unchecked(&test_batch, &test.labels)?);
    log::info!(
        "probe trained for {} steps, clean-test accuracy {:.4}",
        cfg.steps,
        probe.clean_accuracy.unwrap_or_default()
    );
    Ok(probe)
}

/// One row of an evaluation table. `desk_fid` is always measured against
/// the features of the clean test split named in `fid_reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub desk_fid: f64,
    pub top1: f64,
    pub n_samples: usize,
    pub fid_reference: String,
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows_csv(path, std::slice::from_ref(self))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricReport>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize()
            .map(|row| row.map_err(|e| csv_error(path, e)))
            .collect()
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: malformed CSV: {other:?}", path.display())),
    }
}

/// Writes serializable rows as a comma-separated file with a header.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("CSV buffer: {e}")))?;
    checkpoint::write_atomic(path, &bytes)
}

/// Reference statistics for evaluating restorations against a clean set.
pub struct EvalReference<'a> {
    pub probe: &'a ProbeClassifier,
    pub clean_features: DMatrix<f64>,
    pub name: String,
}

impl<'a> EvalReference<'a> {
    pub fn new(probe: &'a ProbeClassifier, clean: &ImageBatch, name: &str) -> Result<Self> {
        Ok(Self {
            probe,
            clean_features: probe.features(clean)?,
            name: name.to_string(),
        })
    }
}

/// Scores `restored` against its ground truth `target`.
pub fn evaluate_images(
    restored: &ImageBatch,
    target: &ImageBatch,
    labels: &[usize],
    reference: &EvalReference<'_>,
) -> Result<MetricReport> {
    let restored = restored.to_unit();
    let target = target.to_unit();
    Ok(MetricReport {
        psnr_db: mean_psnr(&restored, &target)?,
        ssim: ssim(&restored, &target)?,
        desk_fid: desk_fid(&reference.probe.features(&restored)?, &reference.clean_features)?,
        top1: reference.probe.top1(&restored, labels)?,
        n_samples: restored.len(),
        fid_reference: reference.name.clone(),
    })
}
