//! Singular-value edits of the denoiser bottleneck during regeneration, and
//! the probe-feature distance sweep built on them.

use std::cell::Cell;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::denoiser::{DenoiserOutput, FrozenDenoiser, NoisePredictor};
use crate::diffusion::{NoiseSchedule, Timesteps};
use crate::error::{ensure_arg, ensure_config, Result};
use crate::image::ImageBatch;
use crate::metrics::{write_rows_csv, ProbeClassifier};
use crate::rng::{randn, SeedBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    ScaleSigma1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Re-noising depth as a fraction of the schedule length.
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: PerturbMode,
    pub seed: u64,
}

fn default_t0() -> f64 {
    0.5
}

fn default_deltas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

fn default_mode() -> PerturbMode {
    PerturbMode::ScaleSigma1
}

impl PerturbSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            t0: default_t0(),
            deltas: default_deltas(),
            mode: default_mode(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.t0 > 0.0 && self.t0 <= 1.0, "hspace.t0 must lie in (0, 1], got {}", self.t0);
        ensure_config!(self.deltas.contains(&0.0), "hspace.deltas must include 0");
        ensure_config!(
            self.deltas.iter().all(|d| d.is_finite() && *d >= 0.0),
            "hspace.deltas must be finite and non-negative"
        );
        Ok(())
    }

    /// Integer re-noising step for a schedule of `steps` steps.
    pub fn t0_step(&self, steps: usize) -> usize {
        ((self.t0 * steps as f64).round() as usize).clamp(1, steps)
    }
}

/// Result of one [`svd_perturb`] call.
#[derive(Debug)]
pub struct Perturbed {
    pub h: Tensor,
    /// Leading singular value of each sample's matrix before the edit.
    pub sigma1: Vec<f64>,
    /// Samples whose feature was all zero and was passed through untouched.
    pub degenerate: Vec<bool>,
}

impl Perturbed {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Views each sample's `(C, H, W)` feature as a `C x HW` matrix, takes its
/// SVD and scales the top singular value by `1 + delta`.
pub fn svd_perturb(h: &Tensor, delta: f64) -> Result<Perturbed> {
    ensure_arg!(delta >= 0.0 && delta.is_finite(), "delta must be finite and non-negative, got {delta}");
    let size = h.size();
    ensure_arg!(size.len() == 4, "h must be (N, C, H, W), got {size:?}");
    let (n, c) = (size[0], size[1]);
    let m = h.to_kind(Kind::Double).reshape([n, c, -1]);
    let (u, s, v) = m.svd(true, true);
    let sigma1 = Vec::<f64>::try_from(&s.select(1, 0)).expect("double tensor");
    let degenerate: Vec<bool> = Vec::<f64>::try_from(&m.abs().amax([1i64, 2].as_slice(), false))
        .expect("double tensor")
        .into_iter()
        .map(|v| v == 0.0)
        .collect();
    let k = s.size()[1];
    let mut factor = vec![1.0; k as usize];
    factor[0] = 1.0 + delta;
    let s_new = &s * Tensor::from_slice(&factor).view([1, k]);
    let rebuilt = (u * s_new.unsqueeze(1)).matmul(&v.transpose(-2, -1));
    let keep = Tensor::from_slice(&degenerate.iter().map(|&d| d as i64 as f64).collect::<Vec<_>>())
        .view([n, 1, 1]);
    let out = &m * &keep + rebuilt * (keep.ones_like() - &keep);
    Ok(Perturbed {
        h: out.reshape(size.as_slice()).to_kind(h.kind()),
        sigma1,
        degenerate,
    })
}

/// Denoiser wrapper that applies [`svd_perturb`] on every call.
struct EditedDenoiser<'a> {
    inner: &'a FrozenDenoiser,
    delta: f64,
    degenerate_calls: Cell<usize>,
}

impl NoisePredictor for EditedDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: &Timesteps) -> Result<DenoiserOutput> {
        let mut err = None;
        let out = self.inner.denoise_with_edit(x_t, t, |h| match svd_perturb(h, self.delta) {
            Ok(p) => {
                if p.any_degenerate() {
                    self.degenerate_calls.set(self.degenerate_calls.get() + 1);
                }
                p.h
            }
            Err(e) => {
                err = Some(e);
                h.shallow_clone()
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

/// Regenerations of one image batch, one entry per value of `spec.deltas`.
#[derive(Debug)]
pub struct Regenerations {
    pub deltas: Vec<f64>,
    /// Unit-range images.
    pub images: Vec<ImageBatch>,
    /// Denoiser calls in which some sample had an all-zero h.
    pub degenerate_calls: usize,
}

/// Re-noises `images` to step `t0` and runs the reverse chain back to
/// `t = 1` with the bottleneck edited at every step. All deltas share the
/// same noise draws, so the `delta = 0` output is the plain regeneration.
pub fn generate_perturbed(
    images: &ImageBatch,
    spec: &PerturbSpec,
    denoiser: &FrozenDenoiser,
    schedule: &NoiseSchedule,
) -> Result<Regenerations> {
    spec.validate()?;
    let r = denoiser.config().resolution;
    let [_, _, h, w] = images.shape();
    ensure_arg!(h == r && w == r, "images are {h}x{w} but the denoiser expects {r}x{r}");
    let x0 = images.to_symmetric().tensor().to_kind(Kind::Float);
    let t0 = spec.t0_step(schedule.steps());
    let bundle = SeedBundle::new(spec.seed).child("hspace");
    let mut out = Vec::with_capacity(spec.deltas.len());
    let mut degenerate_calls = 0;
    for &delta in &spec.deltas {
        let mut rng = bundle.stream("renoise");
        let eps = randn(&mut rng, &x0.size(), Kind::Float);
        let x_t = schedule.forward_diffuse(&x0, &eps, t0)?;
        let edited = EditedDenoiser {
            inner: denoiser,
            delta,
            degenerate_calls: Cell::new(0),
        };
        let x = schedule.denoise_from(&edited, x_t, t0, &mut rng)?;
        degenerate_calls += edited.degenerate_calls.get();
        out.push(ImageBatch::symmetric(x)?.to_unit());
    }
    if degenerate_calls > 0 {
        log::warn!("h-space perturbation skipped all-zero features in {degenerate_calls} denoiser calls");
    }
    Ok(Regenerations {
        deltas: spec.deltas.clone(),
        images: out,
        degenerate_calls,
    })
}

/// One row of the distance table. Empty statistics mark a missing condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub condition: String,
    pub delta: f64,
    pub mean_dist: Option<f64>,
    pub std_dist: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct DistanceTable {
    pub rows: Vec<DistanceRow>,
    /// Per-image distances for rows that have data, keyed by row index.
    pub samples: Vec<Vec<f64>>,
}

impl DistanceTable {
    pub fn get(&self, condition: &str, delta: f64) -> Option<&DistanceRow> {
        self.rows.iter().find(|r| r.condition == condition && r.delta == delta)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows_csv(path, &self.rows)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// For each condition and delta, the L2 distance in probe-feature space
/// between each regenerated image and its original. Conditions given as
/// `None` produce rows with empty statistics.
pub fn feature_distance_sweep(
    conditions: &[(String, Option<ImageBatch>)],
    spec: &PerturbSpec,
    denoiser: &FrozenDenoiser,
    schedule: &NoiseSchedule,
    probe: &ProbeClassifier,
) -> Result<DistanceTable> {
    probe.ensure_gate()?;
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for (name, images) in conditions {
        let Some(images) = images else {
            log::warn!("condition `{name}` missing from h-space sweep");
            for &delta in &spec.deltas {
                rows.push(DistanceRow {
                    condition: name.clone(),
                    delta,
                    mean_dist: None,
                    std_dist: None,
                    n: 0,
                });
                samples.push(Vec::new());
            }
            continue;
        };
        let original = probe.features(images)?;
        let regen = generate_perturbed(images, spec, denoiser, schedule)?;
        for (delta, batch) in regen.deltas.iter().zip(&regen.images) {
            let feats = probe.features(batch)?;
            let d: Vec<f64> = (0..feats.nrows())
                .map(|i| (feats.row(i) - original.row(i)).norm())
                .collect();
            let (mean, std) = mean_std(&d);
            rows.push(DistanceRow {
                condition: name.clone(),
                delta: *delta,
                mean_dist: Some(mean),
                std_dist: Some(std),
                n: d.len(),
            });
            samples.push(d);
        }
    }
    Ok(DistanceTable { rows, samples })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Draws one histogram panel per condition, with one colour per delta.
pub fn render_histogram(table: &DistanceTable, path: &Path) -> Result<()> {
    const BINS: usize = 24;
    const PANEL_W: u32 = 480;
    const PANEL_H: u32 = 120;
    const PAD: u32 = 8;
    let mut conditions: Vec<&str> = Vec::new();
    let mut deltas: Vec<f64> = Vec::new();
    for r in &table.rows {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
        if !deltas.contains(&r.delta) {
            deltas.push(r.delta);
        }
    }
    let max = table.samples.iter().flatten().fold(0.0f64, |m, &v| m.max(v)).max(1e-12);
    let height = conditions.len().max(1) as u32 * (PANEL_H + PAD) + PAD;
    let mut img = image::RgbImage::from_pixel(PANEL_W + 2 * PAD, height, image::Rgb([255, 255, 255]));
    let bar_w = PANEL_W / (BINS as u32 * deltas.len().max(1) as u32);
    for (ci, cond) in conditions.iter().enumerate() {
        let top = PAD + ci as u32 * (PANEL_H + PAD);
        for x in PAD..PAD + PANEL_W {
            img.put_pixel(x, top + PANEL_H - 1, image::Rgb([0, 0, 0]));
        }
        for (ri, row) in table.rows.iter().enumerate() {
            if row.condition != *cond || row.n == 0 {
                continue;
            }
            let di = deltas.iter().position(|&d| d == row.delta).unwrap_or(0);
            let mut counts = [0usize; BINS];
            for &v in &table.samples[ri] {
                counts[((v / max * BINS as f64) as usize).min(BINS - 1)] += 1;
            }
            let peak = *counts.iter().max().unwrap_or(&1) as f64;
            for (b, &c) in counts.iter().enumerate() {
                let bar_h = ((c as f64 / peak) * (PANEL_H - 2) as f64).round() as u32;
                let x0 = PAD + (b as u32 * deltas.len() as u32 + di as u32) * bar_w;
                for x in x0..x0 + bar_w {
                    for y in (top + PANEL_H - 1 - bar_h)..(top + PANEL_H - 1) {
                        img.put_pixel(x, y, image::Rgb(PALETTE[di % PALETTE.len()]));
                    }
                }
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| crate::Error::Data(format!("encoding histogram: {e}")))?;
    crate::checkpoint::write_atomic(path, &bytes)
}
