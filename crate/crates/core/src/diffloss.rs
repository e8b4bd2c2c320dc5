//! Frozen-diffusion auxiliary loss for restoration training.
//!
//! Both the clean target `x` and the restored image `z` are pushed `t` steps
//! through the forward process with one shared `(eps, t)`, evaluated once by
//! the frozen denoiser, and compared in noise space (`l_nat`) and in the
//! bottleneck feature space (`l_sem`). The clean branch is a constant target.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::denoiser::{DenoiserOutput, FrozenDenoiser};
use crate::diffusion::{NoiseSchedule, Timesteps};
use crate::error::{ensure_arg, ensure_config, Error, Result};
use crate::image::{to_symmetric, ImageBatch, Range};
use crate::rng::{randn, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Constrain the predicted noise.
    Epsilon,
    /// Constrain the reconstructed clean image.
    X0,
    /// Constrain the one-step reverse output.
    XPrev,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Epsilon => "epsilon",
            Variant::X0 => "x0",
            Variant::XPrev => "x_prev",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(Variant::Epsilon),
            "x0" => Ok(Variant::X0),
            "x_prev" => Ok(Variant::XPrev),
            other => Err(Error::Config(format!(
                "unknown diffloss variant `{other}`; expected epsilon, x0 or x_prev"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Constant,
    TimestepAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffLossConfig {
    /// Weight of the semantic term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the whole auxiliary loss against the pixel loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_t_min")]
    pub t_min: usize,
    /// Defaults to the schedule length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: WeightMode,
    #[serde(default = "default_share_noise")]
    pub share_noise: bool,
}

fn default_lambda() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    0.001
}
fn default_t_min() -> usize {
    1
}
fn default_variant() -> Variant {
    Variant::Epsilon
}
fn default_weight_mode() -> WeightMode {
    WeightMode::Constant
}
fn default_share_noise() -> bool {
    true
}

impl Default for DiffLossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            gamma: default_gamma(),
            t_min: default_t_min(),
            t_max: None,
            variant: default_variant(),
            weight_mode: default_weight_mode(),
            share_noise: default_share_noise(),
        }
    }
}

impl DiffLossConfig {
    pub fn t_range(&self, s: &NoiseSchedule) -> (usize, usize) {
        (self.t_min, self.t_max.unwrap_or(s.steps()))
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        ensure_config!(self.lambda >= 0.0 && self.lambda.is_finite(), "diffloss.lambda must be >= 0, got {}", self.lambda);
        ensure_config!(self.gamma >= 0.0 && self.gamma.is_finite(), "diffloss.gamma must be >= 0, got {}", self.gamma);
        let (lo, hi) = self.t_range(s);
        ensure_config!(
            1 <= lo && lo <= hi && hi <= s.steps(),
            "diffloss timestep range [{lo}, {hi}] invalid for T = {}",
            s.steps()
        );
        Ok(())
    }
}

/// Timestep weight for the adaptive mode: `w(t) = alpha_bar(t)`.
pub fn adaptive_weight(t: usize, s: &NoiseSchedule) -> f64 {
    s.alpha_bar(t)
}

/// Effective multiplier on the auxiliary loss at step `t`.
pub fn effective_gamma(cfg: &DiffLossConfig, t: usize, s: &NoiseSchedule) -> f64 {
    match cfg.weight_mode {
        WeightMode::Constant => cfg.gamma,
        WeightMode::TimestepAdaptive => cfg.gamma * adaptive_weight(t, s),
    }
}

/// Differentiable auxiliary-loss terms for one batch.
#[derive(Debug)]
pub struct DiffLossTerms {
    pub l_nat: Tensor,
    pub l_sem: Tensor,
    pub l_diff: Tensor,
    pub t_used: usize,
    pub variant: Variant,
}

/// Scalar summary of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub l_pix: f64,
    pub l_nat: f64,
    pub l_sem: f64,
    pub l_diff: f64,
    pub l_total: f64,
    pub t_used: Option<usize>,
    pub variant: Option<Variant>,
    /// Multiplier applied to `l_diff` in `l_total`.
    pub weight: f64,
}

impl LossReport {
    pub fn pixel_only(l_pix: f64) -> Self {
        Self {
            l_pix,
            l_nat: 0.0,
            l_sem: 0.0,
            l_diff: 0.0,
            l_total: l_pix,
            t_used: None,
            variant: None,
            weight: 0.0,
        }
    }

    /// Checks `l_diff = l_nat + lambda l_sem` and `l_total = l_pix + weight l_diff`
    /// up to f32 rounding.
    pub fn check_identities(&self, lambda: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-12);
        ensure_arg!(
            self.l_pix >= 0.0 && self.l_nat >= 0.0 && self.l_sem >= 0.0,
            "negative loss component in {self:?}"
        );
        if self.variant.is_some() {
            ensure_arg!(close(self.l_diff, self.l_nat + lambda * self.l_sem), "l_diff decomposition broken: {self:?}");
        }
        ensure_arg!(close(self.l_total, self.l_pix + self.weight * self.l_diff), "l_total decomposition broken: {self:?}");
        Ok(())
    }
}

/// Total objective plus its report; `total` carries the graph for backprop.
#[derive(Debug)]
pub struct TotalLoss {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    (a - b).square().mean(a.kind())
}

/// Center-crops (or bilinearly resizes, when smaller) to the denoiser resolution.
fn bridge_resolution(x: &Tensor, res: i64) -> Tensor {
    let (h, w) = (x.size()[2], x.size()[3]);
    if h == res && w == res {
        x.shallow_clone()
    } else if h >= res && w >= res {
        x.narrow(2, (h - res) / 2, res).narrow(3, (w - res) / 2, res)
    } else {
        x.upsample_bilinear2d([res, res], false, None, None)
    }
}

fn check_pair(x: &ImageBatch, z: &ImageBatch, denoiser: &FrozenDenoiser) -> Result<()> {
    ensure_arg!(
        x.range() == Range::Unit && z.range() == Range::Unit,
        "diffloss expects [0,1] images"
    );
    ensure_arg!(
        x.shape() == z.shape(),
        "clear {:?} and restored {:?} shapes differ",
        x.shape(),
        z.shape()
    );
    ensure_arg!(denoiser.is_frozen(), "diffloss requires a frozen denoiser");
    Ok(())
}

/// Auxiliary loss for the configured variant. The epsilon variant is the
/// plain naturalness + semantic constraint.
pub fn compute_variant_loss(
    x_clear: &ImageBatch,
    z_restored: &ImageBatch,
    denoiser: &FrozenDenoiser,
    s: &NoiseSchedule,
    cfg: &DiffLossConfig,
    rng: &mut Rng,
) -> Result<DiffLossTerms> {
    check_pair(x_clear, z_restored, denoiser)?;
    cfg.validate(s)?;
    let res = denoiser.config().resolution;
    let x = to_symmetric(&bridge_resolution(&x_clear.tensor().detach(), res));
    let z = to_symmetric(&bridge_resolution(z_restored.tensor(), res));

    let (t_min, t_max) = cfg.t_range(s);
    let t = s.sample_timestep(rng, t_min, t_max)?;
    let eps = randn(rng, &x.size(), x.kind());
    let eps_rst = if cfg.share_noise {
        eps.shallow_clone()
    } else {
        randn(rng, &x.size(), x.kind())
    };
    let step = Timesteps::Shared(t);

    let x_t = s.forward_diffuse(&x, &eps, t)?;
    let z_t = s.forward_diffuse(&z, &eps_rst, t)?;
    let clr: DenoiserOutput = tch::no_grad(|| denoiser.denoise_with_h(&x_t, &step))?;
    let rst = denoiser.denoise_with_h(&z_t, &step)?;

    let l_nat = match cfg.variant {
        Variant::Epsilon => mse(&rst.eps_hat, &clr.eps_hat),
        Variant::X0 => {
            let x0_clr = s.reconstruct_x0(&x_t, &clr.eps_hat, t)?;
            let x0_rst = s.reconstruct_x0(&z_t, &rst.eps_hat, t)?;
            mse(&x0_rst, &x0_clr)
        }
        Variant::XPrev => {
            let x0_clr = s.reconstruct_x0(&x_t, &clr.eps_hat, t)?;
            let x0_rst = s.reconstruct_x0(&z_t, &rst.eps_hat, t)?;
            let prev_clr = s.posterior_step(&x_t, &x0_clr, t, None)?;
            let prev_rst = s.posterior_step(&z_t, &x0_rst, t, None)?;
            mse(&prev_rst, &prev_clr)
        }
    };
    let l_sem = mse(&rst.h, &clr.h);
    let l_diff = &l_nat + &l_sem * cfg.lambda;
    Ok(DiffLossTerms {
        l_nat,
        l_sem,
        l_diff,
        t_used: t,
        variant: cfg.variant,
    })
}

/// Noise-space naturalness + bottleneck semantic loss (epsilon variant).
pub fn compute_diffloss(
    x_clear: &ImageBatch,
    z_restored: &ImageBatch,
    denoiser: &FrozenDenoiser,
    s: &NoiseSchedule,
    cfg: &DiffLossConfig,
    rng: &mut Rng,
) -> Result<DiffLossTerms> {
    let cfg = DiffLossConfig {
        variant: Variant::Epsilon,
        ..*cfg
    };
    compute_variant_loss(x_clear, z_restored, denoiser, s, &cfg, rng)
}

pub fn pixel_loss(x: &ImageBatch, z: &ImageBatch) -> Result<Tensor> {
    ensure_arg!(x.shape() == z.shape(), "pixel loss shape mismatch {:?} vs {:?}", x.shape(), z.shape());
    Ok(mse(z.tensor(), &x.tensor().detach()))
}

/// `l_total = l_pix + gamma * l_diff`. With `gamma = 0` the auxiliary terms
/// are still evaluated for logging but contribute nothing to the graph.
pub fn compute_total_loss(
    x: &ImageBatch,
    z: &ImageBatch,
    denoiser: &FrozenDenoiser,
    s: &NoiseSchedule,
    cfg: &DiffLossConfig,
    rng: &mut Rng,
) -> Result<TotalLoss> {
    let l_pix = pixel_loss(x, z)?;
    let terms = if cfg.gamma == 0.0 {
        tch::no_grad(|| compute_variant_loss(x, z, denoiser, s, cfg, rng))?
    } else {
        compute_variant_loss(x, z, denoiser, s, cfg, rng)?
    };
    let weight = effective_gamma(cfg, terms.t_used, s);
    let total = if cfg.gamma == 0.0 {
        l_pix.shallow_clone()
    } else {
        &l_pix + &terms.l_diff * weight
    };
    let report = LossReport {
        l_pix: scalar(&l_pix),
        l_nat: scalar(&terms.l_nat),
        l_sem: scalar(&terms.l_sem),
        l_diff: scalar(&terms.l_diff),
        l_total: scalar(&total),
        t_used: Some(terms.t_used),
        variant: Some(terms.variant),
        weight,
    };
    Ok(TotalLoss { total, report })
}

/// Pixel-only objective for the baseline arm.
pub fn compute_pixel_only(x: &ImageBatch, z: &ImageBatch) -> Result<TotalLoss> {
    let l_pix = pixel_loss(x, z)?;
    let report = LossReport::pixel_only(scalar(&l_pix));
    Ok(TotalLoss {
        total: l_pix,
        report,
    })
}

/// Mean over elements, for tests and reports.
pub fn mean_value(t: &Tensor) -> f64 {
    t.mean(Kind::Double).double_value(&[])
}
