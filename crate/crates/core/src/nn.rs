//! Shared network plumbing: seeded parameter init, checksums and Adam.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, VarStore};
use tch::{Kind, Tensor};

use crate::error::{ensure_config, Result};
use crate::rng::Rng;

/// Named variables of a store in a stable order.
pub fn sorted_variables(vs: &VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Re-initializes every variable from `rng`: biases to zero, norm gains to
/// one, weights uniform in `±1/sqrt(fan_in)`. Never touches the global
/// libtorch generator.
pub fn init_params(vs: &VarStore, rng: &mut Rng) {
    tch::no_grad(|| {
        for (name, mut var) in sorted_variables(vs) {
            let shape = var.size();
            let n: i64 = shape.iter().product();
            if name.ends_with(".bias") {
                let _ = var.zero_();
            } else if shape.len() == 1 {
                let _ = var.fill_(1.0);
            } else {
                let fan_in: i64 = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                let src = Tensor::from_slice(&data).reshape(&shape).to_kind(var.kind());
                var.copy_(&src);
            }
        }
    });
}

/// Scales the named variable in place (e.g. zero-init of output heads).
pub fn scale_variable(vs: &VarStore, name: &str, factor: f64) {
    if let Some(mut v) = vs.variables().remove(name) {
        tch::no_grad(|| {
            let _ = v.g_mul_scalar_(factor);
        });
    }
}

pub fn param_count(vs: &VarStore) -> usize {
    vs.variables().values().map(|t| t.numel()).sum()
}

/// SHA-256 over parameter names and raw values.
pub fn checksum(vs: &VarStore) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in sorted_variables(vs) {
        hasher.update(name.as_bytes());
        let t = t.to_kind(Kind::Double).contiguous().view(-1);
        let values = Vec::<f64>::try_from(&t).expect("double tensor");
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn group_count(channels: i64) -> i64 {
    [8, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

pub fn conv3x3(p: nn::Path, c_in: i64, c_out: i64) -> nn::Conv2D {
    nn::conv2d(
        p,
        c_in,
        c_out,
        3,
        nn::ConvConfig {
            padding: 1,
            ..Default::default()
        },
    )
}

pub fn conv1x1(p: nn::Path, c_in: i64, c_out: i64) -> nn::Conv2D {
    nn::conv2d(p, c_in, c_out, 1, Default::default())
}

pub fn group_norm(p: nn::Path, channels: i64) -> nn::GroupNorm {
    nn::group_norm(p, group_count(channels), channels, Default::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.lr > 0.0 && self.lr.is_finite(), "optimizer.lr must be positive, got {}", self.lr);
        ensure_config!(
            self.betas.iter().all(|b| (0.0..1.0).contains(b)),
            "optimizer.betas must lie in [0, 1), got {:?}",
            self.betas
        );
        ensure_config!(self.eps > 0.0, "optimizer.eps must be positive");
        Ok(())
    }
}

/// Adam over the trainable variables of one store. Moments are exposed so
/// they can be checkpointed and resumed exactly.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    params: Vec<(String, Tensor)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vs: &VarStore, cfg: AdamConfig) -> Self {
        let params: Vec<(String, Tensor)> = sorted_variables(vs)
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        let m = params.iter().map(|(_, t)| t.zeros_like()).collect();
        let v = params.iter().map(|(_, t)| t.zeros_like()).collect();
        Self {
            cfg,
            step: 0,
            params,
            m,
            v,
        }
    }

    /// Number of scalars this optimizer updates.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    /// Zeroes gradients, backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) {
        self.zero_grad();
        loss.backward();
        self.step();
    }

    pub fn step(&mut self) {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        tch::no_grad(|| {
            for (i, (_, p)) in self.params.iter_mut().enumerate() {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                let _ = m.g_mul_scalar_(b1).g_add_(&(&g * (1.0 - b1)));
                let _ = v.g_mul_scalar_(b2).g_add_(&(&g * &g * (1.0 - b2)));
                let denom = (&*v / bias2).sqrt() + self.cfg.eps;
                let update = (&*m / bias1) / denom * self.cfg.lr;
                let _ = p.g_sub_(&update);
            }
        });
    }

    /// Named moment tensors, prefixed `adam.m.` / `adam.v.`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[i].shallow_clone()));
            out.push((format!("adam.v.{name}"), self.v[i].shallow_clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |key: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.shallow_clone())
                .ok_or(crate::error::CheckpointError::MissingParameter(key))
        };
        for (i, (name, _)) in self.params.iter().enumerate() {
            let m = lookup(format!("adam.m.{name}"))?;
            let v = lookup(format!("adam.v.{name}"))?;
            tch::no_grad(|| {
                self.m[i].copy_(&m);
                self.v[i].copy_(&v);
            });
        }
        self.step = step;
        Ok(())
    }
}
