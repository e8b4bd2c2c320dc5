//! Procedural labelled shapes corpus and parametric degradations.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_config, Error, Result};
use crate::image::{Image, ImageBatch};
use crate::rng::{Rng, SeedBundle};

pub const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "bar", "star",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapesDatasetSpec {
    pub n_images: usize,
    pub resolution: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_classes() -> usize {
    8
}

fn default_split() -> Split {
    Split::Train
}

impl ShapesDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(
            (1..=SHAPE_NAMES.len()).contains(&self.n_classes),
            "dataset.n_classes must be in [1, {}], got {}",
            SHAPE_NAMES.len(),
            self.n_classes
        );
        ensure_config!(self.resolution >= 8, "dataset.resolution must be at least 8, got {}", self.resolution);
        Ok(())
    }

    pub fn with_split(&self, split: Split, n_images: usize) -> Self {
        Self {
            split,
            n_images,
            ..*self
        }
    }

    fn image_rng(&self, i: usize) -> Rng {
        SeedBundle::new(self.seed)
            .child(&self.split.to_string())
            .stream(&format!("shape-{i}"))
    }
}

/// Clean images with their shape labels.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub spec: ShapesDatasetSpec,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self) -> Result<ImageBatch> {
        ImageBatch::from_images(&self.images)
    }

    pub fn labels_i64(&self) -> Vec<i64> {
        self.labels.iter().map(|&l| l as i64).collect()
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Membership test in shape-normalized coordinates (radius 1).
fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.8 && v >= -1.0 && u.abs() <= (v + 1.0) / 1.8 * 0.95,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => (0.3..=1.0).contains(&r2),
        6 => u.abs() <= 1.0 && v.abs() <= 0.35,
        _ => {
            let star: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let rad = if k % 2 == 0 { 1.0 } else { 0.45 };
                    let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (rad * a.cos(), rad * a.sin())
                })
                .collect();
            point_in_polygon(u, v, &star)
        }
    }
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Smooth random field: a sum of low-frequency plane waves, roughly in `[-1, 1]`.
fn smooth_field(rng: &mut Rng, res: usize, waves: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64)> = (0..waves)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / res as f64;
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            out[y * res + x] = params
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / waves as f64;
        }
    }
    out
}

fn render_shape(rng: &mut Rng, res: usize, class: usize) -> Image {
    let base: [f32; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    let texture: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(rng, res, 3)).collect();
    let mut img = Image::filled(res, res, [0.0; 3]);
    for c in 0..3 {
        for i in 0..res * res {
            img.data[c * res * res + i] = (base[c] + 0.12 * texture[c][i] as f32).clamp(0.0, 1.0);
        }
    }
    let color = loop {
        let c = [rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32)];
        if (luminance(c) - luminance(base)).abs() >= 0.25 {
            break c;
        }
    };
    let r = rng.gen_range(0.28..0.42) * res as f64;
    let cx = rng.gen_range(r..res as f64 - r);
    let cy = rng.gen_range(r..res as f64 - r);
    const SS: usize = 3;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside_shape(class, (px - cx) / r, (py - cy) / r) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f32 / (SS * SS) as f32;
                for (c, &col) in color.iter().enumerate() {
                    let v = img.get(c, y, x);
                    img.set(c, y, x, v * (1.0 - a) + col * a);
                }
            }
        }
    }
    img
}

/// Deterministic corpus of coloured shapes over smooth textured backgrounds.
/// The label is the shape type.
pub fn generate_shapes(spec: &ShapesDatasetSpec) -> Result<ShapesDataset> {
    spec.validate()?;
    let (images, labels) = (0..spec.n_images)
        .map(|i| {
            let mut rng = spec.image_rng(i);
            let label = rng.gen_range(0..spec.n_classes);
            (render_shape(&mut rng, spec.resolution, label), label)
        })
        .unzip();
    Ok(ShapesDataset {
        spec: *spec,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Normalized vertical gradient plus low-frequency noise.
    Gradient,
    /// Constant depth, i.e. spatially uniform transmission.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    LowLight { gamma: f64, gain: f64, read_noise_sigma: f64 },
    Haze { beta: f64, airlight: f64, depth_mode: DepthMode },
    Rain { density: f64, length: f64, angle_deg: f64, intensity: f64 },
    Noise { sigma: f64 },
    Blur { sigma: f64 },
}

impl Degradation {
    pub fn kind(&self) -> &'static str {
        match self {
            Degradation::LowLight { .. } => "lowlight",
            Degradation::Haze { .. } => "haze",
            Degradation::Rain { .. } => "rain",
            Degradation::Noise { .. } => "noise",
            Degradation::Blur { .. } => "blur",
        }
    }

    /// Default severity for a kind name.
    pub fn default_for(kind: &str) -> Result<Self> {
        Ok(match kind {
            "lowlight" => Degradation::LowLight {
                gamma: 2.0,
                gain: 0.4,
                read_noise_sigma: 0.02,
            },
            "haze" => Degradation::Haze {
                beta: 1.2,
                airlight: 0.85,
                depth_mode: DepthMode::Gradient,
            },
            "rain" => Degradation::Rain {
                density: 0.02,
                length: 8.0,
                angle_deg: 15.0,
                intensity: 0.6,
            },
            "noise" => Degradation::Noise { sigma: 0.1 },
            "blur" => Degradation::Blur { sigma: 1.0 },
            other => {
                return Err(Error::Config(format!(
                    "unknown degradation kind `{other}`; expected one of lowlight, haze, rain, noise, blur"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::LowLight { gamma, gain, read_noise_sigma } => {
                ensure_config!(gamma > 0.0 && gain > 0.0, "lowlight gamma and gain must be positive");
                ensure_config!(read_noise_sigma >= 0.0, "lowlight read_noise_sigma must be >= 0");
            }
            Degradation::Haze { beta, airlight, .. } => {
                ensure_config!(beta >= 0.0, "haze beta must be >= 0");
                ensure_config!((0.0..=1.0).contains(&airlight), "haze airlight must lie in [0, 1]");
            }
            Degradation::Rain { density, length, intensity, .. } => {
                ensure_config!((0.0..=1.0).contains(&density), "rain density must lie in [0, 1]");
                ensure_config!(length >= 0.0 && intensity >= 0.0, "rain length and intensity must be >= 0");
            }
            Degradation::Noise { sigma } | Degradation::Blur { sigma } => {
                ensure_config!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Flat on-disk form of [`DegradationSpec`]; only the fields of the chosen
/// kind may be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawDegradation {
    kind: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    read_noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    airlight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_mode: Option<DepthMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intensity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDegradation", into = "RawDegradation")]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl TryFrom<RawDegradation> for DegradationSpec {
    type Error = Error;

    fn try_from(raw: RawDegradation) -> Result<Self> {
        let mut d = Degradation::default_for(&raw.kind)?;
        let stray = |name: &str, present: bool| -> Result<()> {
            ensure_config!(!present, "degradation.{name} does not apply to kind `{}`", raw.kind);
            Ok(())
        };
        let lowlight = matches!(d, Degradation::LowLight { .. });
        let haze = matches!(d, Degradation::Haze { .. });
        let rain = matches!(d, Degradation::Rain { .. });
        let sigma_kind = matches!(d, Degradation::Noise { .. } | Degradation::Blur { .. });
        stray("gamma", raw.gamma.is_some() && !lowlight)?;
        stray("gain", raw.gain.is_some() && !lowlight)?;
        stray("read_noise_sigma", raw.read_noise_sigma.is_some() && !lowlight)?;
        stray("beta", raw.beta.is_some() && !haze)?;
        stray("airlight", raw.airlight.is_some() && !haze)?;
        stray("depth_mode", raw.depth_mode.is_some() && !haze)?;
        stray("density", raw.density.is_some() && !rain)?;
        stray("length", raw.length.is_some() && !rain)?;
        stray("angle_deg", raw.angle_deg.is_some() && !rain)?;
        stray("intensity", raw.intensity.is_some() && !rain)?;
        stray("sigma", raw.sigma.is_some() && !sigma_kind)?;
        match &mut d {
            Degradation::LowLight { gamma, gain, read_noise_sigma } => {
                *gamma = raw.gamma.unwrap_or(*gamma);
                *gain = raw.gain.unwrap_or(*gain);
                *read_noise_sigma = raw.read_noise_sigma.unwrap_or(*read_noise_sigma);
            }
            Degradation::Haze { beta, airlight, depth_mode } => {
                *beta = raw.beta.unwrap_or(*beta);
                *airlight = raw.airlight.unwrap_or(*airlight);
                *depth_mode = raw.depth_mode.unwrap_or(*depth_mode);
            }
            Degradation::Rain { density, length, angle_deg, intensity } => {
                *density = raw.density.unwrap_or(*density);
                *length = raw.length.unwrap_or(*length);
                *angle_deg = raw.angle_deg.unwrap_or(*angle_deg);
                *intensity = raw.intensity.unwrap_or(*intensity);
            }
            Degradation::Noise { sigma } | Degradation::Blur { sigma } => {
                *sigma = raw.sigma.unwrap_or(*sigma);
            }
        }
        d.validate()?;
        Ok(DegradationSpec {
            degradation: d,
            seed: raw.seed,
        })
    }
}

impl From<DegradationSpec> for RawDegradation {
    fn from(spec: DegradationSpec) -> Self {
        let mut raw = RawDegradation {
            kind: spec.degradation.kind().to_string(),
            seed: spec.seed,
            ..Default::default()
        };
        match spec.degradation {
            Degradation::LowLight { gamma, gain, read_noise_sigma } => {
                raw.gamma = Some(gamma);
                raw.gain = Some(gain);
                raw.read_noise_sigma = Some(read_noise_sigma);
            }
            Degradation::Haze { beta, airlight, depth_mode } => {
                raw.beta = Some(beta);
                raw.airlight = Some(airlight);
                raw.depth_mode = Some(depth_mode);
            }
            Degradation::Rain { density, length, angle_deg, intensity } => {
                raw.density = Some(density);
                raw.length = Some(length);
                raw.angle_deg = Some(angle_deg);
                raw.intensity = Some(intensity);
            }
            Degradation::Noise { sigma } | Degradation::Blur { sigma } => raw.sigma = Some(sigma),
        }
        raw
    }
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        Self { degradation, seed }
    }

    pub fn kind(&self) -> &'static str {
        self.degradation.kind()
    }

    fn image_rng(&self, i: usize) -> Rng {
        SeedBundle::new(self.seed).stream(&format!("degrade-{i}"))
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Depth proxy in `[0.25, 1]`, larger toward the top of the frame.
fn depth_proxy(rng: &mut Rng, h: usize, w: usize, mode: DepthMode) -> Vec<f64> {
    match mode {
        DepthMode::Uniform => vec![1.0; h * w],
        DepthMode::Gradient => {
            let noise = smooth_field(rng, h.max(w), 2);
            let raw: Vec<f64> = (0..h * w)
                .map(|i| {
                    let y = (i / w) as f64 / (h - 1).max(1) as f64;
                    0.75 * (1.0 - y) + 0.25 * noise[(i / w) * h.max(w) + i % w]
                })
                .collect();
            let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = (hi - lo).max(1e-12);
            raw.iter().map(|v| 0.25 + 0.75 * (v - lo) / span).collect()
        }
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let acc: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, wgt)| {
                            let o = k as isize - radius;
                            let (yy, xx) = if horizontal {
                                (y, (x + o).clamp(0, w - 1))
                            } else {
                                ((y + o).clamp(0, h - 1), x)
                            };
                            wgt * f64::from(src.get(c, yy as usize, xx as usize))
                        })
                        .sum();
                    out.set(c, y as usize, x as usize, (acc / norm) as f32);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn rain_layer(rng: &mut Rng, h: usize, w: usize, density: f64, length: f64, angle_deg: f64, intensity: f64) -> Vec<f64> {
    let mut layer = vec![0.0; h * w];
    let count = (density * (h * w) as f64).round() as usize;
    for _ in 0..count {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(-length..h as f64);
        let angle = (angle_deg + rng.gen_range(-5.0..5.0)).to_radians();
        let value = intensity * rng.gen_range(0.6..1.0);
        let (dx, dy) = (angle.sin(), angle.cos());
        let steps = (2.0 * length).ceil() as usize;
        for s in 0..=steps {
            let d = s as f64 * 0.5;
            let (x, y) = (x0 + d * dx, y0 + d * dy);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                layer[i] = f64::max(layer[i], value);
            }
        }
    }
    layer
}

/// Applies one degradation to a single image with the given rng.
pub fn degrade_image(x: &Image, d: &Degradation, rng: &mut Rng) -> Image {
    let (h, w) = (x.height, x.width);
    let mut y = x.clone();
    match *d {
        Degradation::LowLight { gamma, gain, read_noise_sigma } => {
            for v in &mut y.data {
                let mut out = (gain * f64::from(*v)).powf(gamma);
                if read_noise_sigma > 0.0 {
                    out += read_noise_sigma * gaussian(rng);
                }
                *v = out as f32;
            }
        }
        Degradation::Haze { beta, airlight, depth_mode } => {
            let depth = depth_proxy(rng, h, w, depth_mode);
            for c in 0..3 {
                for (i, dep) in depth.iter().enumerate() {
                    let tr = if beta.is_infinite() { 0.0 } else { (-beta * dep).exp() };
                    let j = f64::from(y.data[c * h * w + i]);
                    y.data[c * h * w + i] = (j * tr + airlight * (1.0 - tr)) as f32;
                }
            }
        }
        Degradation::Rain { density, length, angle_deg, intensity } => {
            let layer = rain_layer(rng, h, w, density, length, angle_deg, intensity);
            for c in 0..3 {
                for (i, l) in layer.iter().enumerate() {
                    y.data[c * h * w + i] += *l as f32;
                }
            }
        }
        Degradation::Noise { sigma } => {
            if sigma > 0.0 {
                for v in &mut y.data {
                    *v += (sigma * gaussian(rng)) as f32;
                }
            }
        }
        Degradation::Blur { sigma } => y = gaussian_blur(x, sigma),
    }
    y.clamp_unit();
    y
}

/// Degrades every image of a unit-range batch; image `i` draws from its own
/// substream of `d.seed`.
pub fn degrade(x: &ImageBatch, d: &DegradationSpec) -> Result<ImageBatch> {
    let images = degrade_images(&x.to_images(), d);
    ImageBatch::from_images(&images)
}

pub fn degrade_images(images: &[Image], d: &DegradationSpec) -> Vec<Image> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| degrade_image(im, &d.degradation, &mut d.image_rng(i)))
        .collect()
}

/// Aligned degraded/clean/label triples.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub degraded: Vec<Image>,
    pub clean: Vec<Image>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub degraded: Image,
    pub clean: Image,
    pub label: usize,
}

pub fn make_pairs(spec: &ShapesDatasetSpec, d: &DegradationSpec) -> Result<PairedDataset> {
    let clean = generate_shapes(spec)?;
    Ok(PairedDataset::from_clean(&clean, d))
}

impl PairedDataset {
    pub fn from_clean(clean: &ShapesDataset, d: &DegradationSpec) -> Self {
        Self {
            degraded: degrade_images(&clean.images, d),
            clean: clean.images.clone(),
            labels: clean.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn get(&self, i: usize) -> Pair {
        Pair {
            degraded: self.degraded[i].clone(),
            clean: self.clean[i].clone(),
            label: self.labels[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Pair> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Endless batch stream: reshuffled every epoch from `order_rng`, with
    /// optional aligned random crops drawn from `crop_rng`.
    pub fn stream(&self, batch_size: usize, patch: Option<usize>, order_rng: Rng, crop_rng: Rng) -> PairStream<'_> {
        PairStream {
            data: self,
            batch_size,
            patch,
            order_rng,
            crop_rng,
            order: Vec::new(),
            cursor: 0,
        }
    }
}

/// Uniform crop origin such that a `size` patch fits inside `(h, w)`.
pub fn crop_origin(rng: &mut Rng, h: usize, w: usize, size: usize) -> (usize, usize) {
    (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))
}

pub struct PairStream<'a> {
    data: &'a PairedDataset,
    batch_size: usize,
    patch: Option<usize>,
    order_rng: Rng,
    crop_rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// One training batch.
pub struct PairBatch {
    pub degraded: ImageBatch,
    pub clean: ImageBatch,
    pub labels: Vec<usize>,
}

impl PairStream<'_> {
    pub fn rng_states(&self) -> (crate::rng::StreamState, crate::rng::StreamState) {
        (
            crate::rng::StreamState::capture(&self.order_rng),
            crate::rng::StreamState::capture(&self.crop_rng),
        )
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.order_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        if self.data.is_empty() {
            return Err(Error::Data("cannot draw batches from an empty dataset".into()));
        }
        let mut degraded = Vec::with_capacity(self.batch_size);
        let mut clean = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = self.next_index();
            let (y, x) = (&self.data.degraded[i], &self.data.clean[i]);
            match self.patch {
                Some(p) if p < x.height || p < x.width => {
                    let (top, left) = crop_origin(&mut self.crop_rng, x.height, x.width, p);
                    degraded.push(y.crop(top, left, p));
                    clean.push(x.crop(top, left, p));
                }
                _ => {
                    degraded.push(y.clone());
                    clean.push(x.clone());
                }
            }
            labels.push(self.data.labels[i]);
        }
        Ok(PairBatch {
            degraded: ImageBatch::from_images(&degraded)?,
            clean: ImageBatch::from_images(&clean)?,
            labels,
        })
    }
}

/// Writes a split as PNG files plus a tab-separated `index.txt`
/// (`filename<TAB>label<TAB>seed`).
pub fn write_cache(dir: &Path, dataset: &ShapesDataset) -> Result<()> {
    let split_dir = dir.join(dataset.spec.split.to_string());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let mut index = String::from("filename\tlabel\tseed\n");
    for (i, (im, label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let name = format!("{i:06}.png");
        let path = split_dir.join(&name);
        im.to_rgb8()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        index.push_str(&format!("{name}\t{label}\t{}\n", dataset.spec.seed));
    }
    let path = split_dir.join("index.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}

/// Reads a cached split back: images and labels in index order.
pub fn read_cache(split_dir: &Path) -> Result<(Vec<Image>, Vec<usize>)> {
    let index_path = split_dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let mut cols = line.split('\t');
        let (Some(name), Some(label)) = (cols.next(), cols.next()) else {
            return Err(Error::Data(format!("malformed index line `{line}`")));
        };
        images.push(read_png(&split_dir.join(name))?);
        labels.push(
            label
                .parse()
                .map_err(|_| Error::Data(format!("bad label `{label}` in {}", index_path.display())))?,
        );
    }
    Ok((images, labels))
}

/// Generic paired-folder loader: `root/degraded/<name>.png` matched with
/// `root/clean/<name>.png`. Labels are unknown and set to 0.
pub fn load_paired_folder(root: &Path) -> Result<PairedDataset> {
    let clean_dir = root.join("clean");
    let mut names: Vec<String> = fs::read_dir(&clean_dir)
        .map_err(|e| Error::io(&clean_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut out = PairedDataset {
        degraded: Vec::new(),
        clean: Vec::new(),
        labels: Vec::new(),
    };
    for name in names {
        let degraded = root.join("degraded").join(&name);
        if !degraded.is_file() {
            return Err(Error::Data(format!("no degraded counterpart for {name}")));
        }
        out.clean.push(read_png(&clean_dir.join(&name))?);
        out.degraded.push(read_png(&degraded)?);
        out.labels.push(0);
    }
    Ok(out)
}
