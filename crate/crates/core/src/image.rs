//! Image containers. Restoration I/O lives in `[0,1]`, diffusion math in
//! `[-1,1]`; the conversion between them is the affine map `v -> 2v - 1`.

use std::path::Path;

use tch::{Kind, Tensor};

use crate::error::{ensure_arg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Range {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl Range {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Range::Unit => (0.0, 1.0),
            Range::Symmetric => (-1.0, 1.0),
        }
    }
}

/// Rank-4 `(N, C, H, W)` batch tagged with its value range.
#[derive(Debug)]
pub struct ImageBatch {
    data: Tensor,
    range: Range,
}

impl Clone for ImageBatch {
    fn clone(&self) -> Self {
        Self {
            data: self.data.shallow_clone(),
            range: self.range,
        }
    }
}

impl ImageBatch {
    pub fn new(data: Tensor, range: Range) -> Result<Self> {
        ensure_arg!(
            data.dim() == 4,
            "image batch must be rank 4, got shape {:?}",
            data.size()
        );
        ensure_arg!(
            data.size()[1] == 3,
            "image batch must have 3 channels, got {}",
            data.size()[1]
        );
        Ok(Self { data, range })
    }

    pub fn unit(data: Tensor) -> Result<Self> {
        Self::new(data, Range::Unit)
    }

    pub fn symmetric(data: Tensor) -> Result<Self> {
        Self::new(data, Range::Symmetric)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [i64; 4] {
        let s = self.data.size();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn to_symmetric(&self) -> ImageBatch {
        match self.range {
            Range::Symmetric => self.clone(),
            Range::Unit => ImageBatch {
                data: to_symmetric(&self.data),
                range: Range::Symmetric,
            },
        }
    }

    pub fn to_unit(&self) -> ImageBatch {
        match self.range {
            Range::Unit => self.clone(),
            Range::Symmetric => ImageBatch {
                data: to_unit(&self.data),
                range: Range::Unit,
            },
        }
    }

    pub fn clamped(&self) -> ImageBatch {
        let (lo, hi) = self.range.bounds();
        ImageBatch {
            data: self.data.clamp(lo, hi),
            range: self.range,
        }
    }

    pub fn select(&self, indices: &[i64]) -> ImageBatch {
        let idx = Tensor::from_slice(indices);
        ImageBatch {
            data: self.data.index_select(0, &idx),
            range: self.range,
        }
    }

    pub fn narrow(&self, start: i64, len: i64) -> ImageBatch {
        ImageBatch {
            data: self.data.narrow(0, start, len),
            range: self.range,
        }
    }

    pub fn cat(batches: &[ImageBatch]) -> Result<ImageBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Argument("cannot concatenate zero batches".into()))?;
        ensure_arg!(
            batches.iter().all(|b| b.range == first.range),
            "cannot concatenate batches with different ranges"
        );
        let tensors: Vec<&Tensor> = batches.iter().map(|b| &b.data).collect();
        Ok(ImageBatch {
            data: Tensor::cat(&tensors, 0),
            range: first.range,
        })
    }

    /// Stacks CHW images into a unit-range batch.
    pub fn from_images(images: &[Image]) -> Result<ImageBatch> {
        if images.is_empty() {
            return ImageBatch::unit(Tensor::zeros([0, 3, 0, 0], (Kind::Float, tch::Device::Cpu)));
        }
        let (h, w) = (images[0].height, images[0].width);
        ensure_arg!(
            images.iter().all(|im| im.height == h && im.width == w),
            "images in a batch must share one resolution"
        );
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            data.extend_from_slice(&im.data);
        }
        ImageBatch::unit(Tensor::from_slice(&data).reshape([
            images.len() as i64,
            3,
            h as i64,
            w as i64,
        ]))
    }

    /// Splits a unit-range batch back into CHW images.
    pub fn to_images(&self) -> Vec<Image> {
        let unit = self.to_unit();
        let [n, _, h, w] = unit.shape();
        let flat: Vec<f32> = tensor_to_vec(&unit.data.to_kind(Kind::Float));
        let per = (3 * h * w) as usize;
        (0..n as usize)
            .map(|i| Image {
                height: h as usize,
                width: w as usize,
                data: flat[i * per..(i + 1) * per].to_vec(),
            })
            .collect()
    }
}

pub fn to_symmetric(t: &Tensor) -> Tensor {
    t * 2.0 - 1.0
}

pub fn to_unit(t: &Tensor) -> Tensor {
    (t + 1.0) / 2.0
}

pub fn tensor_to_vec(t: &Tensor) -> Vec<f32> {
    let t = t.to_kind(Kind::Float).contiguous().view(-1);
    Vec::<f32>::try_from(&t).expect("float tensor converts to Vec<f32>")
}

pub fn tensor_to_vec_f64(t: &Tensor) -> Vec<f64> {
    let t = t.to_kind(Kind::Double).contiguous().view(-1);
    Vec::<f64>::try_from(&t).expect("double tensor converts to Vec<f64>")
}

/// A single 3-channel image stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for c in 0..3 {
            data[c * height * width..(c + 1) * height * width].fill(rgb[c]);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Image {
        let mut out = Image::filled(size, size, [0.0; 3]);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f32::from(p.0[c]) / 255.0);
            }
        }
        out
    }
}

/// Writes rows of images side by side into one PNG grid.
pub fn save_grid(rows: &[Vec<Image>], path: &Path) -> Result<()> {
    let cell = rows
        .iter()
        .flatten()
        .map(|im| im.height.max(im.width))
        .max()
        .unwrap_or(1) as u32;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1) as u32;
    let pad = 2;
    let mut canvas = image::RgbImage::from_pixel(
        cols * (cell + pad) + pad,
        rows.len().max(1) as u32 * (cell + pad) + pad,
        image::Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let tile = im.to_rgb8();
            image::imageops::replace(
                &mut canvas,
                &tile,
                i64::from(pad + c as u32 * (cell + pad)),
                i64::from(pad + r as u32 * (cell + pad)),
            );
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_conversion_is_exact_inverse() {
        let x = Tensor::from_slice(&[0.0f32, 0.25, 0.5, 1.0]).reshape([1, 1, 2, 2]).repeat([1, 3, 1, 1]);
        let b = ImageBatch::unit(x.shallow_clone()).unwrap();
        let back = b.to_symmetric().to_unit();
        assert!(back.tensor().equal(&x));
        let s = b.to_symmetric();
        assert_eq!(s.tensor().double_value(&[0, 0, 0, 0]), -1.0);
        assert_eq!(s.tensor().double_value(&[0, 0, 1, 1]), 1.0);
    }

    #[test]
    fn images_round_trip_through_batch() {
        let mut im = Image::filled(4, 4, [0.1, 0.2, 0.3]);
        im.set(1, 2, 3, 0.9);
        let batch = ImageBatch::from_images(&[im.clone(), im.clone()]).unwrap();
        assert_eq!(batch.shape(), [2, 3, 4, 4]);
        assert_eq!(batch.to_images()[1], im);
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(ImageBatch::unit(Tensor::zeros([1, 1, 4, 4], (Kind::Float, tch::Device::Cpu))).is_err());
    }
}
