//! PNG input/output, dataset loading and training-batch sampling.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::resample::resize_to;
use crate::scale::{RoundMode, ScalePair};
use crate::tensor::{Real, Tensor};

/// One HR image, `(1,3,H,W)` in `[0,1]`.
#[derive(Clone, Debug)]
pub struct Image {
    pub name: String,
    pub pixels: Tensor<f32>,
}

impl Image {
    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }
}

/// Decodes a PNG to RGB floats: 8-bit values are divided by 255, 16-bit by
/// 65535, and gray is replicated over the three channels.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        raw[(y * w + x) * 3 + c]
    }))
}

/// Writes the first image of the batch as 8-bit RGB, clamping to `[0,1]`.
pub fn save_png<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::dim(format!(
            "PNG output needs 3 channels, got {:?}",
            img.shape()
        )));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|k| {
            let v = img.at([0, k, y as usize, x as usize]).as_f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Every decodable PNG in `dir`, sorted by file name. Undecodable files are
/// skipped with a warning.
pub fn load_dataset(dir: &Path) -> Result<Vec<Image>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        match load_png(p) {
            Ok(pixels) => images.push(Image {
                name: p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                pixels,
            }),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no decodable PNG images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

/// How the per-batch scale is drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleSampling {
    /// Uniform over a fixed list.
    Fixed(Vec<ScalePair>),
    /// `r_v`, `r_h` independent and uniform on the grid `1.1, 1.2, …, 4.0`.
    Continuous,
}

impl ScaleSampling {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> ScalePair {
        match self {
            ScaleSampling::Fixed(list) => list[rng.gen_range(0..list.len())],
            ScaleSampling::Continuous => {
                let mut g = || (11 + rng.gen_range(0..30u32)) as f64 / 10.0;
                let v = g();
                ScalePair::new(v, g())
            }
        }
    }

    /// Largest factor that can be drawn.
    pub fn max(&self) -> f64 {
        match self {
            ScaleSampling::Fixed(list) => list.iter().map(|s| s.max()).fold(1.0, f64::max),
            ScaleSampling::Continuous => 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSpec {
    pub scales: ScaleSampling,
    pub lr_patch: usize,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub scale: ScalePair,
}

/// Bicubic degradation of an HR patch to exactly `lr_h × lr_w`.
pub fn degrade<T: Real>(
    hr: &Tensor<T>,
    lr_h: usize,
    lr_w: usize,
    scale: ScalePair,
) -> Result<Tensor<T>> {
    resize_to(hr, lr_h, lr_w, ScalePair::new(1.0 / scale.v, 1.0 / scale.h))
}

/// Evaluation pair for a full image: LR is `⌊H/r⌋ × ⌊W/r⌋` and HR is cropped
/// to the model's output size for that LR, `⌊⌊H/r⌋·r⌋`.
pub fn eval_pair(
    hr: &Tensor<f32>,
    scale: ScalePair,
    round: RoundMode,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [_, _, h, w] = hr.shape();
    let lr_dim = |len: usize, r: f64| (len as f64 / r + 1e-9).floor() as usize;
    let (lh, lw) = (lr_dim(h, scale.v), lr_dim(w, scale.h));
    if lh == 0 || lw == 0 {
        return Err(Error::Data(format!(
            "{h}x{w} image is too small for scale {scale}"
        )));
    }
    let (oh, ow) = scale.output_dims(lh, lw, round);
    let crop = crop(hr, 0, 0, oh.min(h), ow.min(w))?;
    let lr = degrade(&crop, lh, lw, scale)?;
    Ok((crop, lr))
}

pub fn crop<T: Real>(
    img: &Tensor<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let [n, c, ih, iw] = img.shape();
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::dim(format!(
            "crop {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"
        )));
    }
    Ok(Tensor::from_fn([n, c, h, w], |[b, k, y, x]| {
        img.at([b, k, y0 + y, x0 + x])
    }))
}

const MAX_DRAW_FAILURES: usize = 100;

/// One scale for the whole batch; each item is a random crop of
/// `⌊lr_patch·r⌋` HR pixels from a random image, degraded to `lr_patch`.
pub fn sample_batch(dataset: &[Image], spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let scale = spec.scales.draw(rng);
    let (ch, cw) = scale.output_dims(spec.lr_patch, spec.lr_patch, RoundMode::Floor);
    let mut hrs = Vec::with_capacity(spec.batch);
    let mut lrs = Vec::with_capacity(spec.batch);
    let mut failures = 0;
    while hrs.len() < spec.batch {
        let img = &dataset[rng.gen_range(0..dataset.len())];
        if img.height() < ch || img.width() < cw {
            failures += 1;
            if failures >= MAX_DRAW_FAILURES {
                return Err(Error::Data(format!(
                    "no image can supply a {ch}x{cw} crop at scale {scale} after {failures} draws"
                )));
            }
            continue;
        }
        let y0 = rng.gen_range(0..=img.height() - ch);
        let x0 = rng.gen_range(0..=img.width() - cw);
        let hr = crop(&img.pixels, y0, x0, ch, cw)?;
        lrs.push(degrade(&hr, spec.lr_patch, spec.lr_patch, scale)?);
        hrs.push(hr);
    }
    Ok(Batch {
        lr: Tensor::stack_batch(&lrs)?,
        hr: Tensor::stack_batch(&hrs)?,
        scale,
    })
}

/// Deterministic test scene: a smooth colour gradient overlaid with
/// antialiased rectangles and discs of random colour.
pub fn synthetic(name: &str, height: usize, width: usize, seed: u64) -> Image {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || {
        [
            rng.gen_range(0.05..0.95f32),
            rng.gen_range(0.05..0.95f32),
            rng.gen_range(0.05..0.95f32),
        ]
    };
    let (c0, c1) = (color(), color());
    let max_extent = (height.min(width) as f32 / 4.0).max(2.0);
    let min_extent = max_extent.min(8.0) / 2.0;
    let shapes: Vec<(bool, [f32; 4], [f32; 3])> = (0..10)
        .map(|_| {
            let disc = rng.gen_bool(0.5);
            let cy = rng.gen_range(0.0..height as f32);
            let cx = rng.gen_range(0.0..width as f32);
            let a = rng.gen_range(min_extent..max_extent);
            let b = rng.gen_range(min_extent..max_extent);
            let col = [
                rng.gen_range(0.05..0.95f32),
                rng.gen_range(0.05..0.95f32),
                rng.gen_range(0.05..0.95f32),
            ];
            (disc, [cy, cx, a, b], col)
        })
        .collect();
    const SS: usize = 4;
    let mut pixels = Tensor::zeros([1, 3, height, width]);
    let plane = height * width;
    let d = pixels.data_mut();
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0f32; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                    let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                    let t = (py / height as f32 + px / width as f32) / 2.0;
                    let mut v: [f32; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
                    for (disc, [cy, cx, a, b], col) in &shapes {
                        let (dy, dx) = (py - cy, px - cx);
                        let inside = if *disc {
                            (dy / a).powi(2) + (dx / b).powi(2) <= 1.0
                        } else {
                            dy.abs() <= *a && dx.abs() <= *b
                        };
                        if inside {
                            v = *col;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += v[c];
                    }
                }
            }
            for c in 0..3 {
                d[c * plane + y * width + x] = acc[c] / (SS * SS) as f32;
            }
        }
    }
    Image {
        name: name.to_string(),
        pixels,
    }
}
