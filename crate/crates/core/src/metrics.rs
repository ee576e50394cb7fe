//! PSNR and SSIM on the luma channel with a border crop, plus the report
//! written by evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LUMA;
use crate::scale::ScalePair;
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Luma plane of a single image `(1,3,H,W)` or `(1,1,H,W)`, with `crop`
/// pixels removed from each border.
pub fn luma<T: Real>(img: &Tensor<T>, crop: usize) -> Result<(Vec<f64>, usize, usize)> {
    let [n, c, h, w] = img.shape();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::dim(format!(
            "metrics expect one RGB or gray image, got {:?}",
            img.shape()
        )));
    }
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::dim(format!(
            "border crop {crop} leaves nothing of a {h}x{w} image"
        )));
    }
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let mut y = Vec::with_capacity(ch * cw);
    for r in crop..h - crop {
        for x in crop..w - crop {
            let v = if c == 1 {
                img.at([0, 0, r, x]).as_f64()
            } else {
                (0..3)
                    .map(|k| LUMA[k] * img.at([0, k, r, x]).as_f64())
                    .sum()
            };
            y.push(v);
        }
    }
    Ok((y, ch, cw))
}

fn pair<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    crop: usize,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "metric inputs {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let (ya, h, w) = luma(a, crop)?;
    let (yb, _, _) = luma(b, crop)?;
    Ok((ya, yb, h, w))
}

/// `10·log10(1/MSE)` on the cropped luma, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, crop: usize) -> Result<f64> {
    let (ya, yb, _, _) = pair(a, b, crop)?;
    let mse = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable filtering of a `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..k).map(|j| g[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 Gaussian window.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, crop: usize) -> Result<f64> {
    let (x, y, h, w) = pair(a, b, crop)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g);
    let syy = filter_valid(&prod(&y, &y), h, w, &g);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    /// Method label, e.g. `model` or `bicubic`.
    pub method: String,
    pub scale: ScalePair,
    pub crop: usize,
    pub rows: Vec<ImageScore>,
}

impl QualityReport {
    pub fn new(method: impl Into<String>, scale: ScalePair) -> Self {
        QualityReport {
            method: method.into(),
            scale,
            crop: scale.crop_border(),
            rows: Vec::new(),
        }
    }

    /// Scores one SR/HR pair with this report's crop and appends the row.
    pub fn score<T: Real>(
        &mut self,
        image: impl Into<String>,
        sr: &Tensor<T>,
        hr: &Tensor<T>,
    ) -> Result<&ImageScore> {
        let row = ImageScore {
            image: image.into(),
            psnr: psnr(sr, hr, self.crop)?,
            ssim: ssim(sr, hr, self.crop)?,
        };
        self.rows.push(row);
        Ok(self.rows.last().unwrap())
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.image.cmp(&b.image));
    }

    fn mean(&self, f: impl Fn(&ImageScore) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,scale_v,scale_h,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.6}",
                r.image, self.scale.v, self.scale.h, r.psnr, r.ssim
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.image.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!(
            "method {}  scale {}  crop {}\n{:<width$}  {:>9}  {:>7}\n",
            self.method, self.scale, self.crop, "image", "psnr_db", "ssim"
        );
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}", r.image, r.psnr, r.ssim);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    /// Direct evaluation of every window, no separable filtering.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let g1 = gaussian_window();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g1[i] * g1[j];
                        let (x, y) = (a[(oy + i) * w + ox + j], b[(oy + i) * w + ox + j]);
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * x * x;
                        sbb += wt * y * y;
                        sab += wt * x * y;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_form_and_cap() {
        let a = noise([1, 3, 16, 16], 1).map(|v| v * 0.9);
        let b = a.map(|v| v + 1.0 / 255.0);
        let p = psnr(&a, &b, 0).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((p - 48.13).abs() < 0.01);
        assert_eq!(psnr(&a, &a, 2).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&a, &b, 3).unwrap(), psnr(&b, &a, 3).unwrap());
        assert!(psnr(&a, &noise([1, 3, 16, 15], 1), 0).is_err());
        assert!(psnr(&a, &b, 8).is_err());
    }

    #[test]
    fn ssim_matches_direct_windows() {
        for seed in 0..5 {
            let a = noise([1, 3, 24, 20], seed);
            let b = a.map(|v| 1.0 - v);
            let (ya, h, w) = luma(&a, 2).unwrap();
            let (yb, _, _) = luma(&b, 2).unwrap();
            let s = ssim(&a, &b, 2).unwrap();
            assert!((s - ssim_oracle(&ya, &yb, h, w)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s));
            assert_eq!(s, ssim(&b, &a, 2).unwrap());
        }
        let a = noise([1, 3, 16, 16], 9);
        assert!((ssim(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a, 3).is_err());
    }

    #[test]
    fn luma_weights_and_gray_inputs() {
        let red = Tensor::from_fn([1, 3, 2, 2], |[_, c, _, _]| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(luma(&red, 0).unwrap().0, vec![0.299; 4]);
        let gray = noise([1, 1, 4, 4], 2);
        assert_eq!(luma(&gray, 1).unwrap().0.len(), 4);
        assert!(luma(&noise([2, 3, 4, 4], 2), 0).is_err());
    }

    #[test]
    fn report_outputs() {
        let mut r = QualityReport::new("model", ScalePair::new(2.0, 3.0));
        assert_eq!(r.crop, 3);
        let hr = noise([1, 3, 20, 20], 3);
        let sr = hr.map(|v| v * 0.95);
        r.score("b.png", &sr, &hr).unwrap();
        r.score("a.png", &hr, &hr).unwrap();
        r.sort();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "image,scale_v,scale_h,psnr_db,ssim");
        assert!(lines[1].starts_with("a.png,2,3,100.0000,1.000000"));
        assert!(lines[2].starts_with("b.png,2,3,"));
        assert!(r.to_table().contains("mean"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
    }
}
