//! Separable bicubic resampling (Keys, a = −0.5) with center-aligned
//! coordinates and edge clamping. Downscaling widens the kernel by the
//! reduction factor so that it also low-pass filters.

use crate::conv::for_each_plane;
use crate::error::{Error, Result};
use crate::scale::ScalePair;
use crate::tensor::{Real, Tensor};

pub const KEYS_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Keys cubic convolution kernel.
pub fn keys(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(index, weight)` per output position, for an axis whose
/// output/input size ratio is `ratio`.
pub fn axis_taps(in_len: usize, out_len: usize, ratio: f64) -> Vec<Vec<(usize, f64)>> {
    let support = if ratio < 1.0 { 2.0 / ratio } else { 2.0 };
    let stretch = ratio.min(1.0);
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / ratio - 0.5;
            let lo = (src - support).ceil() as i64;
            let hi = (src + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for j in lo..=hi {
                let w = keys((src - j as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|t| t.0 == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resizes to exactly `out_h × out_w`, mapping coordinates with the nominal
/// per-axis ratio `ratio` (output pixels per input pixel).
pub fn resize_to<T: Real>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    ratio: ScalePair,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "bicubic resize {h}x{w} -> {out_h}x{out_w}: dimensions must be >= 1"
        )));
    }
    if !(ratio.v > 0.0 && ratio.h > 0.0 && ratio.v.is_finite() && ratio.h.is_finite()) {
        return Err(Error::arg(format!(
            "bicubic resize ratio {ratio} must be positive"
        )));
    }
    let conv = |taps: Vec<Vec<(usize, f64)>>| -> Vec<Vec<(usize, T)>> {
        taps.into_iter()
            .map(|t| t.into_iter().map(|(i, w)| (i, T::of(w))).collect())
            .collect()
    };
    let rows = conv(axis_taps(h, out_h, ratio.v));
    let cols = conv(axis_taps(w, out_w, ratio.h));
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for_each_plane(
        &mut out,
        out_h * out_w,
        n * c * out_h * out_w * 16,
        |p, plane| {
            let src = &img.data()[p * h * w..(p + 1) * h * w];
            let mut tmp = vec![T::zero(); h * out_w];
            for y in 0..h {
                let srow = &src[y * w..(y + 1) * w];
                for (ox, taps) in cols.iter().enumerate() {
                    tmp[y * out_w + ox] =
                        taps.iter().fold(T::zero(), |s, &(i, wt)| s + wt * srow[i]);
                }
            }
            for (oy, taps) in rows.iter().enumerate() {
                let orow = &mut plane[oy * out_w..(oy + 1) * out_w];
                for &(i, wt) in taps {
                    let trow = &tmp[i * out_w..(i + 1) * out_w];
                    for (o, &t) in orow.iter_mut().zip(trow) {
                        *o = *o + wt * t;
                    }
                }
            }
        },
    );
    Tensor::from_vec([n, c, out_h, out_w], out)
}

/// Upscaling yields `⌊in·r⌋`, downscaling `⌊in/r⌋` per axis.
pub fn bicubic_resample<T: Real>(
    img: &Tensor<T>,
    scale: ScalePair,
    direction: Direction,
) -> Result<Tensor<T>> {
    if !(scale.v >= 1.0 && scale.h >= 1.0) {
        return Err(Error::Range(format!(
            "bicubic scale {scale} is below the lower bound 1"
        )));
    }
    let [_, _, h, w] = img.shape();
    let ratio = match direction {
        Direction::Up => scale,
        Direction::Down => ScalePair::new(1.0 / scale.v, 1.0 / scale.h),
    };
    let dims = |len: usize, r: f64| (len as f64 * r + 1e-9).floor() as usize;
    resize_to(img, dims(h, ratio.v), dims(w, ratio.h), ratio)
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

    #[test]
    fn keys_kernel_values() {
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
        assert!((keys(0.5) - 0.5625).abs() < 1e-15);
        assert!((keys(1.5) + 0.0625).abs() < 1e-15);
        for k in 0..10 {
            let f = k as f64 / 10.0;
            let s: f64 = (-1..=2).map(|j| keys(f - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = noise([2, 3, 7, 9], 1);
        let out = bicubic_resample(&img, ScalePair::uniform(1.0), Direction::Up).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
        let out = bicubic_resample(&img, ScalePair::uniform(1.0), Direction::Down).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn constants_survive_any_scale() {
        let img = Tensor::full([1, 3, 13, 11], 0.42f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = ScalePair::new(rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
            for d in [Direction::Up, Direction::Down] {
                let out = bicubic_resample(&img, s, d).unwrap();
                assert!(
                    out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12),
                    "{s} {d:?}"
                );
            }
        }
        let up = bicubic_resample(&img, ScalePair::uniform(3.0), Direction::Up).unwrap();
        let back = bicubic_resample(&up, ScalePair::uniform(3.0), Direction::Down).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn dims_and_errors() {
        let img = noise([1, 3, 64, 64], 3);
        let up = bicubic_resample(&img, ScalePair::uniform(3.3), Direction::Up).unwrap();
        assert_eq!(up.shape(), [1, 3, 211, 211]);
        let down = bicubic_resample(&img, ScalePair::new(2.0, 3.0), Direction::Down).unwrap();
        assert_eq!(down.shape(), [1, 3, 32, 21]);
        let tiny = noise([1, 3, 2, 2], 3);
        assert!(bicubic_resample(&tiny, ScalePair::uniform(3.0), Direction::Down).is_err());
        assert!(matches!(
            bicubic_resample(&img, ScalePair::uniform(0.5), Direction::Up),
            Err(Error::Range(_))
        ));
    }

    /// Scalar reference: evaluates the widened Keys kernel directly.
    #[test]
    fn checkerboard_downscale_matches_scalar_reference() {
        let img = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| ((x + y) % 2) as f64);
        let out = bicubic_resample(&img, ScalePair::uniform(2.0), Direction::Down).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        let weights = |i: usize| -> Vec<f64> {
            let src = (i as f64 + 0.5) * 2.0 - 0.5;
            let mut w = [0.0; 4];
            for j in -4i64..=8 {
                let k = keys((src - j as f64) * 0.5);
                w[j.clamp(0, 3) as usize] += k;
            }
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        };
        for oy in 0..2 {
            for ox in 0..2 {
                let (wy, wx) = (weights(oy), weights(ox));
                let mut expect = 0.0;
                for (y, a) in wy.iter().enumerate() {
                    for (x, b) in wx.iter().enumerate() {
                        expect += a * b * img.at([0, 0, y, x]);
                    }
                }
                assert!((out.at([0, 0, oy, ox]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upscale_interpolates_linear_ramps() {
        let img = Tensor::from_fn([1, 1, 8, 8], |[_, _, _, x]| x as f64 * 0.1);
        let out = bicubic_resample(&img, ScalePair::uniform(2.0), Direction::Up).unwrap();
        for x in 4..12 {
            let src = (x as f64 + 0.5) / 2.0 - 0.5;
            assert!((out.at([0, 0, 5, x]) - src * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_to_exact_dims() {
        let img = noise([1, 3, 43, 43], 4);
        let lr = resize_to(&img, 16, 16, ScalePair::uniform(1.0 / 2.7)).unwrap();
        assert_eq!(lr.shape(), [1, 3, 16, 16]);
        assert!(lr.data().iter().all(|&v| (-0.2..1.2).contains(&v)));
    }
}
