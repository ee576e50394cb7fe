//! Training objective: L1 reconstruction plus the gradient-variance term,
//! which compares patchwise variances of Sobel gradients of the luma.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Real, Tensor};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GvConfig {
    /// Side of the non-overlapping variance patches.
    pub window: usize,
    pub lambda_gv: f64,
}

impl Default for GvConfig {
    fn default() -> Self {
        GvConfig {
            window: 8,
            lambda_gv: 0.01,
        }
    }
}

impl GvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::config(
                "gv_window",
                format!("must be >= 2, got {}", self.window),
            ));
        }
        if !(self.lambda_gv >= 0.0 && self.lambda_gv.is_finite()) {
            return Err(Error::config(
                "lambda_gv",
                format!("must be finite and >= 0, got {}", self.lambda_gv),
            ));
        }
        Ok(())
    }
}

pub fn rgb_to_gray_var<'t, T: Real>(img: &Var<'t, T>) -> Result<Var<'t, T>> {
    if img.shape()[1] != 3 {
        return Err(Error::dim(format!(
            "grayscale conversion needs 3 channels, got {:?}",
            img.shape()
        )));
    }
    let k = Tensor::from_vec([1, 3, 1, 1], LUMA.iter().map(|&v| T::of(v)).collect())?;
    img.conv2d(&img.tape().constant(k), None, ConvGeometry::new(1, 0, 1))
}

pub fn rgb_to_gray<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(rgb_to_gray_var(&tape.constant(img.clone()))?
        .value()
        .as_ref()
        .clone())
}

fn kernel3<T: Real>(k: &[[f64; 3]; 3]) -> Tensor<T> {
    Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| T::of(k[y][x]))
}

/// Horizontal and vertical Sobel responses with zero padding.
pub fn sobel_var<'t, T: Real>(gray: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if gray.shape()[1] != 1 {
        return Err(Error::dim(format!(
            "Sobel expects one channel, got {:?}",
            gray.shape()
        )));
    }
    let tape = gray.tape();
    let geo = ConvGeometry::same(3);
    Ok((
        gray.conv2d(&tape.constant(kernel3(&SOBEL_X)), None, geo)?,
        gray.conv2d(&tape.constant(kernel3(&SOBEL_Y)), None, geo)?,
    ))
}

pub fn sobel<T: Real>(gray: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::inference();
    let (gx, gy) = sobel_var(&tape.constant(gray.clone()))?;
    Ok((gx.value().as_ref().clone(), gy.value().as_ref().clone()))
}

/// Biased variance over non-overlapping `n × n` patches; remainder rows and
/// columns are dropped. Output is `(N, C, H/n, W/n)`.
pub fn variance_map_var<'t, T: Real>(g: &Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    let [b, c, h, w] = g.shape();
    if n == 0 || h < n || w < n {
        return Err(Error::dim(format!(
            "variance map: {h}x{w} input is smaller than one {n}x{n} patch"
        )));
    }
    let (ph, pw) = (h / n, w / n);
    let inv = T::one() / T::of((n * n) as f64);
    let gv = g.value();
    let patch_means = move |x: &Tensor<T>| -> Vec<T> {
        let mut means = vec![T::zero(); b * c * ph * pw];
        for p in 0..b * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for (q, m) in means[p * ph * pw..(p + 1) * ph * pw].iter_mut().enumerate() {
                let (py, px) = (q / pw, q % pw);
                let mut s = T::zero();
                for y in py * n..(py + 1) * n {
                    for v in &plane[y * w + px * n..y * w + (px + 1) * n] {
                        s = s + *v;
                    }
                }
                *m = s * inv;
            }
        }
        means
    };
    let means = patch_means(&gv);
    let mut var = vec![T::zero(); means.len()];
    for p in 0..b * c {
        let plane = &gv.data()[p * h * w..(p + 1) * h * w];
        for q in 0..ph * pw {
            let (py, px) = (q / pw, q % pw);
            let m = means[p * ph * pw + q];
            let mut s = T::zero();
            for y in py * n..(py + 1) * n {
                for v in &plane[y * w + px * n..y * w + (px + 1) * n] {
                    s = s + (*v - m) * (*v - m);
                }
            }
            var[p * ph * pw + q] = s * inv;
        }
    }
    let out = Tensor::from_vec([b, c, ph, pw], var)?;
    Ok(g.tape().record(out, &[*g], move |a| {
        let x = a.inputs[0];
        let means = patch_means(x);
        let two = T::of(2.0) * inv;
        let mut gx = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            for q in 0..ph * pw {
                let (py, px) = (q / pw, q % pw);
                let i = p * ph * pw + q;
                let (m, gq) = (means[i], a.grad.data()[i]);
                for y in py * n..(py + 1) * n {
                    for xx in px * n..(px + 1) * n {
                        let o = p * h * w + y * w + xx;
                        gx[o] = two * gq * (x.data()[o] - m);
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec([b, c, h, w], gx).unwrap())]
    }))
}

pub fn variance_map<T: Real>(g: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(variance_map_var(&tape.constant(g.clone()), n)?
        .value()
        .as_ref()
        .clone())
}

fn check_pair<T: Real>(hr: &Var<'_, T>, sr: &Var<'_, T>) -> Result<()> {
    if hr.shape() != sr.shape() {
        return Err(Error::dim(format!(
            "loss: HR {:?} and SR {:?} differ",
            hr.shape(),
            sr.shape()
        )));
    }
    Ok(())
}

/// `mean|V^HR_x − V^SR_x| + mean|V^HR_y − V^SR_y|` over the patch grid.
pub fn gv_loss_var<'t, T: Real>(
    hr: &Var<'t, T>,
    sr: &Var<'t, T>,
    window: usize,
) -> Result<Var<'t, T>> {
    check_pair(hr, sr)?;
    let (hx, hy) = sobel_var(&rgb_to_gray_var(hr)?)?;
    let (sx, sy) = sobel_var(&rgb_to_gray_var(sr)?)?;
    let dx = variance_map_var(&hx, window)?.sub(&variance_map_var(&sx, window)?)?;
    let dy = variance_map_var(&hy, window)?.sub(&variance_map_var(&sy, window)?)?;
    dx.abs().mean().add(&dy.abs().mean())
}

pub fn gv_loss<T: Real>(hr: &Tensor<T>, sr: &Tensor<T>, window: usize) -> Result<f64> {
    let tape = Tape::inference();
    Ok(gv_loss_var(
        &tape.constant(hr.clone()),
        &tape.constant(sr.clone()),
        window,
    )?
    .item()
    .as_f64())
}

pub struct LossTerms<'t, T> {
    pub total: Var<'t, T>,
    pub l1: Var<'t, T>,
    pub gv: Var<'t, T>,
}

/// `mean|I^HR − I^SR| + λ_gv · L_GV`.
pub fn total_loss_var<'t, T: Real>(
    hr: &Var<'t, T>,
    sr: &Var<'t, T>,
    cfg: &GvConfig,
) -> Result<LossTerms<'t, T>> {
    check_pair(hr, sr)?;
    let l1 = hr.sub(sr)?.abs().mean();
    let gv = gv_loss_var(hr, sr, cfg.window)?;
    let total = l1.add(&gv.scale(T::of(cfg.lambda_gv)))?;
    Ok(LossTerms { total, l1, gv })
}

pub fn total_loss<T: Real>(hr: &Tensor<T>, sr: &Tensor<T>, cfg: &GvConfig) -> Result<f64> {
    let tape = Tape::inference();
    let terms = total_loss_var(&tape.constant(hr.clone()), &tape.constant(sr.clone()), cfg)?;
    Ok(terms.total.item().as_f64())
}
