//! Normalization slots inside the guidance hourglass: SimAM or batch norm.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Simam,
    BatchNorm,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::Simam => "simam",
            NormKind::BatchNorm => "batchnorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simam" => Some(NormKind::Simam),
            "batchnorm" | "bn" => Some(NormKind::BatchNorm),
            _ => None,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed in training mode (variance unbiased, for the
/// running estimate).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Per-channel batch normalization. With `running` set, normalizes with the
/// given running mean/variance (evaluation); otherwise with batch statistics.
pub fn batch_norm_var<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    running: Option<(&[T], &[T])>,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let xv = x.value();
    let [n, c, h, w] = xv.shape();
    if gamma.shape() != [1, c, 1, 1] || beta.shape() != [1, c, 1, 1] {
        return Err(Error::dim(format!(
            "batch norm affine {:?}/{:?} does not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::of(BN_EPS);
    let (mean, var, stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|b| xv.plane(b, ch).iter().copied());
                let m = vals.clone().sum::<T>() / T::of(count as f64);
                let ss: T = vals.map(|v| (v - m) * (v - m)).sum();
                mean[ch] = m;
                var[ch] = ss / T::of(count as f64);
            }
            let unbiased = var
                .iter()
                .map(|&v| v * T::of(count as f64 / (count.max(2) - 1) as f64))
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gv, bv) = (gamma.value(), beta.value());
    let mut xhat = Tensor::zeros(xv.shape());
    let mut out = Tensor::zeros(xv.shape());
    for (i, &t) in xv.data().iter().enumerate() {
        let ch = (i / hw) % c;
        let z = (t - mean[ch]) * inv_std[ch];
        xhat.data_mut()[i] = z;
        out.data_mut()[i] = gv.data()[ch] * z + bv.data()[ch];
    }
    let batch_mode = running.is_none();
    let var = x.tape().record(out, &[*x, *gamma, *beta], move |a| {
        let gamma = a.inputs[1];
        let g = a.grad.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (&gi, &zi)) in g.iter().zip(xhat.data()).enumerate() {
            let ch = (i / hw) % c;
            sum_g[ch] = sum_g[ch] + gi;
            sum_gx[ch] = sum_gx[ch] + gi * zi;
        }
        let gx = a.needs[0].then(|| {
            let inv_count = T::one() / T::of(count as f64);
            let mut gx = Tensor::zeros(a.grad.shape());
            for (i, d) in gx.data_mut().iter_mut().enumerate() {
                let ch = (i / hw) % c;
                let scale = gamma.data()[ch] * inv_std[ch];
                *d = if batch_mode {
                    scale * (g[i] - sum_g[ch] * inv_count - xhat.data()[i] * sum_gx[ch] * inv_count)
                } else {
                    scale * g[i]
                };
            }
            gx
        });
        let gg = a.needs[1].then(|| Tensor::from_vec([1, c, 1, 1], sum_gx.clone()).unwrap());
        let gb = a.needs[2].then(|| Tensor::from_vec([1, c, 1, 1], sum_g.clone()).unwrap());
        vec![gx, gg, gb]
    });
    Ok((var, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_many, Probe};

    fn pseudo(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let mut k = seed;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 78.233).sin()
        })
    }

    #[test]
    fn normalizes_each_channel() {
        let tape = crate::Tape::<f64>::new();
        let x = tape.constant(pseudo([3, 2, 4, 4], 0.0).map(|v| 3.0 * v + 1.0));
        let g = tape.constant(Tensor::full([1, 2, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        let (y, stats) = batch_norm_var(&x, &g, &b, None).unwrap();
        assert!(stats.is_some());
        let y = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_in_both_modes() {
        let inputs = vec![
            pseudo([2, 3, 3, 3], 1.0),
            pseudo([1, 3, 1, 1], 2.0).map(|v| v + 1.5),
            pseudo([1, 3, 1, 1], 3.0),
            pseudo([2, 3, 3, 3], 4.0),
        ];
        for eval in [false, true] {
            let rm = [0.1, -0.2, 0.3];
            let rv = [1.1, 0.7, 2.0];
            let report = finite_diff_check_many(
                |v| {
                    let running = eval.then_some((&rm[..], &rv[..]));
                    let (y, _) = batch_norm_var(&v[0], &v[1], &v[2], running)?;
                    Ok(y.mul(&v[3])?.sum())
                },
                &inputs,
                1e-3,
                Probe::All,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "eval={eval}: {report:?}");
        }
    }
}
