//! Parameter-free 3-D attention (SimAM).
//!
//! Each element is weighted by `sigmoid(1/e*)`, where the inverse minimal
//! energy of a neuron `t` in a channel with spatial mean `μ` and variance `σ²`
//! is `((t-μ)² + 2σ² + 2λ) / (4(σ² + λ))`. A channel with a single spatial
//! element has `σ² = 0` and every weight collapses to `sigmoid(0.5)`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimamConfig {
    pub lambda: f64,
    /// Divide the variance by `H·W − 1` instead of `H·W`.
    pub variance_unbiased: bool,
}

impl Default for SimamConfig {
    fn default() -> Self {
        SimamConfig {
            lambda: 1e-4,
            variance_unbiased: false,
        }
    }
}

impl SimamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "simam_lambda",
                format!("must be > 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }

    fn divisor(&self, hw: usize) -> f64 {
        if self.variance_unbiased && hw > 1 {
            (hw - 1) as f64
        } else {
            hw as f64
        }
    }
}

/// Per-channel statistics retained for the backward pass.
struct ChannelStats<T> {
    mean: T,
    denom: T,
}

fn stats<T: Real>(plane: &[T], cfg: &SimamConfig) -> ChannelStats<T> {
    let n = T::of(plane.len() as f64);
    let mean = plane.iter().copied().sum::<T>() / n;
    let ss: T = plane.iter().map(|&t| (t - mean) * (t - mean)).sum();
    let var = ss / T::of(cfg.divisor(plane.len()));
    ChannelStats {
        mean,
        denom: T::of(4.0) * (var + T::of(cfg.lambda)),
    }
}

/// Attention weight of each element (before multiplying by the input).
pub fn attention_weights<T: Real>(x: &Tensor<T>, cfg: &SimamConfig) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let plane = &x.data()[p * hw..(p + 1) * hw];
        let st = stats(plane, cfg);
        let half = T::of(0.5);
        for (o, &t) in out.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
            let d = t - st.mean;
            *o = sigmoid(d * d / st.denom + half);
        }
    }
    out
}

pub fn simam<T: Real>(x: &Tensor<T>, cfg: &SimamConfig) -> Tensor<T> {
    let a = attention_weights(x, cfg);
    x.zip_map(&a, |t, a| t * a).expect("same shape")
}

pub fn simam_var<'t, T: Real>(x: &Var<'t, T>, cfg: &SimamConfig) -> Var<'t, T> {
    let out = simam(&x.value(), cfg);
    let cfg = *cfg;
    x.tape().record(out, &[*x], move |a| {
        let xv = a.inputs[0];
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let inv_n = T::one() / T::of(hw as f64);
        let dvar_scale = T::of(2.0 / cfg.divisor(hw));
        let half = T::of(0.5);
        let two = T::of(2.0);
        let four = T::of(4.0);
        let mut gx = Tensor::zeros(xv.shape());
        let mut a_buf = vec![T::zero(); hw];
        for p in 0..n * c {
            let plane = &xv.data()[p * hw..(p + 1) * hw];
            let g = &a.grad.data()[p * hw..(p + 1) * hw];
            let st = stats(plane, &cfg);
            let dst = &mut gx.data_mut()[p * hw..(p + 1) * hw];
            // dL/dy_i = g_i x_i s_i (1 - s_i); y_i = d_i²/D + 1/2, D = 4(v + λ)
            let mut dl_dv = T::zero();
            for i in 0..hw {
                let d = plane[i] - st.mean;
                let s = sigmoid(d * d / st.denom + half);
                let q = g[i] * plane[i] * s * (T::one() - s);
                dst[i] = g[i] * s;
                a_buf[i] = two * q * d / st.denom;
                dl_dv = dl_dv - q * four * d * d / (st.denom * st.denom);
            }
            let a_mean = a_buf.iter().copied().sum::<T>() * inv_n;
            for i in 0..hw {
                let d = plane[i] - st.mean;
                dst[i] = dst[i] + (a_buf[i] - a_mean) + dl_dv * dvar_scale * d;
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn pseudo(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let mut k = seed;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 12.9898).sin() * 1.7
        })
    }

    #[test]
    fn constant_channel_scales_by_sigmoid_half() {
        let x = Tensor::<f64>::full([1, 2, 3, 4], 0.8);
        let y = simam(&x, &SimamConfig::default());
        let s = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((s - 0.622_459).abs() < 1e-6);
        for &v in y.data() {
            assert!((v - 0.8 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_falls_back_to_sigmoid_half() {
        let x = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![-2.0, 0.0, 5.0]).unwrap();
        let a = attention_weights(&x, &SimamConfig::default());
        let s = 1.0 / (1.0 + (-0.5f64).exp());
        assert!(a.data().iter().all(|&v| (v - s).abs() < 1e-15));
    }

    #[test]
    fn shape_preserved() {
        let x = pseudo([2, 8, 7, 5], 0.0);
        assert_eq!(simam(&x, &SimamConfig::default()).shape(), [2, 8, 7, 5]);
    }

    #[test]
    fn weights_bounded_below_by_sigmoid_half() {
        for seed in 0..20 {
            let x = pseudo([2, 3, 5, 6], seed as f64 * 31.0).map(|v| v * (1.0 + seed as f64));
            let a = attention_weights(&x, &SimamConfig::default());
            for &v in a.data() {
                assert!((0.62245..1.0).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn argmax_matches_scalar_oracle_under_positive_scaling() {
        let cfg = SimamConfig::default();
        let base = pseudo([1, 3, 6, 5], 4.0);
        for c_scale in [0.3, 1.0, 7.5] {
            let x = base.map(|v| v * c_scale);
            let y = simam(&x, &cfg);
            for ch in 0..3 {
                let plane = x.plane(0, ch);
                // scalar oracle: recompute μ, σ² and a(t)·t element by element
                let n = plane.len() as f64;
                let mu = plane.iter().sum::<f64>() / n;
                let var = plane.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / n;
                let score = |t: f64| {
                    let e = ((t - mu).powi(2) + 2.0 * var + 2.0 * cfg.lambda)
                        / (4.0 * (var + cfg.lambda));
                    (t / (1.0 + (-e).exp())).abs()
                };
                let oracle = (0..plane.len())
                    .max_by(|&i, &j| score(plane[i]).total_cmp(&score(plane[j])))
                    .unwrap();
                let got = y
                    .plane(0, ch)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap()
                    .0;
                assert_eq!(got, oracle);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for unbiased in [false, true] {
            let cfg = SimamConfig {
                lambda: 1e-4,
                variance_unbiased: unbiased,
            };
            let x = pseudo([2, 2, 3, 4], 1.0);
            let w = pseudo([2, 2, 3, 4], 50.0);
            let err = finite_diff_check(
                move |v| {
                    let w = v.tape().constant(w.clone());
                    Ok(simam_var(&v, &cfg).mul(&w)?.sum())
                },
                &x,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "unbiased={unbiased}: {err}");
        }
    }
}
