//! Differentiable operations on tape variables.

use crate::autodiff::Var;
use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{numel, Activation, ConvGeometry, Real, Shape, Tensor};

fn same_shape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<Shape> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::dim(format!(
            "{what}: shapes {sa:?} and {sb:?} differ"
        )));
    }
    Ok(sa)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape(self, other, "add")?;
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.record(v, &[*self, *other], |a| {
            vec![Some(a.grad.clone()), Some(a.grad.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape(self, other, "sub")?;
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.record(v, &[*self, *other], |a| {
            vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape(self, other, "mul")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.tape.record(v, &[*self, *other], |a| {
            let ga = a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, y| g * y).unwrap());
            let gb = a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x).unwrap());
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * s);
        self.tape
            .record(v, &[*self], move |a| vec![Some(a.grad.map(|g| g * s))])
    }

    /// Multiplies `(N,C,H,W)` features by a gate of shape `(N,1,H,W)` (broadcast
    /// over channels) or `(N,C,H,W)` (elementwise).
    pub fn gate(&self, m: &Var<'t, T>) -> Result<Var<'t, T>> {
        let [n, c, h, w] = self.shape();
        let ms = m.shape();
        if ms == [n, c, h, w] {
            return self.mul(m);
        }
        if ms != [n, 1, h, w] {
            return Err(Error::dim(format!(
                "gate {ms:?} does not fit features {:?}",
                self.shape()
            )));
        }
        let (xv, mv) = (self.value(), m.value());
        let hw = h * w;
        let mut out = xv.as_ref().clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (b, p) = (i / (c * hw), i % hw);
            *v = *v * mv.data()[b * hw + p];
        }
        Ok(self.tape.record(out, &[*self, *m], move |a| {
            let (x, m) = (a.inputs[0], a.inputs[1]);
            let gx = a.needs[0].then(|| {
                let mut gx = a.grad.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    let (b, p) = (i / (c * hw), i % hw);
                    *v = *v * m.data()[b * hw + p];
                }
                gx
            });
            let gm = a.needs[1].then(|| {
                let mut gm = Tensor::zeros(m.shape());
                for (i, (&g, &xv)) in a.grad.data().iter().zip(x.data()).enumerate() {
                    let (b, p) = (i / (c * hw), i % hw);
                    let d = &mut gm.data_mut()[b * hw + p];
                    *d = *d + g * xv;
                }
                gm
            });
            vec![gx, gm]
        }))
    }

    /// Grouped 2-D cross-correlation. `bias`, when given, has shape `(1,C_out,1,1)`.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        geo: ConvGeometry,
    ) -> Result<Var<'t, T>> {
        let (xv, kv) = (self.value(), kernel.value());
        let ks = kv.shape();
        if let Some(b) = bias {
            if b.shape() != [1, ks[0], 1, 1] {
                return Err(Error::dim(format!(
                    "conv bias {:?} does not match kernel {ks:?}",
                    b.shape()
                )));
            }
        }
        let bv = bias.map(|b| b.value());
        let out = conv::forward(&xv, &kv, bv.as_ref().map(|b| b.data()), geo)?;
        let mut parents = vec![*self, *kernel];
        parents.extend(bias.copied());
        let x_shape = xv.shape();
        Ok(self.tape.record(out, &parents, move |a| {
            let (x, k) = (a.inputs[0], a.inputs[1]);
            let mut g = vec![
                a.needs[0].then(|| conv::backward_input(a.grad, k, x_shape, geo)),
                a.needs[1].then(|| conv::backward_kernel(a.grad, x, k.shape(), geo)),
            ];
            if a.inputs.len() == 3 {
                g.push(a.needs[2].then(|| {
                    Tensor::from_vec([1, k.shape()[0], 1, 1], conv::backward_bias(a.grad)).unwrap()
                }));
            }
            g
        }))
    }

    pub fn act(&self, kind: Activation) -> Var<'t, T> {
        let v = self.value().map(|t| kind.apply(t));
        self.tape.record(v, &[*self], move |a| {
            let mut g = a.grad.clone();
            for ((g, &t), &y) in g
                .data_mut()
                .iter_mut()
                .zip(a.inputs[0].data())
                .zip(a.output.data())
            {
                *g = *g * kind.derivative(t, y);
            }
            vec![Some(g)]
        })
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.act(Activation::Silu)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.act(Activation::Sigmoid)
    }

    /// Softmax across the channel axis, independently per (n, h, w).
    pub fn softmax_channels(&self) -> Var<'t, T> {
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let mut out = Tensor::zeros(xv.shape());
        {
            let (src, dst) = (xv.data(), out.data_mut());
            for b in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (b * c + ch) * hw + p;
                    let m = (0..c)
                        .map(|ch| src[idx(ch)])
                        .fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for ch in 0..c {
                        let e = (src[idx(ch)] - m).exp();
                        dst[idx(ch)] = e;
                        s = s + e;
                    }
                    for ch in 0..c {
                        dst[idx(ch)] = dst[idx(ch)] / s;
                    }
                }
            }
        }
        self.tape.record(out, &[*self], move |a| {
            let (y, g) = (a.output.data(), a.grad.data());
            let mut gx = Tensor::zeros(a.output.shape());
            let d = gx.data_mut();
            for b in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (b * c + ch) * hw + p;
                    let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                    for ch in 0..c {
                        d[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn abs(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.abs());
        self.tape.record(v, &[*self], |a| {
            vec![Some(
                a.grad
                    .zip_map(a.inputs[0], |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap(),
            )]
        })
    }

    pub fn sum(&self) -> Var<'t, T> {
        let xv = self.value();
        let shape = xv.shape();
        self.tape
            .record(Tensor::scalar(xv.sum()), &[*self], move |a| {
                vec![Some(Tensor::full(shape, a.grad.data()[0]))]
            })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let xv = self.value();
        let shape = xv.shape();
        let inv = T::one() / T::of(xv.numel() as f64);
        self.tape
            .record(Tensor::scalar(xv.sum() * inv), &[*self], move |a| {
                vec![Some(Tensor::full(shape, a.grad.data()[0] * inv))]
            })
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var<'t, T>> {
        let from = self.shape();
        let v = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.tape.record(v, &[*self], move |a| {
            vec![Some(a.grad.clone().reshape(from).unwrap())]
        }))
    }

    /// Linear combination `Σ_e w_e · stack[e]`, where `self` holds the `E`
    /// weights (any shape with `E` elements) and `stack` has leading dim `E`.
    pub fn mix(&self, stack: &Var<'t, T>, out_shape: Shape) -> Result<Var<'t, T>> {
        let (wv, sv) = (self.value(), stack.value());
        let e = sv.shape()[0];
        let per = sv.numel() / e;
        if wv.numel() != e {
            return Err(Error::arg(format!(
                "mix: {} weights for a stack of {e}",
                wv.numel()
            )));
        }
        if numel(&out_shape) != per {
            return Err(Error::dim(format!(
                "mix: output {out_shape:?} does not hold {per} values"
            )));
        }
        let mut out = vec![T::zero(); per];
        for (i, &w) in wv.data().iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(&sv.data()[i * per..(i + 1) * per]) {
                *o = *o + w * s;
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.tape.record(out, &[*self, *stack], move |a| {
            let (w, s, g) = (a.inputs[0], a.inputs[1], a.grad.data());
            let gw = a.needs[0].then(|| {
                let d = (0..e)
                    .map(|i| {
                        s.data()[i * per..(i + 1) * per]
                            .iter()
                            .zip(g)
                            .map(|(&x, &y)| x * y)
                            .sum()
                    })
                    .collect();
                Tensor::from_vec(w.shape(), d).unwrap()
            });
            let gs = a.needs[1].then(|| {
                let d = w
                    .data()
                    .iter()
                    .flat_map(|&wi| g.iter().map(move |&y| wi * y))
                    .collect();
                Tensor::from_vec(s.shape(), d).unwrap()
            });
            vec![gw, gs]
        }))
    }

    /// Nearest-neighbour resize to an explicit `(out_h, out_w)`.
    pub fn upsample_nearest(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [n, c, h, w] = xv.shape();
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("nearest resize to an empty size"));
        }
        let rows: Vec<usize> = (0..out_h).map(|y| (y * h / out_h).min(h - 1)).collect();
        let cols: Vec<usize> = (0..out_w).map(|x| (x * w / out_w).min(w - 1)).collect();
        let out = Tensor::from_fn([n, c, out_h, out_w], |[b, ch, y, x]| {
            xv.at([b, ch, rows[y], cols[x]])
        });
        Ok(self.tape.record(out, &[*self], move |a| {
            let mut gx = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for (y, &ry) in rows.iter().enumerate() {
                        for (x, &rx) in cols.iter().enumerate() {
                            let o = gx.offset([b, ch, ry, rx]);
                            gx.data_mut()[o] = gx.data()[o] + a.grad.at([b, ch, y, x]);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([1, 2, 2, 3], |[_, c, h, w]| {
            (c + h + w) as f64
        }));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gives_twice_x() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn([2, 1, 2, 2], |[n, _, h, w]| {
            n as f64 - h as f64 * 0.5 + w as f64
        });
        let x = tape.param(xt.clone());
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &xt.map(|v| 2.0 * v));
    }

    #[test]
    fn reused_tensor_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([1, 1, 2, 2], 3.0));
        let y = x.add(&x).unwrap().add(&x.scale(2.0)).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([1, 1, 2, 2], 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::<f32>::inference();
        let x = tape.param(Tensor::full([1, 1, 1, 1], 1.0));
        let y = x.silu();
        assert!(!y.requires_grad());
        assert!(tape.backward(y).unwrap().get(x).is_none());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(a.add(&b), Err(crate::Error::Dimension(_))));
    }
}
