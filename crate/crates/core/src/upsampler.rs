//! Scale-aware upsampling: every output pixel takes a softmax-normalized
//! `k_u × k_u` weighting of its source neighbourhood, with the weights
//! predicted from the sub-pixel offset and the scale.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conv::for_each_plane;
use crate::error::{Error, Result};
use crate::params::{Conv, Ctx, Init, Mode, ParamStore, Part};
use crate::scale::{RoundMode, ScalePair};
use crate::simam::{simam_var, SimamConfig};
use crate::tensor::{ConvGeometry, Real, Tensor};

/// Center-aligned inverse mapping from output to source coordinates, per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Unclamped source coordinate `(i + 0.5)/r − 0.5`.
    pub src_v: Vec<f64>,
    pub src_h: Vec<f64>,
    /// Anchor and offset of the source coordinate clamped to `[0, in − 1]`.
    pub base_v: Vec<usize>,
    pub base_h: Vec<usize>,
    pub frac_v: Vec<f64>,
    pub frac_h: Vec<f64>,
}

fn axis(in_len: usize, out_len: usize, r: f64) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let mut src = Vec::with_capacity(out_len);
    let mut base = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let s = (i as f64 + 0.5) / r - 0.5;
        let c = s.clamp(0.0, (in_len - 1) as f64);
        let b = c.floor();
        src.push(s);
        base.push(b as usize);
        frac.push(c - b);
    }
    (src, base, frac)
}

pub fn map_coords(
    in_h: usize,
    in_w: usize,
    scale: ScalePair,
    round: RoundMode,
) -> Result<CoordMap> {
    if scale.v < 1.0 || scale.h < 1.0 {
        return Err(Error::Range(format!(
            "scale {scale} is below the lower bound 1"
        )));
    }
    if in_h == 0 || in_w == 0 {
        return Err(Error::dim("coordinate map for an empty input"));
    }
    let (out_h, out_w) = scale.output_dims(in_h, in_w, round);
    let (src_v, base_v, frac_v) = axis(in_h, out_h, scale.v);
    let (src_h, base_h, frac_h) = axis(in_w, out_w, scale.h);
    Ok(CoordMap {
        in_h,
        in_w,
        out_h,
        out_w,
        src_v,
        src_h,
        base_v,
        base_h,
        frac_v,
        frac_h,
    })
}

/// Edge-clamped neighbourhood indices: `index[o*k + t]` for tap `t`, offsets
/// `t − (k/2 − 1)` around the anchor (`{−1,0,1,2}` for `k = 4`).
fn tap_indices(base: &[usize], k: usize, len: usize) -> Vec<usize> {
    let first = k as isize / 2 - 1;
    base.iter()
        .flat_map(|&b| {
            (0..k)
                .map(move |t| (b as isize + t as isize - first).clamp(0, len as isize - 1) as usize)
        })
        .collect()
}

/// Weighted neighbourhood gather. `weights` is `(1, k², out_h, out_w)` and is
/// shared across batch and channels.
pub fn gather_var<'t, T: Real>(
    feat: &Var<'t, T>,
    weights: &Var<'t, T>,
    coords: &CoordMap,
    k: usize,
) -> Result<Var<'t, T>> {
    let [n, c, h, w] = feat.shape();
    if (h, w) != (coords.in_h, coords.in_w) {
        return Err(Error::dim(format!(
            "gather: features {:?} do not match coordinate map for {}x{}",
            feat.shape(),
            coords.in_h,
            coords.in_w
        )));
    }
    let (oh, ow) = (coords.out_h, coords.out_w);
    if weights.shape() != [1, k * k, oh, ow] {
        return Err(Error::dim(format!(
            "gather: weights {:?}, expected {:?}",
            weights.shape(),
            [1, k * k, oh, ow]
        )));
    }
    let rows = tap_indices(&coords.base_v, k, h);
    let cols = tap_indices(&coords.base_h, k, w);
    let (fv, wv) = (feat.value(), weights.value());
    let (fd, wd) = (fv.data(), wv.data());
    let ohw = oh * ow;
    let mut out = vec![T::zero(); n * c * ohw];
    for_each_plane(&mut out, ohw, n * c * ohw * k * k, |p, plane| {
        let src = &fd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let orow = &mut plane[oy * ow..(oy + 1) * ow];
            for i in 0..k {
                let srow = &src[rows[oy * k + i] * w..][..w];
                for j in 0..k {
                    let wrow = &wd[((i * k + j) * oh + oy) * ow..][..ow];
                    for ox in 0..ow {
                        orow[ox] = orow[ox] + wrow[ox] * srow[cols[ox * k + j]];
                    }
                }
            }
        }
    });
    let out = Tensor::from_vec([n, c, oh, ow], out)?;
    Ok(feat.tape().record(out, &[*feat, *weights], move |a| {
        let (fv, wv, g) = (a.inputs[0], a.inputs[1], a.grad.data());
        let gf = a.needs[0].then(|| {
            let mut gf = vec![T::zero(); n * c * h * w];
            for_each_plane(&mut gf, h * w, n * c * ohw * k * k, |p, plane| {
                let gp = &g[p * ohw..(p + 1) * ohw];
                for oy in 0..oh {
                    let grow = &gp[oy * ow..(oy + 1) * ow];
                    for i in 0..k {
                        let r = rows[oy * k + i];
                        for j in 0..k {
                            let wrow = &wv.data()[((i * k + j) * oh + oy) * ow..][..ow];
                            for ox in 0..ow {
                                let d = &mut plane[r * w + cols[ox * k + j]];
                                *d = *d + wrow[ox] * grow[ox];
                            }
                        }
                    }
                }
            });
            Tensor::from_vec([n, c, h, w], gf).unwrap()
        });
        let gw = a.needs[1].then(|| {
            let mut gw = vec![T::zero(); k * k * ohw];
            for_each_plane(&mut gw, ohw, n * c * ohw * k * k, |t, plane| {
                let (i, j) = (t / k, t % k);
                for p in 0..n * c {
                    let src = &fv.data()[p * h * w..(p + 1) * h * w];
                    let gp = &g[p * ohw..(p + 1) * ohw];
                    for oy in 0..oh {
                        let srow = &src[rows[oy * k + i] * w..][..w];
                        for ox in 0..ow {
                            let d = &mut plane[oy * ow + ox];
                            *d = *d + gp[oy * ow + ox] * srow[cols[ox * k + j]];
                        }
                    }
                }
            });
            Tensor::from_vec([1, k * k, oh, ow], gw).unwrap()
        });
        vec![gf, gw]
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerConfig {
    pub channels: usize,
    pub neighborhood: usize,
    pub hidden: usize,
    pub simam: SimamConfig,
    pub round: RoundMode,
    pub scale_max: f64,
}

#[derive(Clone, Debug)]
pub struct Upsampler {
    pub feat_dw: Conv,
    pub kpred_in: Conv,
    pub kpred_out: Conv,
    pub recon: Conv,
    cfg: UpsamplerConfig,
}

impl Upsampler {
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &UpsamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (c, k) = (cfg.channels, cfg.neighborhood);
        if k < 2 || k % 2 != 0 {
            return Err(Error::config(
                "k_u",
                format!("neighbourhood must be even and >= 2, got {k}"),
            ));
        }
        let point = ConvGeometry::new(1, 0, 1);
        Ok(Upsampler {
            feat_dw: Conv::create(
                store,
                &format!("{name}.feat_dw"),
                Part::Upsampler,
                c,
                c,
                3,
                ConvGeometry::new(1, 1, c),
                Init::HeUniform,
                rng,
            ),
            kpred_in: Conv::create(
                store,
                &format!("{name}.kpred_in"),
                Part::Upsampler,
                4,
                cfg.hidden,
                1,
                point,
                Init::HeUniform,
                rng,
            ),
            kpred_out: Conv::create(
                store,
                &format!("{name}.kpred_out"),
                Part::Upsampler,
                cfg.hidden,
                k * k,
                1,
                point,
                Init::Zero,
                rng,
            ),
            recon: Conv::create(
                store,
                &format!("{name}.recon"),
                Part::Upsampler,
                c,
                3,
                1,
                point,
                Init::Zero,
                rng,
            ),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &UpsamplerConfig {
        &self.cfg
    }

    pub fn coords(&self, h: usize, w: usize, scale: ScalePair) -> Result<CoordMap> {
        scale.check(self.cfg.scale_max)?;
        map_coords(h, w, scale, self.cfg.round)
    }

    /// Per-output-pixel kernels `(1, k², out_h, out_w)`: the input
    /// `(frac_v, frac_h, 1/r_v, 1/r_h)` goes through dense → SiLU → dense →
    /// softmax, evaluated for all pixels at once.
    pub fn kernel_weights_var<'t, T: Real>(
        &self,
        coords: &CoordMap,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        let tape = ctx.var(self.kpred_in.weight).tape();
        let (oh, ow) = (coords.out_h, coords.out_w);
        let [fv, fh] = scale.features();
        let input = Tensor::from_fn([1, 4, oh, ow], |[_, ch, y, x]| {
            T::of(match ch {
                0 => coords.frac_v[y],
                1 => coords.frac_h[x],
                2 => fv,
                _ => fh,
            })
        });
        let hidden = self
            .kpred_in
            .apply(&tape.constant(input), ctx.params)?
            .silu();
        Ok(self
            .kpred_out
            .apply(&hidden, ctx.params)?
            .softmax_channels())
    }

    /// Predicted `k_u × k_u` kernel (row-major) for one sub-pixel offset.
    pub fn predict_kernel<T: Real>(
        &self,
        store: &ParamStore<T>,
        frac_v: f64,
        frac_h: f64,
        scale: ScalePair,
    ) -> Result<Vec<T>> {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        let coords = CoordMap {
            in_h: 1,
            in_w: 1,
            out_h: 1,
            out_w: 1,
            src_v: vec![frac_v],
            src_h: vec![frac_h],
            base_v: vec![0],
            base_h: vec![0],
            frac_v: vec![frac_v],
            frac_h: vec![frac_h],
        };
        Ok(self
            .kernel_weights_var(&coords, scale, &ctx)?
            .value()
            .data()
            .to_vec())
    }

    /// Depthwise conv → SimAM → SiLU on the low-resolution features.
    pub fn features_var<'t, T: Real>(
        &self,
        f: &Var<'t, T>,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        let x = self.feat_dw.apply(f, ctx.params)?;
        Ok(simam_var(&x, &self.cfg.simam).silu())
    }

    pub fn upsample_var<'t, T: Real>(
        &self,
        f: &Var<'t, T>,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        let [_, c, h, w] = f.shape();
        let k = self.cfg.neighborhood;
        if c != self.cfg.channels {
            return Err(Error::dim(format!(
                "upsampler expects {} channels, input is {:?}",
                self.cfg.channels,
                f.shape()
            )));
        }
        if h < k || w < k {
            return Err(Error::dim(format!(
                "upsampler input {h}x{w} smaller than the {k}x{k} neighbourhood"
            )));
        }
        let coords = self.coords(h, w, scale)?;
        let feat = self.features_var(f, ctx)?;
        let weights = self.kernel_weights_var(&coords, scale, ctx)?;
        gather_var(&feat, &weights, &coords, k)
    }

    /// 1×1 projection to RGB. Values are left unclamped.
    pub fn reconstruct_var<'t, T: Real>(
        &self,
        feat: &Var<'t, T>,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        if feat.shape()[1] != self.cfg.channels {
            return Err(Error::dim(format!(
                "reconstruct expects {} channels, input is {:?}",
                self.cfg.channels,
                feat.shape()
            )));
        }
        self.recon.apply(feat, ctx.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_many, Probe};
    use crate::params::uniform;
    use rand::{Rng, SeedableRng};

    fn cfg(c: usize) -> UpsamplerConfig {
        UpsamplerConfig {
            channels: c,
            neighborhood: 4,
            hidden: 8,
            simam: SimamConfig::default(),
            round: RoundMode::Floor,
            scale_max: 4.5,
        }
    }

    fn build(c: usize, seed: u64) -> (ParamStore<f64>, Upsampler) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let up = Upsampler::create(&mut store, "up", &cfg(c), &mut rng).unwrap();
        // non-trivial kernel prediction
        let id = up.kpred_out.weight;
        store
            .set(id, uniform(store.get(id).shape(), 0.8, &mut rng))
            .unwrap();
        (store, up)
    }

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn dirac_dw(store: &mut ParamStore<f64>, up: &Upsampler, c: usize) {
        store
            .set(
                up.feat_dw.weight,
                Tensor::from_fn(
                    [c, 1, 3, 3],
                    |[_, _, y, x]| if y == 1 && x == 1 { 1.0 } else { 0.0 },
                ),
            )
            .unwrap();
    }

    fn run<R>(
        store: &ParamStore<f64>,
        f: impl for<'t> FnOnce(&'t Tape<f64>, &Ctx<'_, 't, f64>) -> R,
    ) -> R {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        f(&tape, &ctx)
    }

    #[test]
    fn coords_identity_scale() {
        let m = map_coords(5, 3, ScalePair::uniform(1.0), RoundMode::Floor).unwrap();
        assert_eq!((m.out_h, m.out_w), (5, 3));
        for i in 0..5 {
            assert_eq!(m.src_v[i], i as f64);
            assert_eq!(m.base_v[i], i);
            assert_eq!(m.frac_v[i], 0.0);
        }
    }

    #[test]
    fn coords_scale_two() {
        let m = map_coords(4, 4, ScalePair::uniform(2.0), RoundMode::Floor).unwrap();
        assert_eq!(m.src_v[0], -0.25);
        assert_eq!((m.base_v[0], m.frac_v[0]), (0, 0.0));
        assert_eq!(m.src_v[1], 0.25);
        assert_eq!((m.base_v[1], m.frac_v[1]), (0, 0.25));
        assert_eq!(m.base_v[7], 3);
        assert!(map_coords(4, 4, ScalePair::uniform(0.9), RoundMode::Floor).is_err());
    }

    #[test]
    fn tap_offsets_clamp_at_edges() {
        assert_eq!(
            tap_indices(&[0, 2, 4], 4, 5),
            vec![0, 0, 1, 2, 1, 2, 3, 4, 3, 4, 4, 4]
        );
    }

    #[test]
    fn predicted_kernels_are_normalized_and_deterministic() {
        let (store, up) = build(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (fv, fh) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let s = ScalePair::new(rng.gen_range(1.0..4.5), rng.gen_range(1.0..4.5));
            let k = up.predict_kernel(&store, fv, fh, s).unwrap();
            assert_eq!(k.len(), 16);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(k, up.predict_kernel(&store, fv, fh, s).unwrap());
        }
    }

    #[test]
    fn zero_prediction_network_gives_uniform_kernel() {
        let (mut store, up) = build(4, 1);
        for conv in [up.kpred_in, up.kpred_out] {
            store
                .set(conv.weight, Tensor::zeros(store.get(conv.weight).shape()))
                .unwrap();
            let b = conv.bias.unwrap();
            store.set(b, Tensor::zeros(store.get(b).shape())).unwrap();
        }
        let k = up
            .predict_kernel(&store, 0.3, 0.7, ScalePair::new(2.0, 3.0))
            .unwrap();
        assert!(k.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let (store, up) = build(4, 3);
        for (s, dims) in [
            (ScalePair::uniform(2.0), (16, 16)),
            (ScalePair::new(2.0, 3.0), (16, 24)),
        ] {
            let out = run(&store, |tape, ctx| {
                up.upsample_var(&tape.constant(noise([1, 4, 8, 8], 4)), s, ctx)
                    .unwrap()
                    .shape()
            });
            assert_eq!((out[2], out[3]), dims);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (h, w) = (rng.gen_range(1..40usize), rng.gen_range(1..40usize));
            let s = ScalePair::new(rng.gen_range(1.0..4.5), rng.gen_range(1.0..4.5));
            let m = map_coords(h, w, s, RoundMode::Floor).unwrap();
            assert_eq!(m.out_h, (h as f64 * s.v + 1e-9).floor() as usize);
            assert_eq!(m.out_w, (w as f64 * s.h + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn rejects_input_smaller_than_neighbourhood() {
        let (store, up) = build(4, 3);
        let err = run(&store, |tape, ctx| {
            up.upsample_var(
                &tape.constant(noise([1, 4, 3, 8], 4)),
                ScalePair::uniform(2.0),
                ctx,
            )
            .map(|_| ())
        });
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_input_stays_constant() {
        let (mut store, up) = build(3, 6);
        dirac_dw(&mut store, &up, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let s = ScalePair::new(rng.gen_range(1.0..4.5), rng.gen_range(1.0..4.5));
            let out = run(&store, |tape, ctx| {
                let f = tape.constant(Tensor::full([1, 3, 6, 7], 0.37));
                up.upsample_var(&f, s, ctx)
                    .unwrap()
                    .value()
                    .as_ref()
                    .clone()
            });
            let first = out.data()[0];
            assert!(
                out.data().iter().all(|&v| (v - first).abs() < 1e-12),
                "scale {s}"
            );
        }
    }

    #[test]
    fn one_hot_anchor_kernel_samples_integers_at_scale_one() {
        let (mut store, up) = build(2, 8);
        dirac_dw(&mut store, &up, 2);
        // force the logit of the anchor tap (offset 0,0 => index 1*4+1) to dominate
        store
            .set(
                up.kpred_out.weight,
                Tensor::zeros(store.get(up.kpred_out.weight).shape()),
            )
            .unwrap();
        let mut b = Tensor::zeros([1, 16, 1, 1]);
        b.data_mut()[5] = 1e3;
        store.set(up.kpred_out.bias.unwrap(), b).unwrap();
        let f = noise([2, 2, 5, 6], 9);
        let (out, processed) = run(&store, |tape, ctx| {
            let fv = tape.constant(f.clone());
            (
                up.upsample_var(&fv, ScalePair::uniform(1.0), ctx)
                    .unwrap()
                    .value()
                    .as_ref()
                    .clone(),
                up.features_var(&fv, ctx).unwrap().value().as_ref().clone(),
            )
        });
        assert_eq!(out, processed);
    }

    #[test]
    fn reconstruct_selection_and_zero() {
        let (mut store, up) = build(5, 10);
        store
            .set(
                up.recon.weight,
                Tensor::from_fn([3, 5, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 }),
            )
            .unwrap();
        let feat = noise([1, 5, 4, 3], 11);
        let out = run(&store, |tape, ctx| {
            up.reconstruct_var(&tape.constant(feat.clone()), ctx)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        });
        for c in 0..3 {
            assert_eq!(out.plane(0, c), feat.plane(0, c));
        }
        store
            .set(up.recon.weight, Tensor::zeros([3, 5, 1, 1]))
            .unwrap();
        let out = run(&store, |tape, ctx| {
            up.reconstruct_var(&tape.constant(feat.clone()), ctx)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        });
        assert!(out.data().iter().all(|&v| v == 0.0));
        let err = run(&store, |tape, ctx| {
            up.reconstruct_var(&tape.constant(noise([1, 4, 4, 3], 1)), ctx)
                .map(|_| ())
        });
        assert!(err.is_err());
    }

    #[test]
    fn upsample_and_reconstruct_gradients() {
        let (store, up) = build(3, 12);
        let f = noise([2, 3, 5, 4], 13);
        let mut inputs = vec![f];
        inputs.extend(store.trainable_ids().map(|id| store.get(id).clone()));
        for scale in [ScalePair::uniform(2.0), ScalePair::new(1.5, 2.7)] {
            let (oh, ow) = scale.output_dims(5, 4, RoundMode::Floor);
            let probe = noise([2, 3, oh, ow], 14);
            let report = finite_diff_check_many(
                |vars| {
                    let tape = vars[0].tape();
                    let bound = store.bind_from(tape, &vars[1..])?;
                    let ctx = Ctx::new(&bound, Mode::Train);
                    let hr = up.upsample_var(&vars[0], scale, &ctx)?;
                    let rgb = up.reconstruct_var(&hr, &ctx)?;
                    Ok(rgb.mul(&tape.constant(probe.clone()))?.sum())
                },
                &inputs,
                1e-3,
                Probe::Sample {
                    per_tensor: 16,
                    seed: 15,
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{scale}: {report:?}");
        }
    }
}
