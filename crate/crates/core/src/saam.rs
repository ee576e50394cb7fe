//! The scale-aware attention block: a guidance hourglass gating a
//! scale-conditioned depthwise/pointwise convolution,
//! `F' = F + F_adpt ∘ M`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{batch_norm_var, NormKind};
use crate::params::{
    he_bound, uniform, Conv, Ctx, Init, Mode, ParamId, ParamStore, Part, StatUpdate,
};
use crate::scale::ScalePair;
use crate::simam::{simam_var, SimamConfig};
use crate::tensor::{ConvGeometry, Real, Tensor};

/// Channel count of the guidance map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    /// One map broadcast over every feature channel.
    #[default]
    Single,
    /// One map per feature channel.
    PerChannel,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::Single => "single",
            GuidanceMode::PerChannel => "per_channel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "1" => Some(GuidanceMode::Single),
            "per_channel" => Some(GuidanceMode::PerChannel),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaamConfig {
    pub channels: usize,
    pub experts: usize,
    pub kernel: usize,
    pub dense_layer: bool,
    pub routing_hidden: usize,
    pub basis_dim: usize,
    pub norm: NormKind,
    pub simam: SimamConfig,
    pub guidance: GuidanceMode,
    pub scale_max: f64,
}

impl SaamConfig {
    pub fn bottleneck(&self) -> usize {
        (self.channels / 2).max(4)
    }

    /// Basis size actually used by the compressed bank: the configured size,
    /// shrunk until the bank stores fewer values than `E·C·k²`.
    pub fn effective_basis_dim(&self) -> Result<usize> {
        let full = self.experts * self.channels * self.kernel * self.kernel;
        let per_basis = self.experts + self.channels * self.kernel * self.kernel;
        let cap = (full - 1) / per_basis;
        let d = self.basis_dim.min(cap);
        if d == 0 {
            return Err(Error::config(
                "dense_layer",
                format!("{} experts are too few to compress", self.experts),
            ));
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug)]
enum NormSlot {
    Simam(SimamConfig),
    Batch {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
}

impl NormSlot {
    fn create<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &SaamConfig, ch: usize) -> Self {
        match cfg.norm {
            NormKind::Simam => NormSlot::Simam(cfg.simam),
            NormKind::BatchNorm => NormSlot::Batch {
                gamma: store.add(
                    format!("{name}.gamma"),
                    Tensor::full([1, ch, 1, 1], T::one()),
                    Part::SaamGuidance,
                ),
                beta: store.add(
                    format!("{name}.beta"),
                    Tensor::zeros([1, ch, 1, 1]),
                    Part::SaamGuidance,
                ),
                mean: store.add_buffer(
                    format!("{name}.running_mean"),
                    Tensor::zeros([1, ch, 1, 1]),
                    Part::SaamGuidance,
                ),
                var: store.add_buffer(
                    format!("{name}.running_var"),
                    Tensor::full([1, ch, 1, 1], T::one()),
                    Part::SaamGuidance,
                ),
            },
        }
    }

    fn apply<'t, T: Real>(&self, x: &Var<'t, T>, ctx: &Ctx<'_, 't, T>) -> Result<Var<'t, T>> {
        match *self {
            NormSlot::Simam(cfg) => Ok(simam_var(x, &cfg)),
            NormSlot::Batch {
                gamma,
                beta,
                mean,
                var,
            } => {
                let (g, b) = (ctx.var(gamma), ctx.var(beta));
                match ctx.mode {
                    Mode::Train => {
                        let (y, stats) = batch_norm_var(x, &g, &b, None)?;
                        if let Some(stats) = stats {
                            ctx.updates
                                .borrow_mut()
                                .push(StatUpdate { mean, var, stats });
                        }
                        Ok(y)
                    }
                    Mode::Eval => {
                        let (rm, rv) = (ctx.var(mean).value(), ctx.var(var).value());
                        Ok(batch_norm_var(x, &g, &b, Some((rm.data(), rv.data())))?.0)
                    }
                }
            }
        }
    }
}

/// Encoder-decoder producing the guidance map:
/// conv↓2 → norm → SiLU → conv → norm → SiLU → nearest↑ → conv → sigmoid.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down: Conv,
    mid: Conv,
    up: Conv,
    norms: [NormSlot; 2],
}

#[derive(Clone, Copy, Debug)]
enum ExpertStorage {
    /// `(E, C, k, k)` kernels stored as-is.
    Direct { experts: ParamId },
    /// `E × d_b` coefficients over a shared `(d_b, C, k, k)` kernel basis.
    Dense { coeffs: ParamId, basis: ParamId },
}

/// Expert depthwise kernels with their scale-routing network.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    storage: ExpertStorage,
    route_in: Conv,
    route_out: Conv,
    channels: usize,
    kernel: usize,
    experts: usize,
    scale_max: f64,
}

impl ExpertBank {
    fn create<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SaamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (c, k, e) = (cfg.channels, cfg.kernel, cfg.experts);
        let expert_bound = he_bound([1, 1, k, k]);
        let storage = if cfg.dense_layer {
            let d = cfg.effective_basis_dim()?;
            let coeffs = uniform([e, d, 1, 1], (3.0 / d as f64).sqrt(), rng);
            let basis = uniform([d, c, k, k], expert_bound, rng);
            ExpertStorage::Dense {
                coeffs: store.add(format!("{name}.coeffs"), coeffs, Part::ExpertBank),
                basis: store.add(format!("{name}.basis"), basis, Part::ExpertBank),
            }
        } else {
            let experts = uniform([e, c, k, k], expert_bound, rng);
            ExpertStorage::Direct {
                experts: store.add(format!("{name}.experts"), experts, Part::ExpertBank),
            }
        };
        let point = ConvGeometry::new(1, 0, 1);
        let route_in = Conv::create(
            store,
            &format!("{name}.route_in"),
            Part::ExpertBank,
            2,
            cfg.routing_hidden,
            1,
            point,
            Init::HeUniform,
            rng,
        );
        let route_out = Conv::create(
            store,
            &format!("{name}.route_out"),
            Part::ExpertBank,
            cfg.routing_hidden,
            e,
            1,
            point,
            Init::HeUniform,
            rng,
        );
        Ok(ExpertBank {
            storage,
            route_in,
            route_out,
            channels: c,
            kernel: k,
            experts: e,
            scale_max: cfg.scale_max,
        })
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(1/r_v, 1/r_h)` → dense → SiLU → dense → softmax, as a `(1,E,1,1)` var.
    pub fn routing_var<'t, T: Real>(
        &self,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        scale.check(self.scale_max)?;
        let tape = ctx.var(self.route_in.weight).tape();
        let [fv, fh] = scale.features();
        let feat = tape.constant(Tensor::from_vec([1, 2, 1, 1], vec![T::of(fv), T::of(fh)])?);
        let hidden = self.route_in.apply(&feat, ctx.params)?.silu();
        Ok(self
            .route_out
            .apply(&hidden, ctx.params)?
            .softmax_channels())
    }

    /// `Σ_e w_e · expert_e` as a depthwise kernel `(C,1,k,k)`; linear in `w`.
    pub fn blend_var<'t, T: Real>(
        &self,
        w: &Var<'t, T>,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        if w.value().numel() != self.experts {
            return Err(Error::arg(format!(
                "blend needs {} weights, got {}",
                self.experts,
                w.value().numel()
            )));
        }
        let kshape = [self.channels, 1, self.kernel, self.kernel];
        match self.storage {
            ExpertStorage::Direct { experts } => w.mix(&ctx.var(experts), kshape),
            ExpertStorage::Dense { coeffs, basis } => {
                let d = ctx.var(basis).shape()[0];
                let c = w.mix(&ctx.var(coeffs), [1, d, 1, 1])?;
                c.mix(&ctx.var(basis), kshape)
            }
        }
    }

    pub fn routing_weights<T: Real>(
        &self,
        store: &ParamStore<T>,
        scale: ScalePair,
    ) -> Result<Vec<T>> {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        Ok(self.routing_var(scale, &ctx)?.value().data().to_vec())
    }

    pub fn blend<T: Real>(&self, store: &ParamStore<T>, w: &[T]) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        let wv = tape.constant(Tensor::from_vec([1, w.len().max(1), 1, 1], w.to_vec())?);
        Ok(self.blend_var(&wv, &ctx)?.value().as_ref().clone())
    }

    /// Expanded kernel of expert `e`.
    pub fn expert<T: Real>(&self, store: &ParamStore<T>, e: usize) -> Result<Tensor<T>> {
        let mut w = vec![T::zero(); self.experts];
        *w.get_mut(e)
            .ok_or_else(|| Error::arg(format!("expert {e} out of range")))? = T::one();
        self.blend(store, &w)
    }

    /// Parameter id of the routing output layer's weight (for tests/ablations).
    pub fn route_out_weight(&self) -> ParamId {
        self.route_out.weight
    }

    pub fn route_out_bias(&self) -> Option<ParamId> {
        self.route_out.bias
    }

    /// Ids of the stored kernel tensors (direct experts, or coefficients and basis).
    pub fn kernel_params(&self) -> Vec<ParamId> {
        match self.storage {
            ExpertStorage::Direct { experts } => vec![experts],
            ExpertStorage::Dense { coeffs, basis } => vec![coeffs, basis],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SaamBlock {
    pub hourglass: Hourglass,
    pub bank: ExpertBank,
    pub pointwise: Conv,
    channels: usize,
}

impl SaamBlock {
    /// Adds the block's tensors to `store`. The pointwise merge starts at zero
    /// so the block is an identity map until trained.
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SaamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let cb = cfg.bottleneck();
        let g_out = match cfg.guidance {
            GuidanceMode::Single => 1,
            GuidanceMode::PerChannel => c,
        };
        let hg = format!("{name}.guidance");
        let down = Conv::create(
            store,
            &format!("{hg}.down"),
            Part::SaamGuidance,
            c,
            cb,
            3,
            ConvGeometry::new(2, 1, 1),
            Init::HeUniform,
            rng,
        );
        let n0 = NormSlot::create(store, &format!("{hg}.norm0"), cfg, cb);
        let mid = Conv::create(
            store,
            &format!("{hg}.mid"),
            Part::SaamGuidance,
            cb,
            cb,
            3,
            ConvGeometry::same(3),
            Init::HeUniform,
            rng,
        );
        let n1 = NormSlot::create(store, &format!("{hg}.norm1"), cfg, cb);
        let up = Conv::create(
            store,
            &format!("{hg}.up"),
            Part::SaamGuidance,
            cb,
            g_out,
            3,
            ConvGeometry::same(3),
            Init::HeUniform,
            rng,
        );
        let bank = ExpertBank::create(store, &format!("{name}.bank"), cfg, rng)?;
        let pointwise = Conv::create(
            store,
            &format!("{name}.pointwise"),
            Part::SaamPointwise,
            c,
            c,
            1,
            ConvGeometry::new(1, 0, 1),
            Init::Zero,
            rng,
        );
        Ok(SaamBlock {
            hourglass: Hourglass {
                down,
                mid,
                up,
                norms: [n0, n1],
            },
            bank,
            pointwise,
            channels: c,
        })
    }

    fn check_input<T: Real>(&self, f: &Var<'_, T>) -> Result<()> {
        let s = f.shape();
        if s[1] != self.channels {
            return Err(Error::dim(format!(
                "SAAM block expects {} channels, input is {s:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Guidance map in (0,1), spatially matching `f`.
    pub fn guidance<'t, T: Real>(
        &self,
        f: &Var<'t, T>,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        self.check_input(f)?;
        let [_, _, h, w] = f.shape();
        if h < 2 || w < 2 {
            return Err(Error::dim(format!(
                "guidance map needs H, W >= 2, got {h}x{w}"
            )));
        }
        let hg = &self.hourglass;
        let x = hg.down.apply(f, ctx.params)?;
        let x = hg.norms[0].apply(&x, ctx)?.silu();
        let x = hg.mid.apply(&x, ctx.params)?;
        let x = hg.norms[1].apply(&x, ctx)?.silu();
        let x = x.upsample_nearest(h, w)?;
        Ok(hg.up.apply(&x, ctx.params)?.sigmoid())
    }

    /// Depthwise conv with the scale-blended kernel, then the 1×1 merge.
    pub fn adapt<'t, T: Real>(
        &self,
        f: &Var<'t, T>,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        self.check_input(f)?;
        let w = self.bank.routing_var(scale, ctx)?;
        let kernel = self.bank.blend_var(&w, ctx)?;
        let k = self.bank.kernel;
        let dw = f.conv2d(&kernel, None, ConvGeometry::new(1, k / 2, self.channels))?;
        self.pointwise.apply(&dw, ctx.params)
    }

    pub fn forward<'t, T: Real>(
        &self,
        f: &Var<'t, T>,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        let adapted = self.adapt(f, scale, ctx)?;
        let m = self.guidance(f, ctx)?;
        fuse(f, &adapted, &m)
    }
}

/// `F' = F + F_adpt ∘ M`, with `M` broadcast over channels when single-channel.
pub fn fuse<'t, T: Real>(
    f: &Var<'t, T>,
    adapted: &Var<'t, T>,
    m: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    f.add(&adapted.gate(m)?)
}

/// Builds a standalone block (own store) for tests and tools.
pub fn standalone<T: Real>(cfg: &SaamConfig, seed: u64) -> Result<(ParamStore<T>, SaamBlock)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = SaamBlock::create(&mut store, "saam", cfg, &mut rng)?;
    Ok((store, block))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_many, Probe};
    use crate::params::Bound;

    fn cfg(c: usize, e: usize, dense: bool) -> SaamConfig {
        SaamConfig {
            channels: c,
            experts: e,
            kernel: 3,
            dense_layer: dense,
            routing_hidden: 16,
            basis_dim: 8,
            norm: NormKind::Simam,
            simam: SimamConfig::default(),
            guidance: GuidanceMode::Single,
            scale_max: 4.5,
        }
    }

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(shape, 1.0, &mut rng)
    }

    fn with_ctx<R>(
        store: &ParamStore<f64>,
        f: impl for<'a, 't> FnOnce(&'t Tape<f64>, &Ctx<'a, 't, f64>) -> R,
    ) -> R {
        let tape = Tape::inference();
        let bound: Bound<'_, f64> = store.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        f(&tape, &ctx)
    }

    /// Gives the pointwise merge random weights so the adapted path is live.
    fn randomize_pointwise(store: &mut ParamStore<f64>, block: &SaamBlock, seed: u64) {
        let w = store.get(block.pointwise.weight).shape();
        store.set(block.pointwise.weight, noise(w, seed)).unwrap();
        let b = block.pointwise.bias.unwrap();
        store
            .set(b, noise(store.get(b).shape(), seed + 1).map(|v| 0.1 * v))
            .unwrap();
    }

    #[test]
    fn routing_weights_form_a_distribution() {
        let (store, block) = standalone::<f64>(&cfg(8, 16, true), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            use rand::Rng;
            let s = ScalePair::new(rng.gen_range(1.0..4.5), rng.gen_range(1.0..4.5));
            let w = block.bank.routing_weights(&store, s).unwrap();
            assert_eq!(w.len(), 16);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(w, block.bank.routing_weights(&store, s).unwrap());
        }
        for i in 10..=45 {
            let r = i as f64 / 10.0;
            let w = block
                .bank
                .routing_weights(&store, ScalePair::new(r, 5.5 - r))
                .unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn routing_rejects_out_of_range_scale() {
        let (store, block) = standalone::<f64>(&cfg(8, 4, false), 1).unwrap();
        let err = block
            .bank
            .routing_weights(&store, ScalePair::uniform(5.0))
            .unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn forced_logit_dominates() {
        let (mut store, block) = standalone::<f64>(&cfg(8, 16, true), 2).unwrap();
        let wid = block.bank.route_out_weight();
        store
            .set(wid, Tensor::zeros(store.get(wid).shape()))
            .unwrap();
        let bid = block.bank.route_out_bias().unwrap();
        let mut b = Tensor::zeros([1, 16, 1, 1]);
        b.data_mut()[5] = 20.0;
        store.set(bid, b).unwrap();
        let w = block
            .bank
            .routing_weights(&store, ScalePair::new(2.0, 3.0))
            .unwrap();
        assert!(w[5] > 0.9999);
    }

    #[test]
    fn blend_is_linear() {
        for dense in [false, true] {
            let (store, block) = standalone::<f64>(&cfg(6, 16, dense), 3).unwrap();
            let e0 = block.bank.expert(&store, 0).unwrap();
            let mut one_hot = vec![0.0; 16];
            one_hot[0] = 1.0;
            assert_eq!(block.bank.blend(&store, &one_hot).unwrap(), e0);

            let mean = block.bank.blend(&store, &[1.0 / 16.0; 16]).unwrap();
            let mut acc = Tensor::zeros(e0.shape());
            for e in 0..16 {
                acc.add_assign(&block.bank.expert(&store, e).unwrap());
            }
            assert!(mean.max_abs_diff(&acc.map(|v| v / 16.0)) < 1e-12);

            let w1 = noise([1, 16, 1, 1], 4).into_vec();
            let w2 = noise([1, 16, 1, 1], 5).into_vec();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let mut lhs = block.bank.blend(&store, &w1).unwrap();
            lhs.add_assign(&block.bank.blend(&store, &w2).unwrap());
            assert!(lhs.max_abs_diff(&block.bank.blend(&store, &sum).unwrap()) < 1e-6);
            assert!(block.bank.blend(&store, &w1[..3]).is_err());
        }
    }

    #[test]
    fn dense_bank_is_smaller() {
        let count = |dense| {
            let (store, _) = standalone::<f64>(&cfg(16, 16, dense), 0).unwrap();
            store
                .entries()
                .iter()
                .filter(|e| e.part == Part::ExpertBank)
                .map(|e| e.value.numel())
                .sum::<usize>()
        };
        assert!(count(true) < count(false));
        // stored kernel values with compression stay below E·C·k²
        for e in [2, 4, 16, 64] {
            let c = cfg(16, e, true);
            let d = c.effective_basis_dim().unwrap();
            assert!(e * d + d * 16 * 9 < e * 16 * 9, "E={e} d={d}");
        }
        assert!(cfg(16, 1, true).effective_basis_dim().is_err());
    }

    #[test]
    fn zero_experts_zero_bias_give_zero_adaptation() {
        let (mut store, block) = standalone::<f64>(&cfg(4, 3, false), 5).unwrap();
        randomize_pointwise(&mut store, &block, 6);
        for id in block.bank.kernel_params() {
            store.set(id, Tensor::zeros(store.get(id).shape())).unwrap();
        }
        let b = block.pointwise.bias.unwrap();
        store.set(b, Tensor::zeros([1, 4, 1, 1])).unwrap();
        let f = noise([2, 4, 5, 6], 7);
        let (adapted, out) = with_ctx(&store, |tape, ctx| {
            let fv = tape.constant(f.clone());
            let a = block.adapt(&fv, ScalePair::uniform(2.0), ctx).unwrap();
            let o = block.forward(&fv, ScalePair::uniform(2.0), ctx).unwrap();
            (a.value().as_ref().clone(), o.value().as_ref().clone())
        });
        assert!(adapted.data().iter().all(|&v| v == 0.0));
        assert_eq!(out, f);
    }

    #[test]
    fn identity_pointwise_and_dirac_expert_pass_through() {
        let (mut store, block) = standalone::<f64>(&cfg(4, 1, false), 5).unwrap();
        let experts = block.bank.kernel_params()[0];
        store
            .set(
                experts,
                Tensor::from_fn(
                    [1, 4, 3, 3],
                    |[_, _, h, w]| if h == 1 && w == 1 { 1.0 } else { 0.0 },
                ),
            )
            .unwrap();
        store
            .set(
                block.pointwise.weight,
                Tensor::from_fn([4, 4, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 }),
            )
            .unwrap();
        let f = noise([1, 4, 6, 5], 8);
        let adapted = with_ctx(&store, |tape, ctx| {
            let fv = tape.constant(f.clone());
            block
                .adapt(&fv, ScalePair::new(1.5, 3.0), ctx)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        });
        assert_eq!(adapted, f);
    }

    #[test]
    fn single_expert_matches_full_dynamic_conv_oracle() {
        let (mut store, block) = standalone::<f64>(&cfg(3, 1, false), 9).unwrap();
        store
            .set(
                block.pointwise.weight,
                Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 }),
            )
            .unwrap();
        let kernel = store.get(block.bank.kernel_params()[0]).clone();
        let f = noise([2, 3, 5, 4], 10);
        let got = with_ctx(&store, |tape, ctx| {
            let fv = tape.constant(f.clone());
            block
                .adapt(&fv, ScalePair::uniform(3.0), ctx)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        });
        // nested-loop oracle: per-channel 3×3 correlation with zero padding
        let oracle = Tensor::from_fn([2, 3, 5, 4], |[n, c, y, x]| {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                        acc += kernel.at([0, c, ky, kx]) * f.at([n, c, iy as usize, ix as usize]);
                    }
                }
            }
            acc
        });
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn guidance_shape_and_range() {
        let (store, block) = standalone::<f64>(&cfg(8, 4, true), 11).unwrap();
        for h in 5..=8 {
            for w in 5..=8 {
                let m = with_ctx(&store, |tape, ctx| {
                    let fv = tape.constant(noise([1, 8, h, w], (h * 10 + w) as u64));
                    block.guidance(&fv, ctx).unwrap().value().as_ref().clone()
                });
                assert_eq!(m.shape(), [1, 1, h, w]);
                assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        let err = with_ctx(&store, |tape, ctx| {
            block
                .guidance(&tape.constant(noise([1, 8, 1, 6], 1)), ctx)
                .map(|_| ())
        });
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_hourglass_gives_half_gate() {
        let (mut store, block) = standalone::<f64>(&cfg(8, 4, true), 12).unwrap();
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.entries()[id.0].part == Part::SaamGuidance)
            .collect();
        for id in ids {
            store.set(id, Tensor::zeros(store.get(id).shape())).unwrap();
        }
        let m = with_ctx(&store, |tape, ctx| {
            let fv = tape.constant(noise([2, 8, 7, 6], 13));
            block.guidance(&fv, ctx).unwrap().value().as_ref().clone()
        });
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_identities() {
        let (mut store, block) = standalone::<f64>(&cfg(6, 4, true), 14).unwrap();
        randomize_pointwise(&mut store, &block, 15);
        for seed in 0..5 {
            let f = noise([2, 6, 6, 5], 100 + seed);
            with_ctx(&store, |tape, ctx| {
                let fv = tape.constant(f.clone());
                let adapted = block.adapt(&fv, ScalePair::new(2.0, 3.5), ctx).unwrap();
                let zero = tape.constant(Tensor::zeros([2, 1, 6, 5]));
                let one = tape.constant(Tensor::full([2, 1, 6, 5], 1.0));
                let out0 = fuse(&fv, &adapted, &zero).unwrap().value();
                assert!(out0.max_abs_diff(&f) < 1e-6);
                let out1 = fuse(&fv, &adapted, &one).unwrap().value();
                let expect = f.zip_map(&adapted.value(), |a, b| a + b).unwrap();
                assert!(out1.max_abs_diff(&expect) < 1e-6);
            });
        }
    }

    #[test]
    fn forward_matches_composition_oracle() {
        let (mut store, block) = standalone::<f64>(&cfg(6, 16, true), 16).unwrap();
        randomize_pointwise(&mut store, &block, 17);
        let f = noise([1, 6, 7, 6], 18);
        let s = ScalePair::new(1.7, 2.9);
        let (out, adapted, m) = with_ctx(&store, |tape, ctx| {
            let fv = tape.constant(f.clone());
            (
                block.forward(&fv, s, ctx).unwrap().value().as_ref().clone(),
                block.adapt(&fv, s, ctx).unwrap().value().as_ref().clone(),
                block.guidance(&fv, ctx).unwrap().value().as_ref().clone(),
            )
        });
        let oracle = Tensor::from_fn(f.shape(), |[n, c, y, x]| {
            f.at([n, c, y, x]) + adapted.at([n, c, y, x]) * m.at([n, 0, y, x])
        });
        assert!(out.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn whole_block_gradient() {
        for (norm, guidance) in [
            (NormKind::Simam, GuidanceMode::Single),
            (NormKind::BatchNorm, GuidanceMode::PerChannel),
        ] {
            let mut c = cfg(4, 4, true);
            c.norm = norm;
            c.guidance = guidance;
            let (mut store, block) = standalone::<f64>(&c, 19).unwrap();
            randomize_pointwise(&mut store, &block, 20);
            let f = noise([2, 4, 6, 6], 21);
            let probe = noise([2, 4, 6, 6], 22);
            let mut inputs = vec![f];
            inputs.extend(store.trainable_ids().map(|id| store.get(id).clone()));
            // biases feeding a batch norm have an exactly zero gradient; skip them
            let sampler = Probe::Sample {
                per_tensor: 12,
                seed: 23,
            };
            let names: Vec<Option<&str>> = std::iter::once(None)
                .chain(store.trainable_ids().map(|id| Some(store.name(id))))
                .collect();
            let lists = names
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let pre_bn = norm == NormKind::BatchNorm
                        && name
                            .is_some_and(|n| n.ends_with("down.bias") || n.ends_with("mid.bias"));
                    if pre_bn {
                        Vec::new()
                    } else {
                        sampler.coords(i, inputs[i].numel())
                    }
                })
                .collect();
            let report = finite_diff_check_many(
                |vars| {
                    let tape = vars[0].tape();
                    let bound = store.bind_from(tape, &vars[1..])?;
                    let ctx = Ctx::new(&bound, Mode::Train);
                    let out = block.forward(&vars[0], ScalePair::new(2.5, 1.5), &ctx)?;
                    Ok(out.mul(&tape.constant(probe.clone()))?.sum())
                },
                &inputs,
                1e-3,
                Probe::Listed(lists),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{norm:?}: {report:?}");
        }
    }
}
