//! Residual CNN backbone with SAAM blocks inserted every `K` blocks and the
//! scale-aware upsampler as its tail.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::norm::NormKind;
use crate::params::{he_bound, uniform, Conv, Ctx, Init, Mode, ParamStore, Part};
use crate::saam::{GuidanceMode, SaamBlock, SaamConfig};
use crate::scale::{RoundMode, ScalePair};
use crate::simam::SimamConfig;
use crate::tensor::{ConvGeometry, Real, Tensor};
use crate::upsampler::{Upsampler, UpsamplerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_blocks: usize,
    /// A SAAM block follows every `period` residual blocks.
    pub period: usize,
    pub experts: usize,
    pub expert_kernel: usize,
    pub dense_layer: bool,
    pub norm: NormKind,
    pub guidance: GuidanceMode,
    pub simam: SimamConfig,
    /// Upsampler neighbourhood `k_u` and kernel-predictor width `d_u`.
    pub k_u: usize,
    pub d_u: usize,
    /// Routing width `d_r` and compressed basis size `d_b`.
    pub d_r: usize,
    pub d_b: usize,
    pub scale_max: f64,
    pub round: RoundMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            num_blocks: 4,
            period: 2,
            experts: 16,
            expert_kernel: 3,
            dense_layer: true,
            norm: NormKind::Simam,
            guidance: GuidanceMode::Single,
            simam: SimamConfig::default(),
            k_u: 4,
            d_u: 32,
            d_r: 16,
            d_b: 8,
            scale_max: 4.5,
            round: RoundMode::Floor,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, field: &str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, msg))
            }
        };
        need(
            self.channels >= 4,
            "channels",
            format!("must be >= 4, got {}", self.channels),
        )?;
        need(
            self.num_blocks >= 1,
            "num_blocks",
            format!("must be >= 1, got {}", self.num_blocks),
        )?;
        need(
            (1..=self.num_blocks).contains(&self.period),
            "period",
            format!(
                "must satisfy 1 <= period <= num_blocks ({}), got {}",
                self.num_blocks, self.period
            ),
        )?;
        need(
            self.experts >= 1,
            "experts",
            format!("must be >= 1, got {}", self.experts),
        )?;
        need(
            self.expert_kernel % 2 == 1,
            "expert_kernel",
            format!("must be odd, got {}", self.expert_kernel),
        )?;
        need(
            self.k_u >= 2 && self.k_u.is_multiple_of(2),
            "k_u",
            format!("must be even and >= 2, got {}", self.k_u),
        )?;
        need(
            self.d_u >= 1,
            "d_u",
            format!("must be >= 1, got {}", self.d_u),
        )?;
        need(
            self.d_r >= 1,
            "d_r",
            format!("must be >= 1, got {}", self.d_r),
        )?;
        need(
            self.d_b >= 1,
            "d_b",
            format!("must be >= 1, got {}", self.d_b),
        )?;
        need(
            self.scale_max.is_finite() && self.scale_max >= 1.0,
            "scale_max",
            format!("must be >= 1, got {}", self.scale_max),
        )?;
        self.simam.validate()?;
        if self.dense_layer {
            self.saam().effective_basis_dim()?;
        }
        Ok(())
    }

    pub fn saam_blocks(&self) -> usize {
        self.num_blocks / self.period
    }

    pub fn saam(&self) -> SaamConfig {
        SaamConfig {
            channels: self.channels,
            experts: self.experts,
            kernel: self.expert_kernel,
            dense_layer: self.dense_layer,
            routing_hidden: self.d_r,
            basis_dim: self.d_b,
            norm: self.norm,
            simam: self.simam,
            guidance: self.guidance,
            scale_max: self.scale_max,
        }
    }

    pub fn upsampler(&self) -> UpsamplerConfig {
        UpsamplerConfig {
            channels: self.channels,
            neighborhood: self.k_u,
            hidden: self.d_u,
            simam: self.simam,
            round: self.round,
            scale_max: self.scale_max,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

/// Layer layout plus the parameter tensors it indexes.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub params: ParamStore<T>,
    cfg: ModelConfig,
    head: Conv,
    blocks: Vec<ResBlock>,
    saam: Vec<SaamBlock>,
    upsampler: Upsampler,
}

/// Per-bucket trainable parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub total: usize,
    pub parts: Vec<(Part, usize)>,
    /// Every tensor once: (name, element count, trainable).
    pub tensors: Vec<(String, usize, bool)>,
}

impl ParamAudit {
    pub fn part(&self, part: Part) -> usize {
        self.parts
            .iter()
            .find(|(p, _)| *p == part)
            .map_or(0, |(_, n)| *n)
    }

    /// SAAM blocks in total: guidance, expert bank and pointwise merge.
    pub fn saam(&self) -> usize {
        self.part(Part::SaamGuidance) + self.part(Part::ExpertBank) + self.part(Part::SaamPointwise)
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, n) in &self.parts {
            writeln!(f, "{:<18} {n:>8}", p.label())?;
        }
        writeln!(f, "{:<18} {:>8}", "simam", 0)?;
        write!(f, "{:<18} {:>8}", "total", self.total)
    }
}

impl<T: Real> Model<T> {
    /// Seeded build: He-uniform convolutions, SAAM merges at zero.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let c = cfg.channels;
        let same = ConvGeometry::same(3);
        let head = Conv::create(
            &mut params,
            "head",
            Part::Backbone,
            3,
            c,
            3,
            same,
            Init::HeUniform,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut saam = Vec::with_capacity(cfg.saam_blocks());
        let scfg = cfg.saam();
        for i in 0..cfg.num_blocks {
            let name = format!("block{i}");
            let conv1 = Conv::create(
                &mut params,
                &format!("{name}.conv1"),
                Part::Backbone,
                c,
                c,
                3,
                same,
                Init::HeUniform,
                &mut rng,
            );
            let conv2 = Conv::create(
                &mut params,
                &format!("{name}.conv2"),
                Part::Backbone,
                c,
                c,
                3,
                same,
                Init::HeUniform,
                &mut rng,
            );
            blocks.push(ResBlock { conv1, conv2 });
            if (i + 1) % cfg.period == 0 {
                saam.push(SaamBlock::create(
                    &mut params,
                    &format!("saam{}", saam.len()),
                    &scfg,
                    &mut rng,
                )?);
            }
        }
        let upsampler = Upsampler::create(&mut params, "upsampler", &cfg.upsampler(), &mut rng)?;
        Ok(Model {
            params,
            cfg: cfg.clone(),
            head,
            blocks,
            saam,
            upsampler,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn saam_blocks(&self) -> &[SaamBlock] {
        &self.saam
    }

    pub fn upsampler(&self) -> &Upsampler {
        &self.upsampler
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            params: self.params.cast(),
            cfg: self.cfg.clone(),
            head: self.head,
            blocks: self.blocks.clone(),
            saam: self.saam.clone(),
            upsampler: self.upsampler.clone(),
        }
    }

    /// Replaces every zero-initialized weight (SAAM merges, kernel predictor
    /// output, reconstruction) with random draws so that every path carries
    /// signal. Used by diagnostics.
    pub fn activate(&mut self, seed: u64) {
        self.activate_upsampler(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5aa3);
        for id in self
            .saam
            .iter()
            .map(|b| b.pointwise.weight)
            .collect::<Vec<_>>()
        {
            let shape = self.params.get(id).shape();
            *self.params.get_mut(id) = uniform(shape, he_bound(shape), &mut rng);
        }
    }

    /// Randomizes only the upsampler's zero-initialized weights, leaving the
    /// SAAM blocks at their identity initialization.
    pub fn activate_upsampler(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kp = self.upsampler.kpred_out.weight;
        let shape = self.params.get(kp).shape();
        *self.params.get_mut(kp) = uniform(shape, he_bound(shape), &mut rng);
        let rc = self.upsampler.recon.weight;
        let shape = self.params.get(rc).shape();
        *self.params.get_mut(rc) = uniform(shape, 0.1 * he_bound(shape), &mut rng);
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn audit(&self) -> ParamAudit {
        let parts = Part::ALL
            .iter()
            .map(|&p| {
                let n = self
                    .params
                    .entries()
                    .iter()
                    .filter(|e| e.trainable && e.part == p)
                    .map(|e| e.value.numel())
                    .sum();
                (p, n)
            })
            .collect();
        ParamAudit {
            total: self.param_count(),
            parts,
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.numel(), e.trainable))
                .collect(),
        }
    }

    /// Differentiable forward. `bypass_saam` skips every SAAM block.
    pub fn forward_var<'t>(
        &self,
        lr: &Var<'t, T>,
        scale: ScalePair,
        ctx: &Ctx<'_, 't, T>,
        bypass_saam: bool,
    ) -> Result<Var<'t, T>> {
        let [_, c, h, w] = lr.shape();
        let k = self.cfg.k_u;
        if c != 3 {
            return Err(Error::dim(format!(
                "model input must have 3 channels, got {:?}",
                lr.shape()
            )));
        }
        if h < k || w < k {
            return Err(Error::dim(format!(
                "model input {h}x{w} is smaller than the {k}x{k} upsampling neighbourhood"
            )));
        }
        scale.check(self.cfg.scale_max)?;
        let p = ctx.params;
        let skip = self.head.apply(lr, p)?;
        let mut f = skip;
        let mut saam = self.saam.iter();
        for (i, b) in self.blocks.iter().enumerate() {
            let r = b.conv2.apply(&b.conv1.apply(&f, p)?.silu(), p)?;
            f = f.add(&r)?;
            if (i + 1) % self.cfg.period == 0 {
                let s = saam.next().expect("one SAAM block per period");
                if !bypass_saam {
                    f = s.forward(&f, scale, ctx)?;
                }
            }
        }
        let f = f.add(&skip)?;
        let hr = self.upsampler.upsample_var(&f, scale, ctx)?;
        self.upsampler.reconstruct_var(&hr, ctx)
    }

    /// Inference in evaluation mode.
    pub fn forward(&self, lr: &Tensor<T>, scale: ScalePair) -> Result<Tensor<T>> {
        self.forward_with(lr, scale, false)
    }

    pub fn forward_with(
        &self,
        lr: &Tensor<T>,
        scale: ScalePair,
        bypass_saam: bool,
    ) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let ctx = Ctx::new(&bound, Mode::Eval);
        let out = self.forward_var(&tape.constant(lr.clone()), scale, &ctx, bypass_saam)?;
        Ok(out.value().as_ref().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_parameter_count_is_frozen() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let a = m.audit();
        assert_eq!(a.total, 27_285, "\n{a}");
        assert_eq!(a.part(Part::Backbone), 448 + 8 * 2320);
        assert_eq!(a.part(Part::Upsampler), 899);
        assert_eq!(a.saam(), 2 * 3689);
        assert!((20_000..80_000).contains(&a.total));
        assert_eq!(a.parts.iter().map(|p| p.1).sum::<usize>(), a.total);
        let mut names: Vec<_> = a.tensors.iter().map(|t| &t.0).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), a.tensors.len());
    }

    #[test]
    fn saam_block_count_and_validation() {
        for (b, k, n) in [(4, 2, 2), (4, 1, 4), (4, 4, 1), (5, 2, 2), (3, 2, 1)] {
            let cfg = ModelConfig {
                num_blocks: b,
                period: k,
                ..Default::default()
            };
            assert_eq!(Model::<f32>::build(&cfg).unwrap().saam_blocks().len(), n);
        }
        for (cfg, field) in [
            (
                ModelConfig {
                    period: 0,
                    ..Default::default()
                },
                "period",
            ),
            (
                ModelConfig {
                    period: 5,
                    ..Default::default()
                },
                "period",
            ),
            (
                ModelConfig {
                    channels: 3,
                    ..Default::default()
                },
                "channels",
            ),
            (
                ModelConfig {
                    k_u: 3,
                    ..Default::default()
                },
                "k_u",
            ),
        ] {
            match Model::<f32>::build(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let b = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let c = Model::<f32>::build(&ModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let bits = |m: &Model<f32>| -> Vec<u32> {
            m.params
                .entries()
                .iter()
                .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn audit_directions() {
        let count = |cfg: ModelConfig| Model::<f32>::build(&cfg).unwrap().audit();
        let dense = count(ModelConfig::default());
        let direct = count(ModelConfig {
            dense_layer: false,
            ..Default::default()
        });
        assert!(dense.total < direct.total);
        let e32 = count(ModelConfig {
            experts: 32,
            dense_layer: false,
            ..Default::default()
        });
        for p in Part::ALL {
            if p == Part::ExpertBank {
                assert!(e32.part(p) > direct.part(p));
            } else {
                assert_eq!(e32.part(p), direct.part(p), "{}", p.label());
            }
        }
    }

    #[test]
    fn safe_init_is_neutral() {
        let mut m = Model::<f64>::build(&ModelConfig::default()).unwrap();
        let x = noise([1, 3, 8, 8], 1);
        assert!(m
            .forward(&x, ScalePair::uniform(2.0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        m.activate_upsampler(2);
        for s in [
            ScalePair::uniform(2.0),
            ScalePair::new(2.0, 3.0),
            ScalePair::uniform(3.7),
        ] {
            let a = m.forward_with(&x, s, false).unwrap();
            let b = m.forward_with(&x, s, true).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
            assert!(a.data().iter().any(|&v| v.abs() > 1e-3));
        }
        let mut live = m.clone();
        live.activate(3);
        let a = live
            .forward_with(&x, ScalePair::uniform(2.0), false)
            .unwrap();
        let b = live
            .forward_with(&x, ScalePair::uniform(2.0), true)
            .unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let x = noise([1, 3, 10, 12], 2).cast();
        for (s, dims) in [
            (ScalePair::uniform(1.5), [15, 18]),
            (ScalePair::new(2.0, 3.0), [20, 36]),
            (ScalePair::uniform(3.7), [37, 44]),
            (ScalePair::uniform(1.0), [10, 12]),
        ] {
            let y = m.forward(&x, s).unwrap();
            assert_eq!(y.shape(), [1, 3, dims[0], dims[1]], "{s}");
        }
        assert!(m
            .forward(&noise([1, 3, 3, 12], 2).cast(), ScalePair::uniform(2.0))
            .is_err());
        assert!(m
            .forward(&noise([1, 1, 8, 8], 2).cast(), ScalePair::uniform(2.0))
            .is_err());
        assert!(matches!(
            m.forward(&x, ScalePair::uniform(5.0)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn batch_independence() {
        for norm in [NormKind::Simam, NormKind::BatchNorm] {
            let mut m = Model::<f64>::build(&ModelConfig {
                norm,
                ..Default::default()
            })
            .unwrap();
            m.activate(4);
            let (a, b) = (noise([1, 3, 8, 9], 5), noise([1, 3, 8, 9], 6));
            let s = ScalePair::new(2.5, 2.0);
            let both = m
                .forward(&Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap(), s)
                .unwrap();
            let sep = Tensor::stack_batch(&[m.forward(&a, s).unwrap(), m.forward(&b, s).unwrap()])
                .unwrap();
            assert!(both.max_abs_diff(&sep) < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let x = noise([2, 3, 16, 16], 7).cast();
        let a = m.forward(&x, ScalePair::uniform(3.0)).unwrap();
        let b = m.forward(&x, ScalePair::uniform(3.0)).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
    }
}
