//! Named parameter storage shared by layers, the optimizer and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, ConvGeometry, Real, Shape, Tensor};

/// Accounting bucket used by the parameter audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Backbone,
    SaamGuidance,
    ExpertBank,
    SaamPointwise,
    Upsampler,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::Backbone,
        Part::SaamGuidance,
        Part::ExpertBank,
        Part::SaamPointwise,
        Part::Upsampler,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Part::Backbone => "backbone",
            Part::SaamGuidance => "saam.guidance",
            Part::ExpertBank => "saam.expert_bank",
            Part::SaamPointwise => "saam.pointwise",
            Part::Upsampler => "upsampler",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are saved but not optimized.
    pub trainable: bool,
    pub part: Part,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, part: Part) -> ParamId {
        self.push(name.into(), value, part, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>, part: Part) -> ParamId {
        self.push(name.into(), value, part, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, part: Part, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            part,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter `{}` is {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Puts every tensor on the tape. Trainable tensors become gradient leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                    part: e.part,
                })
                .collect(),
        }
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

pub(crate) fn uniform<T: Real>(shape: Shape, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..numel(&shape))
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("uniform init shape")
}

/// He-uniform bound for a kernel `(C_out, C_in/groups, k, k)`.
pub(crate) fn he_bound(kernel: Shape) -> f64 {
    let fan_in = (kernel[1] * kernel[2] * kernel[3]) as f64;
    (6.0 / fan_in).sqrt()
}

/// A convolution whose kernel and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        part: Part,
        c_in: usize,
        c_out: usize,
        k: usize,
        geo: ConvGeometry,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let shape = [c_out, c_in / geo.groups, k, k];
        let kernel = match init {
            Init::HeUniform => uniform(shape, he_bound(shape), rng),
            Init::Zero => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), kernel, part);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros([1, c_out, 1, 1]),
            part,
        );
        Conv {
            weight,
            bias: Some(bias),
            geo,
        }
    }

    pub fn apply<'t, T: Real>(&self, x: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let bias = self.bias.map(|b| p.var(b));
        x.conv2d(&p.var(self.weight), bias.as_ref(), self.geo)
    }
}

/// Training mode normalizes with batch statistics and records running-stat
/// updates; evaluation mode uses the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a batch-norm slot in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: crate::norm::BatchStats<T>,
}

/// Per-forward context: bound parameters, mode and collected stat updates.
pub struct Ctx<'a, 't, T> {
    pub params: &'a Bound<'t, T>,
    pub mode: Mode,
    pub(crate) updates: std::cell::RefCell<Vec<StatUpdate<T>>>,
}

impl<'a, 't, T: Real> Ctx<'a, 't, T> {
    pub fn new(params: &'a Bound<'t, T>, mode: Mode) -> Self {
        Ctx {
            params,
            mode,
            updates: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.params.var(id)
    }

    pub fn take_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

impl<T: Real> ParamStore<T> {
    /// Folds batch statistics into the running estimates.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        let m = T::of(crate::norm::BN_MOMENTUM);
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
                for (r, &b) in self.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    /// Binds with caller-supplied vars for the trainable tensors (in
    /// [`trainable_ids`](Self::trainable_ids) order); buffers become constants.
    pub fn bind_from<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: &[Var<'t, T>],
    ) -> Result<Bound<'t, T>> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.trainable {
                let v = *it
                    .next()
                    .ok_or_else(|| Error::arg("bind_from: too few trainable vars"))?;
                if v.shape() != e.value.shape() {
                    return Err(Error::dim(format!(
                        "bind_from: `{}` is {:?}, var is {:?}",
                        e.name,
                        e.value.shape(),
                        v.shape()
                    )));
                }
                vars.push(v);
            } else {
                vars.push(tape.constant(e.value.clone()));
            }
        }
        if it.next().is_some() {
            return Err(Error::arg("bind_from: too many trainable vars"));
        }
        Ok(Bound { vars })
    }
}
