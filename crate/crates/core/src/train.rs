//! Multi-scale training loop: sample a batch at one scale, forward, L1 + GV
//! loss, backward, Adam.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{load_dataset, sample_batch, Batch, BatchSpec, Image};
use crate::error::{Error, Result};
use crate::loss::{total_loss_var, GvConfig};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::params::{Ctx, Mode, ParamStore};
use crate::scale::ScalePair;
use crate::tensor::Tensor;

/// Totals kept for the non-finite diagnostic.
const RECENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub scale: ScalePair,
    pub l1: f64,
    pub gv: f64,
    pub total: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} scale={}x{} l1={:.6} gv={:.6} total={:.6}",
            self.step, self.scale.v, self.scale.h, self.l1, self.gv, self.total
        )
    }
}

pub struct Trainer {
    pub model: Model<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    spec: BatchSpec,
    gv: GvConfig,
    step: usize,
    recent: VecDeque<f64>,
    best: Option<(f64, usize, ParamStore<f32>)>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(cfg.adam, &model.params),
            model,
            rng,
            spec: BatchSpec {
                scales: cfg.scales.clone(),
                lr_patch: cfg.lr_patch,
                batch: cfg.batch,
            },
            gv: cfg.gv,
            step: 0,
            recent: VecDeque::with_capacity(RECENT),
            best: None,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws the next batch and takes one optimization step on it.
    pub fn step(&mut self, dataset: &[Image]) -> Result<StepLog> {
        let batch = sample_batch(dataset, &self.spec, &mut self.rng)?;
        self.step_on(&batch)
    }

    /// One optimization step on a given batch. The logged losses are those of
    /// the parameters before the update.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepLog> {
        self.step += 1;
        let (log, grads, updates) = {
            let tape = Tape::new();
            let bound = self.model.params.bind(&tape);
            let ctx = Ctx::new(&bound, Mode::Train);
            let sr = self.model.forward_var(
                &tape.constant(batch.lr.clone()),
                batch.scale,
                &ctx,
                false,
            )?;
            let terms = total_loss_var(&tape.constant(batch.hr.clone()), &sr, &self.gv)?;
            let log = StepLog {
                step: self.step,
                scale: batch.scale,
                l1: terms.l1.item() as f64,
                gv: terms.gv.item() as f64,
                total: terms.total.item() as f64,
            };
            if !log.total.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    recent: self.recent.iter().copied().collect(),
                });
            }
            let g = tape.backward(terms.total)?;
            let grads: Vec<Tensor<f32>> = self
                .model
                .params
                .trainable_ids()
                .map(|id| g.get_or_zeros(bound.var(id)))
                .collect();
            (log, grads, ctx.take_updates())
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                recent: self.recent.iter().copied().collect(),
            });
        }
        if self.best.as_ref().is_none_or(|b| log.total < b.0) {
            self.best = Some((log.total, self.step, self.model.params.clone()));
        }
        self.adam.update(&mut self.model.params, &grads)?;
        self.model.params.apply_stat_updates(&updates);
        if self.recent.len() == RECENT {
            self.recent.pop_front();
        }
        self.recent.push_back(log.total);
        Ok(log)
    }

    /// Parameters that achieved the lowest batch loss, with that loss and step.
    pub fn best(&self) -> Option<(f64, usize, Model<f32>)> {
        self.best.as_ref().map(|(loss, step, params)| {
            let mut m = self.model.clone();
            m.params = params.clone();
            (*loss, *step, m)
        })
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Lowest-loss parameters; the initial model when no step ran.
    pub best: Model<f32>,
    pub best_step: usize,
    pub curve: Vec<StepLog>,
}

/// Trains on an in-memory dataset. `on_log` receives the lines due every
/// `log_every` steps and the final step.
pub fn train_on(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[Image],
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    check_patch_fits(cfg, dataset)?;
    let model = Model::build(model_cfg)?;
    let mut t = Trainer::new(model, cfg)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let log = t.step(dataset)?;
        if s % cfg.log_every == 0 || s == cfg.steps || s == 1 {
            on_log(&log);
        }
        curve.push(log);
    }
    let (best, best_step) = match t.best() {
        Some((_, step, m)) => (m, step),
        None => (t.model.clone(), 0),
    };
    Ok(TrainOutcome {
        model: t.model,
        best,
        best_step,
        curve,
    })
}

/// `lr_patch · max scale` must fit inside the smallest image.
pub fn check_patch_fits(cfg: &TrainConfig, dataset: &[Image]) -> Result<()> {
    let need = (cfg.lr_patch as f64 * cfg.scales.max() + 1e-9).floor() as usize;
    if let Some(img) = dataset.iter().min_by_key(|i| i.height().min(i.width())) {
        let have = img.height().min(img.width());
        if need > have {
            return Err(Error::config(
                "lr_patch",
                format!(
                    "lr_patch {} at scale {} needs {need}px crops but `{}` is only {have}px",
                    cfg.lr_patch,
                    cfg.scales.max(),
                    img.name
                ),
            ));
        }
    }
    Ok(())
}

/// `model.saam` → `model.best.saam`.
pub fn best_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

/// Full run from a configuration: load data, train, write the final and the
/// best checkpoint and the log.
pub fn run(cfg: &RunConfig, mut on_log: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let dataset = load_dataset(&cfg.train.data_dir)?;
    let log_path = cfg
        .train
        .log_file
        .clone()
        .unwrap_or_else(|| cfg.train.checkpoint.with_extension("log"));
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let result = train_on(&cfg.model, &cfg.train, &dataset, |l| {
        if let Err(e) = writeln!(log_file, "{l}") {
            write_err.get_or_insert(e);
        }
        on_log(l)
    });
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let outcome = result?;
    checkpoint::save(&outcome.model, &cfg.train.checkpoint)?;
    checkpoint::save(&outcome.best, &best_path(&cfg.train.checkpoint))?;
    Ok(outcome)
}
