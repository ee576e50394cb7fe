//! Plain-text `key=value` configuration. One pair per line, `#` starts a
//! comment, unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ScaleSampling;
use crate::error::{Error, Result};
use crate::loss::GvConfig;
use crate::model::ModelConfig;
use crate::norm::NormKind;
use crate::optim::AdamConfig;
use crate::saam::GuidanceMode;
use crate::scale::{RoundMode, ScalePair};

pub const MODEL_KEYS: &[&str] = &[
    "channels",
    "num_blocks",
    "period",
    "experts",
    "expert_kernel",
    "dense_layer",
    "norm",
    "guidance",
    "simam_lambda",
    "simam_unbiased",
    "k_u",
    "d_u",
    "d_r",
    "d_b",
    "scale_max",
    "round",
    "seed",
];

pub const TRAIN_KEYS: &[&str] = &[
    "data_dir",
    "scales",
    "continuous_scales",
    "lr_patch",
    "batch",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda_gv",
    "gv_window",
    "checkpoint",
    "log_every",
    "log_file",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub scales: ScaleSampling,
    pub lr_patch: usize,
    pub batch: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub gv: GvConfig,
    /// Seeds patch sampling; the model seed lives in [`ModelConfig`].
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log_every: usize,
    pub log_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data"),
            scales: ScaleSampling::Fixed(vec![
                ScalePair::uniform(2.0),
                ScalePair::uniform(3.0),
                ScalePair::uniform(4.0),
            ]),
            lr_patch: 32,
            batch: 8,
            steps: 2000,
            adam: AdamConfig::default(),
            gv: GvConfig::default(),
            seed: 0,
            checkpoint: PathBuf::from("model.saam"),
            log_every: 50,
            log_file: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lr_patch", self.lr_patch),
            ("batch", self.batch),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if let ScaleSampling::Fixed(list) = &self.scales {
            if list.is_empty() {
                return Err(Error::config("scales", "at least one scale is required"));
            }
            for s in list {
                if s.v < 1.0 || s.h < 1.0 {
                    return Err(Error::config("scales", format!("scale {s} is below 1")));
                }
            }
        }
        self.adam.validate()?;
        self.gv.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Splits text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                &format!("line {}", i + 1),
                format!("expected key=value, got `{line}`"),
            )
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(Error::config(
                &k,
                format!("set twice (lines {prev} and {})", i + 1),
            ));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got `{v}`"),
        )),
    }
}

/// Sets one model key. Returns `false` for keys that are not model keys.
fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "channels" => m.channels = num(key, v)?,
        "num_blocks" => m.num_blocks = num(key, v)?,
        "period" => m.period = num(key, v)?,
        "experts" => m.experts = num(key, v)?,
        "expert_kernel" => m.expert_kernel = num(key, v)?,
        "dense_layer" => m.dense_layer = boolean(key, v)?,
        "norm" => {
            m.norm = NormKind::parse(v).ok_or_else(|| {
                Error::config(key, format!("expected simam or batchnorm, got `{v}`"))
            })?
        }
        "guidance" => {
            m.guidance = GuidanceMode::parse(v).ok_or_else(|| {
                Error::config(key, format!("expected single or per_channel, got `{v}`"))
            })?
        }
        "simam_lambda" => m.simam.lambda = num(key, v)?,
        "simam_unbiased" => m.simam.variance_unbiased = boolean(key, v)?,
        "k_u" => m.k_u = num(key, v)?,
        "d_u" => m.d_u = num(key, v)?,
        "d_r" => m.d_r = num(key, v)?,
        "d_b" => m.d_b = num(key, v)?,
        "scale_max" => m.scale_max = num(key, v)?,
        "round" => {
            m.round = RoundMode::parse(v)
                .ok_or_else(|| Error::config(key, format!("expected floor or round, got `{v}`")))?
        }
        "seed" => m.seed = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn scale_list(key: &str, v: &str) -> Result<Vec<ScalePair>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<ScalePair>()
                .map_err(|e| Error::config(key, e.to_string()))
        })
        .collect()
}

fn unknown(key: &str, line: usize) -> Error {
    Error::config(key, format!("unknown key on line {line}"))
}

impl ModelConfig {
    /// Serialized form stored in checkpoints; parses back with
    /// [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let m = self;
        let mut s = String::new();
        let pairs: [(&str, String); 17] = [
            ("channels", m.channels.to_string()),
            ("num_blocks", m.num_blocks.to_string()),
            ("period", m.period.to_string()),
            ("experts", m.experts.to_string()),
            ("expert_kernel", m.expert_kernel.to_string()),
            ("dense_layer", m.dense_layer.to_string()),
            ("norm", m.norm.as_str().into()),
            ("guidance", m.guidance.as_str().into()),
            ("simam_lambda", m.simam.lambda.to_string()),
            ("simam_unbiased", m.simam.variance_unbiased.to_string()),
            ("k_u", m.k_u.to_string()),
            ("d_u", m.d_u.to_string()),
            ("d_r", m.d_r.to_string()),
            ("d_b", m.d_b.to_string()),
            ("scale_max", m.scale_max.to_string()),
            ("round", m.round.as_str().into()),
            ("seed", m.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = ModelConfig::default();
        for (line, k, v) in parse_pairs(text)? {
            if !set_model(&mut m, &k, &v)? {
                return Err(unknown(&k, line));
            }
        }
        m.validate()?;
        Ok(m)
    }
}

impl RunConfig {
    /// Parses a run configuration. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut continuous = false;
        let t = &mut cfg.train;
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (line, k, v) in parse_pairs(text)? {
            if set_model(&mut cfg.model, &k, &v)? {
                if k == "seed" {
                    t.seed = cfg.model.seed;
                }
                continue;
            }
            let key = k.as_str();
            match key {
                "data_dir" => t.data_dir = path(&v),
                "scales" => t.scales = ScaleSampling::Fixed(scale_list(key, &v)?),
                "continuous_scales" => continuous = boolean(key, &v)?,
                "lr_patch" => t.lr_patch = num(key, &v)?,
                "batch" => t.batch = num(key, &v)?,
                "steps" => t.steps = num(key, &v)?,
                "lr" => t.adam.lr = num(key, &v)?,
                "beta1" => t.adam.beta1 = num(key, &v)?,
                "beta2" => t.adam.beta2 = num(key, &v)?,
                "adam_eps" => t.adam.eps = num(key, &v)?,
                "lambda_gv" => t.gv.lambda_gv = num(key, &v)?,
                "gv_window" => t.gv.window = num(key, &v)?,
                "checkpoint" => t.checkpoint = path(&v),
                "log_every" => t.log_every = num(key, &v)?,
                "log_file" => t.log_file = Some(path(&v)),
                _ => return Err(unknown(key, line)),
            }
        }
        if continuous {
            t.scales = ScaleSampling::Continuous;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
