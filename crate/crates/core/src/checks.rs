//! Built-in verification suites: finite-difference gradient checks of every
//! differentiable op, and invariant self-tests.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::conv;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_many, Probe};
use crate::loss::{self, GvConfig};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::norm::batch_norm_var;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Ctx, Mode};
use crate::resample::resize_to;
use crate::saam::fuse;
use crate::scale::ScalePair;
use crate::simam::{simam_var, SimamConfig};
use crate::tensor::{Activation, ConvGeometry, Real, Shape, Tensor};
use crate::upsampler::{gather_var, map_coords};

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, measured: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured < tolerance,
            detail: String::new(),
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(m) => Self::below(name, m, tolerance),
            Err(e) => CheckResult {
                name: name.to_string(),
                measured: f64::NAN,
                tolerance,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {:<28} measured={:.3e} tol={:.0e}",
            self.name, self.measured, self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn noise<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

fn positive(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.1..0.9))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(shape: Shape, seed: u64) -> Tensor<f64> {
    noise::<f64>(shape, seed).map(|v| if v < 0.0 { v - 0.2 } else { v + 0.2 })
}

/// `base` shifted by at least 0.05 per element, keeping L1 away from its kink.
fn untied(base: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let off = off_zero(base.shape(), seed).map(|v| 0.2 * v);
    base.zip_map(&off, |a, b| a + b).expect("same shape")
}

/// Gradient check of `Σ probe ∘ f(inputs)` over every input coordinate.
fn op_check<F>(name: &str, inputs: Vec<Tensor<f64>>, out_shape: Shape, f: F) -> CheckResult
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let probe = noise::<f64>(out_shape, 0xfeed);
    let r = finite_diff_check_many(
        |v| {
            let out = f(v)?;
            Ok(out.mul(&v[0].tape().constant(probe.clone()))?.sum())
        },
        &inputs,
        GRAD_EPS,
        Probe::All,
    );
    CheckResult::from_result(name, GRAD_TOL, r.map(|r| r.max_rel_error))
}

fn scalar_check<F>(name: &str, inputs: Vec<Tensor<f64>>, probe: Probe, f: F) -> CheckResult
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let r = finite_diff_check_many(f, &inputs, GRAD_EPS, probe);
    CheckResult::from_result(name, GRAD_TOL, r.map(|r| r.max_rel_error))
}

/// Finite-difference checks (double precision) of every differentiable op
/// and of the full model with its training loss.
pub fn gradcheck_suite() -> Vec<CheckResult> {
    let s = [2, 3, 5, 5];
    let mut out = vec![
        op_check("add", vec![noise(s, 1), noise(s, 2)], s, |v| {
            v[0].add(&v[1])
        }),
        op_check("sub", vec![noise(s, 3), noise(s, 4)], s, |v| {
            v[0].sub(&v[1])
        }),
        op_check("mul", vec![noise(s, 5), noise(s, 6)], s, |v| {
            v[0].mul(&v[1])
        }),
        op_check("scale", vec![noise(s, 7)], s, |v| Ok(v[0].scale(-1.7))),
        op_check("gate", vec![noise(s, 8), noise([2, 1, 5, 5], 9)], s, |v| {
            v[0].gate(&v[1])
        }),
        op_check("silu", vec![noise(s, 10)], s, |v| Ok(v[0].silu())),
        op_check("sigmoid", vec![noise(s, 11)], s, |v| Ok(v[0].sigmoid())),
        op_check("relu", vec![off_zero(s, 12)], s, |v| {
            Ok(v[0].act(Activation::Relu))
        }),
        op_check("abs", vec![off_zero(s, 13)], s, |v| Ok(v[0].abs())),
        op_check("softmax_channels", vec![noise(s, 14)], s, |v| {
            Ok(v[0].softmax_channels())
        }),
        op_check("sum", vec![noise(s, 15)], [1, 1, 1, 1], |v| Ok(v[0].sum())),
        op_check(
            "mean",
            vec![noise(s, 16)],
            [1, 1, 1, 1],
            |v| Ok(v[0].mean()),
        ),
        op_check("reshape", vec![noise(s, 17)], [1, 6, 5, 5], |v| {
            v[0].reshape([1, 6, 5, 5])
        }),
        op_check(
            "mix",
            vec![noise([1, 4, 1, 1], 18), noise([4, 3, 3, 3], 19)],
            [1, 3, 3, 3],
            |v| v[0].mix(&v[1], [1, 3, 3, 3]),
        ),
        op_check(
            "upsample_nearest",
            vec![noise([1, 2, 3, 4], 20)],
            [1, 2, 7, 9],
            |v| v[0].upsample_nearest(7, 9),
        ),
    ];
    let convs: [(&str, [usize; 4], [usize; 4], ConvGeometry); 4] = [
        (
            "conv2d dense",
            [2, 3, 6, 6],
            [4, 3, 3, 3],
            ConvGeometry::new(1, 1, 1),
        ),
        (
            "conv2d depthwise",
            [2, 4, 6, 6],
            [4, 1, 3, 3],
            ConvGeometry::new(1, 1, 4),
        ),
        (
            "conv2d pointwise",
            [2, 4, 5, 5],
            [3, 4, 1, 1],
            ConvGeometry::new(1, 0, 1),
        ),
        (
            "conv2d strided grouped",
            [1, 4, 7, 7],
            [6, 2, 3, 3],
            ConvGeometry::new(2, 1, 2),
        ),
    ];
    for (i, (name, xs, ks, geo)) in convs.into_iter().enumerate() {
        let seed = 100 + 3 * i as u64;
        let os = geo.output_shape(xs, ks).expect("valid conv case");
        out.push(op_check(
            name,
            vec![
                noise(xs, seed),
                noise(ks, seed + 1),
                noise([1, ks[0], 1, 1], seed + 2),
            ],
            os,
            move |v| v[0].conv2d(&v[1], Some(&v[2]), geo),
        ));
    }
    let sim = SimamConfig::default();
    out.push(op_check("simam", vec![noise(s, 30)], s, move |v| {
        Ok(simam_var(&v[0], &sim))
    }));
    out.push(op_check(
        "batch_norm",
        vec![
            noise(s, 31),
            positive([1, 3, 1, 1], 32),
            noise([1, 3, 1, 1], 33),
        ],
        s,
        |v| Ok(batch_norm_var(&v[0], &v[1], &v[2], None)?.0),
    ));
    let coords = map_coords(
        5,
        6,
        ScalePair::new(1.7, 2.4),
        crate::scale::RoundMode::Floor,
    )
    .expect("valid coords");
    let (oh, ow) = (coords.out_h, coords.out_w);
    out.push(op_check(
        "upsampler gather",
        vec![noise([1, 2, 5, 6], 34), noise([1, 16, oh, ow], 35)],
        [1, 2, oh, ow],
        move |v| gather_var(&v[0], &v[1], &coords, 4),
    ));
    out.push(op_check(
        "rgb_to_gray",
        vec![noise([1, 3, 6, 6], 36)],
        [1, 1, 6, 6],
        |v| loss::rgb_to_gray_var(&v[0]),
    ));
    out.push(op_check(
        "sobel",
        vec![noise([1, 1, 6, 7], 37)],
        [1, 1, 6, 7],
        |v| {
            let (gx, gy) = loss::sobel_var(&v[0])?;
            gx.add(&gy.scale(0.5))
        },
    ));
    out.push(op_check(
        "variance_map",
        vec![noise([1, 1, 8, 12], 38)],
        [1, 1, 2, 3],
        |v| loss::variance_map_var(&v[0], 4),
    ));
    out.push(scalar_check(
        "gv_loss",
        vec![positive([1, 3, 16, 16], 39), positive([1, 3, 16, 16], 40)],
        Probe::All,
        |v| loss::gv_loss_var(&v[0], &v[1], 8),
    ));
    out.push(scalar_check(
        "total_loss",
        vec![
            positive([1, 3, 16, 16], 41),
            untied(&positive([1, 3, 16, 16], 41), 42),
        ],
        Probe::All,
        |v| Ok(loss::total_loss_var(&v[0], &v[1], &GvConfig::default())?.total),
    ));
    out.push(full_model_check());
    out
}

/// Full model plus L1 + GV loss on a 1×3×8×8 input at scale (2,2), probing
/// every input coordinate and a sample of every parameter tensor.
pub fn full_model_check() -> CheckResult {
    let name = "model + loss (1x3x8x8, x2)";
    let run = || -> Result<f64> {
        let mut model = Model::<f32>::build(&ModelConfig::default())?.cast::<f64>();
        model.activate(7);
        let scale = ScalePair::uniform(2.0);
        let lr = positive([1, 3, 8, 8], 50);
        let sr0 = model.forward(&lr, scale)?;
        let sign = noise::<f64>(sr0.shape(), 51);
        let hr = Tensor::from_fn(sr0.shape(), |i| {
            sr0.at(i) + if sign.at(i) < 0.0 { -2.0 } else { 2.0 }
        });
        let gv = GvConfig::default();
        let mut inputs = vec![lr];
        inputs.extend(
            model
                .params
                .trainable_ids()
                .map(|id| model.params.get(id).clone()),
        );
        let sampler = Probe::Sample {
            per_tensor: 6,
            seed: 52,
        };
        let lists = (0..inputs.len())
            .map(|i| {
                if i == 0 {
                    (0..inputs[0].numel()).collect()
                } else {
                    sampler.coords(i, inputs[i].numel())
                }
            })
            .collect();
        let report = finite_diff_check_many(
            |v| {
                let tape = v[0].tape();
                let bound = model.params.bind_from(tape, &v[1..])?;
                let ctx = Ctx::new(&bound, Mode::Eval);
                let sr = model.forward_var(&v[0], scale, &ctx, false)?;
                Ok(loss::total_loss_var(&tape.constant(hr.clone()), &sr, &gv)?.total)
            },
            &inputs,
            GRAD_EPS,
            Probe::Listed(lists),
        )?;
        Ok(report.max_rel_error)
    };
    CheckResult::from_result(name, GRAD_TOL, run())
}

/// Direct nested-loop grouped cross-correlation.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], geo: ConvGeometry) -> Tensor<f64> {
    let [n, _, h, w] = x.shape();
    let [c_out, cpg, kh, kw] = k.shape();
    let oh = (h + 2 * geo.padding - kh) / geo.stride + 1;
    let ow = (w + 2 * geo.padding - kw) / geo.stride + 1;
    let opg = c_out / geo.groups;
    Tensor::from_fn([n, c_out, oh, ow], |[b, o, y, xo]| {
        let g = o / opg;
        let mut acc = bias[o];
        for i in 0..cpg {
            for dy in 0..kh {
                for dx in 0..kw {
                    let iy = (y * geo.stride + dy) as isize - geo.padding as isize;
                    let ix = (xo * geo.stride + dx) as isize - geo.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc +=
                            x.at([b, g * cpg + i, iy as usize, ix as usize]) * k.at([o, i, dy, dx]);
                    }
                }
            }
        }
        acc
    })
}

fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn conv_oracle_check(cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let groups_kind = case % 3;
        let c_in = rng.gen_range(1..=6);
        let (groups, c_out) = match groups_kind {
            0 => (1, rng.gen_range(1..=6)),
            1 => (c_in, c_in),
            _ => {
                let g = [1, 2, 3]
                    .into_iter()
                    .filter(|g| c_in % g == 0)
                    .max()
                    .unwrap_or(1);
                (g, g * rng.gen_range(1..=2))
            }
        };
        let k = if case % 4 == 3 {
            1
        } else {
            [1, 3, 5][rng.gen_range(0..3)]
        };
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k..k + 7);
        let w = rng.gen_range(k..k + 7);
        let geo = ConvGeometry::new(stride, padding, groups);
        let x = noise::<f64>([rng.gen_range(1..=2), c_in, h, w], 1000 + case as u64);
        let kern = noise::<f64>([c_out, c_in / groups, k, k], 2000 + case as u64);
        let bias = noise::<f64>([1, c_out, 1, 1], 3000 + case as u64);
        let got = match conv::forward(&x, &kern, Some(bias.data()), geo) {
            Ok(t) => t,
            Err(_) => return CheckResult::below("conv oracle", f64::INFINITY, 1e-5),
        };
        worst = worst.max(max_abs_diff(
            &got,
            &conv_oracle(&x, &kern, bias.data(), geo),
        ));
    }
    CheckResult::below(&format!("conv oracle ({cases} cases)"), worst, 1e-5)
}

fn gate_identities() -> CheckResult {
    let mut worst = 0.0f64;
    for i in 0..20 {
        let shape = [1 + i % 2, 2 + i % 5, 3 + i % 4, 4 + i % 3];
        let f = noise::<f64>(shape, 400 + i as u64);
        let a = noise::<f64>(shape, 500 + i as u64);
        let gate_shape = [shape[0], 1, shape[2], shape[3]];
        let tape = Tape::inference();
        let (fv, av) = (tape.constant(f.clone()), tape.constant(a.clone()));
        for (m, expect) in [
            (0.0, f.clone()),
            (1.0, f.zip_map(&a, |x, y| x + y).expect("same shape")),
        ] {
            match fuse(&fv, &av, &tape.constant(Tensor::full(gate_shape, m))) {
                Ok(out) => worst = worst.max(max_abs_diff(&out.value(), &expect)),
                Err(_) => worst = f64::INFINITY,
            }
        }
    }
    CheckResult::below("gate identities (20 inputs)", worst, 1e-6)
}

fn neutrality() -> CheckResult {
    let run = || -> Result<f64> {
        let mut model = Model::<f32>::build(&ModelConfig::default())?;
        model.activate_upsampler(601);
        let mut worst = 0.0f64;
        for i in 0..10u64 {
            let lr = noise::<f32>([1, 3, 6 + i as usize % 3, 7], 600 + i).map(|v| 0.5 + 0.5 * v);
            for s in [
                ScalePair::uniform(2.0),
                ScalePair::uniform(3.3),
                ScalePair::new(1.5, 4.0),
            ] {
                worst = worst.max(max_abs_diff(
                    &model.forward(&lr, s)?,
                    &model.forward_with(&lr, s, true)?,
                ));
            }
        }
        Ok(worst)
    };
    CheckResult::from_result("plug-in neutrality at init", 1e-6, run())
}

/// Twenty scales in [1,4], including asymmetric pairs.
pub fn unity_scales() -> Vec<ScalePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut s = vec![
        ScalePair::uniform(1.0),
        ScalePair::uniform(4.0),
        ScalePair::new(2.0, 3.0),
        ScalePair::new(1.0, 4.0),
    ];
    while s.len() < 20 {
        let v = rng.gen_range(1.0..=4.0);
        let h = if s.len() % 2 == 0 {
            v
        } else {
            rng.gen_range(1.0..=4.0)
        };
        s.push(ScalePair::new(v, h));
    }
    s
}

fn partition_of_unity() -> Vec<CheckResult> {
    let run_up = || -> Result<f64> {
        let mut model = Model::<f32>::build(&ModelConfig::default())?;
        model.activate(9);
        let up = model.upsampler().clone();
        let w = model.params.get(up.feat_dw.weight).shape();
        model.params.set(
            up.feat_dw.weight,
            Tensor::from_fn(w, |[_, _, y, x]| if y == 1 && x == 1 { 1.0 } else { 0.0 }),
        )?;
        if let Some(b) = up.feat_dw.bias {
            let bs = model.params.get(b).shape();
            model.params.set(b, Tensor::zeros(bs))?;
        }
        let mut worst = 0.0f64;
        for (i, s) in unity_scales().into_iter().enumerate() {
            let c = 0.1 + 0.04 * i as f32;
            let feat = Tensor::full([1, up.config().channels, 7, 9], c);
            let tape = Tape::inference();
            let bound = model.params.bind(&tape);
            let ctx = Ctx::new(&bound, Mode::Eval);
            let hr = up.upsample_var(&tape.constant(feat), s, &ctx)?;
            let rgb = up.reconstruct_var(&hr, &ctx)?.value();
            worst = worst.max(plane_spread(&rgb));
        }
        Ok(worst)
    };
    let run_bicubic = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, s) in unity_scales().into_iter().enumerate() {
            let img = Tensor::full([1, 3, 9, 11], 0.2f32 + 0.03 * i as f32);
            let (oh, ow) = s.output_dims(9, 11, crate::scale::RoundMode::Floor);
            let up = resize_to(&img, oh, ow, s)?;
            let down = resize_to(&img, 5, 4, ScalePair::new(5.0 / 9.0, 4.0 / 11.0))?;
            worst = worst.max(plane_spread(&up)).max(plane_spread(&down));
            worst = worst.max((up.data()[0] - img.data()[0]).abs() as f64);
        }
        Ok(worst)
    };
    vec![
        CheckResult::from_result("partition of unity: upsampler", 1e-5, run_up()),
        CheckResult::from_result("partition of unity: bicubic", 1e-5, run_bicubic()),
    ]
}

/// Largest deviation from the per-channel mean.
fn plane_spread<T: Real>(t: &Tensor<T>) -> f64 {
    let [n, c, h, w] = t.shape();
    let mut worst = 0.0f64;
    for plane in t.data().chunks(h * w).take(n * c) {
        let first = plane[0].as_f64();
        for v in plane {
            worst = worst.max((v.as_f64() - first).abs());
        }
    }
    worst
}

fn arbitrary_scales() -> CheckResult {
    let run = || -> Result<f64> {
        let model = Model::<f32>::build(&ModelConfig::default())?;
        let lr = noise::<f32>([1, 3, 10, 13], 800).map(|v| 0.5 + 0.4 * v);
        let mut wrong = 0.0;
        for s in [1.2, 1.5, 1.7, 2.0, 2.4, 2.8, 3.2, 3.6, 4.0]
            .map(ScalePair::uniform)
            .into_iter()
            .chain([ScalePair::new(2.0, 3.0)])
        {
            let out = model.forward(&lr, s)?;
            let expect = [
                1,
                3,
                (10.0 * s.v + 1e-9).floor() as usize,
                (13.0 * s.h + 1e-9).floor() as usize,
            ];
            if out.shape() != expect {
                wrong += 1.0;
            }
        }
        Ok(wrong)
    };
    CheckResult::from_result("single checkpoint, 10 scales", 0.5, run())
}

fn psnr_closed_form() -> CheckResult {
    let a = Tensor::full([1, 1, 20, 20], 0.5f64);
    let b = a.map(|v| v + 1.0 / 255.0);
    let r = metrics::psnr(&a, &b, 0).map(|p| (p - 48.1308).abs());
    CheckResult::from_result("psnr closed form 48.13 dB", 0.01, r)
}

fn adam_first_step() -> CheckResult {
    let run = || -> Result<f64> {
        let mut model = Model::<f32>::build(&ModelConfig {
            channels: 4,
            num_blocks: 1,
            period: 1,
            experts: 2,
            ..Default::default()
        })?;
        let before = model.params.clone();
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &model.params);
        let grads: Vec<Tensor<f32>> = model
            .params
            .trainable_ids()
            .enumerate()
            .map(|(i, id)| noise(model.params.get(id).shape(), 900 + i as u64))
            .collect();
        adam.update(&mut model.params, &grads)?;
        let mut worst = 0.0f64;
        for (g, id) in grads.iter().zip(model.params.trainable_ids()) {
            for ((&gv, &b), &a) in g
                .data()
                .iter()
                .zip(before.get(id).data())
                .zip(model.params.get(id).data())
            {
                let expect = -cfg.lr * gv as f64 / (gv.abs() as f64 + cfg.eps);
                worst = worst.max(((a - b) as f64 - expect).abs());
            }
        }
        Ok(worst)
    };
    CheckResult::from_result("adam first step", 1e-6, run())
}

fn checkpoint_round_trip() -> CheckResult {
    let run = || -> Result<f64> {
        let mut model = Model::<f32>::build(&ModelConfig::default())?;
        model.activate(3);
        let back = checkpoint::from_bytes(&checkpoint::encode(&model))?;
        let lr = noise::<f32>([1, 3, 8, 8], 950).map(|v| 0.5 + 0.4 * v);
        let s = ScalePair::new(2.5, 1.5);
        Ok(max_abs_diff(
            &model.forward(&lr, s)?,
            &back.forward(&lr, s)?,
        ))
    };
    CheckResult::from_result("checkpoint round trip", f64::MIN_POSITIVE, run())
}

/// Invariant self-tests; the whole suite stays well under two minutes.
pub fn selftest_suite() -> Vec<CheckResult> {
    let start = Instant::now();
    let mut out = vec![conv_oracle_check(120), gate_identities(), neutrality()];
    out.extend(partition_of_unity());
    out.push(arbitrary_scales());
    out.push(psnr_closed_form());
    out.push(adam_first_step());
    out.push(checkpoint_round_trip());
    out.push(CheckResult::below(
        "selftest runtime (s)",
        start.elapsed().as_secs_f64(),
        120.0,
    ));
    out
}
