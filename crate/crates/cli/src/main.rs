use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use saam_core::checks::{self, CheckResult};
use saam_core::data::{load_dataset, load_png, save_png};
use saam_core::eval::evaluate;
use saam_core::metrics::QualityReport;
use saam_core::{checkpoint, train, Error, RunConfig, ScalePair};

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NAN: u8 = 4;
const EXIT_OUTPUT: u8 = 5;

#[derive(Parser)]
#[command(
    name = "saam",
    version,
    about = "Arbitrary-scale super-resolution with scale-aware attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value configuration file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed given in the configuration
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Degrade, super-resolve and score every PNG in a directory
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// RV or RVxRH, e.g. 2, 2.5, 2x3
        #[arg(long)]
        scale: String,
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Directory for the report files
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Super-resolve one image
    Sr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every differentiable op and the full model
    Gradcheck {
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
    /// Invariant self-tests: conv oracle, gate identities, neutrality, partition of unity
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Argument(_) | Error::Range(_) => EXIT_CONFIG,
            Error::NonFinite { .. } => EXIT_NAN,
            Error::Io { .. } => EXIT_OUTPUT,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

trait OrCode<T> {
    fn or_code(self, code: u8) -> Result<T, Failure>;
}

impl<T> OrCode<T> for saam_core::Result<T> {
    fn or_code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            message: e.to_string(),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Train { config, seed } => cmd_train(&config, seed),
        Command::Eval {
            ckpt,
            data,
            scale,
            baseline,
            out,
        } => cmd_eval(&ckpt, &data, &scale, baseline.is_some(), &out),
        Command::Sr {
            ckpt,
            input,
            scale,
            out,
        } => cmd_sr(&ckpt, &input, &scale, &out),
        Command::Gradcheck { inject_conv_fault } => {
            saam_core::conv::CONV_BACKWARD_FAULT
                .store(inject_conv_fault, std::sync::atomic::Ordering::SeqCst);
            report_checks(&checks::gradcheck_suite())
        }
        Command::Selftest => report_checks(&checks::selftest_suite()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SAAM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure {
            code: EXIT_CONFIG,
            message: format!("SAAM_THREADS must be a positive integer, got `{v}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_CONFIG,
            message: format!("cannot size the thread pool: {e}"),
        })
}

fn parse_scale(s: &str) -> Result<ScalePair, Failure> {
    s.parse::<ScalePair>().or_code(EXIT_CONFIG)
}

fn cmd_train(config: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).or_code(EXIT_CONFIG)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let out = train::run(&cfg, |l| println!("{l}"))?;
    println!(
        "saved {} (best step {} -> {})",
        cfg.train.checkpoint.display(),
        out.best_step,
        train::best_path(&cfg.train.checkpoint).display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    scale: &str,
    baseline: bool,
    out: &Path,
) -> Result<(), Failure> {
    let scale = parse_scale(scale)?;
    let model = checkpoint::load(ckpt).or_code(EXIT_DATA)?;
    scale.check(model.config().scale_max).or_code(EXIT_CONFIG)?;
    let images = load_dataset(data).or_code(EXIT_DATA)?;
    let e = evaluate(&model, &images, scale, baseline)?;
    match &e.bicubic {
        Some(b) => print!("{}", side_by_side(&e.model, b)),
        None => print!("{}", e.model.to_table()),
    }
    let tag = format!("x{}", scale);
    for r in std::iter::once(&e.model).chain(e.bicubic.as_ref()) {
        let path = out.join(format!("{}_{tag}.csv", r.method));
        r.write_csv(&path).or_code(EXIT_OUTPUT)?;
        let txt = path.with_extension("txt");
        std::fs::write(&txt, r.to_table()).map_err(|e| Failure {
            code: EXIT_OUTPUT,
            message: format!("cannot write {}: {e}", txt.display()),
        })?;
    }
    Ok(())
}

fn side_by_side(model: &QualityReport, bicubic: &QualityReport) -> String {
    let width = model
        .rows
        .iter()
        .map(|r| r.image.len())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut s = format!(
        "scale {}  crop {}\n{:<width$}  {:>10}  {:>10}  {:>12}  {:>12}\n",
        model.scale,
        model.crop,
        "image",
        "model_psnr",
        "model_ssim",
        "bicubic_psnr",
        "bicubic_ssim"
    );
    for (m, b) in model.rows.iter().zip(&bicubic.rows) {
        s += &format!(
            "{:<width$}  {:>10.4}  {:>10.4}  {:>12.4}  {:>12.4}\n",
            m.image, m.psnr, m.ssim, b.psnr, b.ssim
        );
    }
    s += &format!(
        "{:<width$}  {:>10.4}  {:>10.4}  {:>12.4}  {:>12.4}\n",
        "mean",
        model.mean_psnr(),
        model.mean_ssim(),
        bicubic.mean_psnr(),
        bicubic.mean_ssim()
    );
    s
}

fn cmd_sr(ckpt: &Path, input: &Path, scale: &str, out: &Path) -> Result<(), Failure> {
    let scale = parse_scale(scale)?;
    let model = checkpoint::load(ckpt).or_code(EXIT_DATA)?;
    scale.check(model.config().scale_max).or_code(EXIT_CONFIG)?;
    let lr = load_png(input).or_code(EXIT_DATA)?;
    let sr = model.forward(&lr, scale).or_code(EXIT_DATA)?;
    save_png(out, &sr).or_code(EXIT_OUTPUT)?;
    let [_, _, h, w] = sr.shape();
    println!("wrote {} ({w}x{h})", out.display());
    Ok(())
}

fn report_checks(results: &[CheckResult]) -> Result<(), Failure> {
    for r in results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            message: format!("{failed} of {} checks failed", results.len()),
        })
    }
}
