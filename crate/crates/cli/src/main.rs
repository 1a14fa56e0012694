use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irs_core::dataset::SceneCounts;
use irs_core::eval::TestKind;
use irs_core::losses::SubsetMode;
use irs_core::pipeline::{cmd_eval, cmd_gen_data, cmd_train, EvalArgs, GenDataArgs, Method, Preset, TrainArgs};
use irs_core::selfcheck;
use irs_core::trainer::{FreezeMode, TrainConfig};
use irs_core::Error;

/// Output root used for relative `--out` paths when set.
const OUT_ROOT_ENV: &str = "IRS_OUT_ROOT";

#[derive(Parser)]
#[command(name = "irs", version, about = "Class-incremental segmentation on synthetic kidney phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with one directory per step.
    GenData(GenDataCmd),
    /// Train every step of a dataset and write a run directory.
    Train(TrainCmd),
    /// Evaluate run checkpoints and write metrics, CSV and plots.
    Eval(EvalCmd),
    /// Run the fast invariant suite.
    Selfcheck,
}

#[derive(Args)]
struct GenDataCmd {
    /// Phantom spec JSON (default: built-in kidney layout).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Canvas side for the built-in layout.
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Number of steps (2, 3 or 4); default keeps the spec's own split.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated group order for 3/4 steps; class names stand for
    /// their group, e.g. cortex,capsule,podocyte,lesion.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    /// Reverse the step order (second data block first).
    #[arg(long)]
    reverse: bool,
    #[arg(long, default_value_t = SceneCounts::default().train)]
    train_scenes: usize,
    #[arg(long, default_value_t = SceneCounts::default().val)]
    val_scenes: usize,
    #[arg(long, default_value_t = SceneCounts::default().test)]
    test_scenes: usize,
    /// Refuse to overwrite an existing dataset.
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Irs,
    Finetune,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    TwoStep,
    ThreeStep,
    FourStep,
}

#[derive(Clone, Copy, ValueEnum)]
enum FreezeArg {
    None,
    Fully,
    Encoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Literal,
    Prose,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "irs")]
    method: MethodArg,
    /// Fail unless the dataset has this preset's step count.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epochs_per_step: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_anatomy: Option<f64>,
    #[arg(long)]
    lambda_semi: Option<f64>,
    #[arg(long, value_enum)]
    subset_mode: Option<SubsetArg>,
    #[arg(long, value_enum)]
    freeze: Option<FreezeArg>,
    /// Old classes prompted per image in incremental steps (default: all).
    #[arg(long)]
    prompts_per_image: Option<usize>,
    /// IRS without the anatomy loss.
    #[arg(long)]
    no_anatomy: bool,
    #[arg(long)]
    no_token: bool,
    #[arg(long)]
    no_latent: bool,
    #[arg(long)]
    no_decoder: bool,
    #[arg(long)]
    no_logits: bool,
    /// Supervise old-class logits with thresholded teacher output.
    #[arg(long)]
    pseudo_labels: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Rank,
    T,
}

#[derive(Args)]
struct EvalCmd {
    /// Run directory to evaluate (repeatable).
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    /// Dataset directory (default: the one recorded by each run).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory (default: <first run>/eval).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Significance test of run A against reference run B (repeatable).
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"], action = clap::ArgAction::Append)]
    compare: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "rank")]
    test: TestArg,
}

fn out_path(p: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Data(_) => 3,
        Error::NonFinite(_) | Error::EmptySplit(_) | Error::InsufficientData { .. } | Error::LengthMismatch(..) => 1,
        _ => 2,
    }
}

fn train_config(c: &TrainCmd) -> Result<TrainConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_slice(&bytes)?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = v;
            }
        };
    }
    set!(seed, c.seed);
    set!(lr, c.lr);
    set!(lr_decay, c.lr_decay);
    set!(phase1_epochs, c.epochs);
    set!(batch_size, c.batch_size);
    set!(lambda_anatomy, c.lambda_anatomy);
    set!(lambda_semi, c.lambda_semi);
    if c.epochs_per_step.is_some() {
        cfg.epochs_per_step = c.epochs_per_step;
    }
    if c.prompts_per_image.is_some() {
        cfg.old_prompts_per_image = c.prompts_per_image;
    }
    set!(
        subset_mode,
        c.subset_mode.map(|m| match m {
            SubsetArg::Literal => SubsetMode::Literal,
            SubsetArg::Prose => SubsetMode::Prose,
        })
    );
    set!(
        freeze,
        c.freeze.map(|f| match f {
            FreezeArg::None => FreezeMode::None,
            FreezeArg::Fully => FreezeMode::Fully,
            FreezeArg::Encoder => FreezeMode::Encoder,
        })
    );
    cfg.semi.token &= !c.no_token;
    cfg.semi.latent &= !c.no_latent;
    cfg.semi.decoder &= !c.no_decoder;
    cfg.semi.logits &= !c.no_logits;
    cfg.semi.pseudo_labels |= c.pseudo_labels;
    if c.no_augment {
        cfg.augment = irs_core::augment::AugmentConfig::off();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenData(c) => {
            let out = out_path(c.out);
            let index = cmd_gen_data(&GenDataArgs {
                spec: c.spec,
                canvas: c.canvas,
                seed: c.seed,
                out: out.clone(),
                steps: c.steps,
                order: c.order,
                reverse: c.reverse,
                scenes: SceneCounts { train: c.train_scenes, val: c.val_scenes, test: c.test_scenes },
                no_clobber: c.no_clobber,
            })?;
            for s in &index.steps {
                println!("step {}: classes {:?} -> {}", s.step, s.class_ids, out.join(&s.dir).display());
            }
            Ok(0)
        }
        Command::Train(c) => {
            let config = train_config(&c)?;
            let out = out_path(c.out.clone());
            let manifest = cmd_train(&TrainArgs {
                data: c.data.clone(),
                out: out.clone(),
                method: match c.method {
                    MethodArg::Irs => Method::Irs,
                    MethodArg::Finetune => Method::Finetune,
                    MethodArg::Joint => Method::Joint,
                },
                no_anatomy: c.no_anatomy,
                preset: c.preset.map(|p| match p {
                    PresetArg::TwoStep => Preset::TwoStep,
                    PresetArg::ThreeStep => Preset::ThreeStep,
                    PresetArg::FourStep => Preset::FourStep,
                }),
                config,
                run_id: c.run_id.clone(),
                no_clobber: c.no_clobber,
            })?;
            for s in &manifest.stages {
                println!("step {}: {} batches, checkpoint {}", s.step, s.summary.batches, out.join(&s.checkpoint).display());
            }
            Ok(0)
        }
        Command::Eval(c) => {
            let compare = c.compare.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
            let outcome = cmd_eval(&EvalArgs {
                runs: c.runs,
                data: c.data,
                out: c.out.map(out_path),
                compare,
                test: match c.test {
                    TestArg::Rank => TestKind::Rank,
                    TestArg::T => TestKind::T,
                },
            })?;
            for r in &outcome.reports {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
                println!(
                    "{} step {}: old {} new {} all {:.2}",
                    r.run,
                    r.step,
                    fmt(r.summary.old_mean),
                    fmt(r.summary.new_mean),
                    r.summary.all_mean
                );
            }
            for s in &outcome.comparisons {
                println!("{} vs {}: {} n={} stat={:.4} p={:.3e}", s.method_a, s.method_b, s.test, s.n, s.statistic, s.p_value);
            }
            println!("reports written to {}", outcome.out_dir.display());
            for f in &outcome.failures {
                eprintln!("invariant failed: {f}");
            }
            Ok(if outcome.failures.is_empty() { 0 } else { 1 })
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all();
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
