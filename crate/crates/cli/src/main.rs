use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};

use ttyard::cost::{decompose_arch, model_report, preset, toy_arch_with_classes};
use ttyard::data::{load_cifar10, Dataset, WeightContainer};
use ttyard::decompose::decompose_container;
use ttyard::nn::{fit, Model, TrainLog};
use ttyard::rng::Rng;
use ttyard::verify::run_all;
use ttyard::yard::{
    ablation_csv, desk_train_config, run_ablation, run_yard, synthetic_split, TtInit, YardConfig,
    YardReport,
};

const ARCHES: [&str; 5] = ["resnet18", "resnet34", "resnet50", "resnet101", "toy"];

#[derive(Debug, Parser)]
#[command(name = "ttyard", version, about = "Tensor-Train convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Factorize the eligible convolutions of a weight container.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Restrict to these layers (repeatable).
        #[arg(long = "layer")]
        layers: Vec<String>,
    },
    /// Per-layer MACs and parameters of an architecture preset.
    Cost {
        #[arg(long, value_parser = ARCHES)]
        arch: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        /// Factorize every eligible layer first.
        #[arg(long)]
        decomposed: bool,
    },
    /// Run the equivalence, gradient and round-trip checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy network without factorization.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 14)]
        epochs: usize,
    },
    /// Run the Tensor Yard search.
    Yard {
        #[command(flatten)]
        data: DataArgs,
        /// Epochs per iteration.
        #[arg(long = "M", value_parser = clap::value_parser!(u64).range(1..))]
        m: u64,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Run the search once per value of M.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "M-list", value_delimiter = ',', num_args = 0..)]
        m_list: Vec<usize>,
        #[command(flatten)]
        search: SearchArgs,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// `synthetic` or `cifar10:<dir>`.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Iterations.
    #[arg(long = "K", value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long = "epochs-finetune", default_value_t = 10)]
    epochs_finetune: usize,
    /// Start the factorized branch from random weights.
    #[arg(long)]
    random_tt_init: bool,
}

fn threads_line() -> String {
    match std::env::var("TTYARD_THREADS") {
        Ok(v) => format!("threads: 1 (TTYARD_THREADS={v} requested; execution is single-threaded)"),
        Err(_) => "threads: 1 (TTYARD_THREADS unset)".into(),
    }
}

/// Comment lines identifying the toolkit version, the command line and
/// the seed.
fn header(seed: Option<u64>, config: &str) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "# ttyard {}", env!("CARGO_PKG_VERSION"));
    let args: Vec<String> = std::env::args().skip(1).collect();
    let _ = writeln!(h, "# command: {}", args.join(" "));
    match seed {
        Some(s) => writeln!(h, "# seed: {s}"),
        None => writeln!(h, "# seed: none (no randomness involved)"),
    }
    .expect("writing to a string");
    let _ = writeln!(h, "# {}", threads_line());
    for line in config.lines() {
        let _ = writeln!(h, "# config: {line}");
    }
    h
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_data(spec: &str, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec == "synthetic" {
        return Ok(synthetic_split(seed)?);
    }
    match spec.strip_prefix("cifar10:") {
        Some(dir) => load_cifar10(dir).with_context(|| format!("loading CIFAR-10 from {dir}")),
        None => bail!("unknown data source `{spec}`, expected `synthetic` or `cifar10:<dir>`"),
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, msg).exit()
}

fn yard_config(m: usize, search: &SearchArgs, seed: u64) -> YardConfig {
    YardConfig {
        m,
        k: search.k as usize,
        fine_tune_epochs: search.epochs_finetune,
        train: desk_train_config(seed),
        tt_init: if search.random_tt_init {
            TtInit::Random
        } else {
            TtInit::Factorized
        },
    }
}

fn config_text(train: &Dataset, test: &Dataset, cfg: &YardConfig) -> String {
    format!(
        "train data: {} ({} samples)\ntest data: {} ({} samples)\n{:?}",
        train.metadata,
        train.len(),
        test.metadata,
        test.len(),
        cfg
    )
}

fn write_yard_outputs(dir: &Path, head: &str, report: &YardReport, model: &Model<f32>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("yard_report.csv"), &format!("{head}{}", report.to_csv()))?;
    write(&dir.join("summary.json"), &report.summary_json())?;
    write(&dir.join("train_log.csv"), &format!("{head}{}", report.log.to_csv()))?;
    let cost = format!(
        "{head}{}",
        model_report(&model.arch())?.to_text()
    );
    write(&dir.join("cost.txt"), &cost)?;
    model
        .to_container()
        .write(dir.join("model.tyt"))
        .with_context(|| format!("writing {}", dir.join("model.tyt").display()))?;
    Ok(())
}

fn summary(report: &YardReport) -> String {
    format!(
        "replacements: {:?}\nparams: {} -> {}\nmacs: {} -> {}\nfinal accuracy: {:.4}\n",
        report.replacements(),
        report.baseline.params,
        report.final_cost.params,
        report.baseline.macs,
        report.final_cost.macs,
        report.final_accuracy
    )
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Decompose { input, output, layers } => {
            let c = WeightContainer::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let (out, report) = decompose_container(&c, &layers)?;
            out.write(&output).with_context(|| format!("writing {}", output.display()))?;
            let text = format!("{}{}", header(None, &format!("in={} out={}", input.display(), output.display())), report.to_text());
            let mut report_path = output.clone().into_os_string();
            report_path.push(".report.csv");
            write(Path::new(&report_path), &text)?;
            print!("{text}");
        }
        Command::Cost { arch, res, decomposed } => {
            let mut a = preset(&arch, res)?;
            if decomposed {
                a = decompose_arch(&a);
            }
            let config = format!("arch={arch} res={res} decomposed={decomposed}");
            print!("{}{}", header(None, &config), model_report(&a)?.to_text());
        }
        Command::Verify { seed } => {
            let report = run_all(seed, None);
            print!("{}{}", header(Some(seed), "all checks"), report.to_text());
            if !report.passed() {
                eprintln!("failed checks: {}", report.failures().join(", "));
                return Ok(false);
            }
        }
        Command::Train { data, epochs } => {
            let (train, test) = load_data(&data.data, data.seed)?;
            let arch = toy_arch_with_classes(train.image_dims()[1], train.num_classes);
            let cfg = ttyard::nn::TrainConfig {
                epochs,
                ..desk_train_config(data.seed)
            };
            let head = header(Some(data.seed), &format!("{}\n{cfg:?}", train.metadata));
            let mut model = Model::<f32>::from_arch(&arch, data.seed)?;
            let mut log = TrainLog::default();
            fit(&mut model, &train, Some(&test), &cfg, &mut Rng::new(data.seed), &mut log)?;
            fs::create_dir_all(&data.out)?;
            write(&data.out.join("train_log.csv"), &format!("{head}{}", log.to_csv()))?;
            model.to_container().write(data.out.join("model.tyt"))?;
            let acc = log.rows.last().and_then(|r| r.eval_acc).unwrap_or(0.0);
            println!("{head}final accuracy: {acc:.4}");
        }
        Command::Yard { data, m, search } => {
            let (train, test) = load_data(&data.data, data.seed)?;
            let arch = toy_arch_with_classes(train.image_dims()[1], train.num_classes);
            let cfg = yard_config(m as usize, &search, data.seed);
            let head = header(Some(data.seed), &config_text(&train, &test, &cfg));
            let model = Model::<f32>::from_arch(&arch, data.seed)?;
            let (model, report) = run_yard(model, &train, &test, &cfg, data.seed)?;
            report.check()?;
            write_yard_outputs(&data.out, &head, &report, &model)?;
            print!("{head}{}{}", report.to_csv(), summary(&report));
        }
        Command::Ablate { data, m_list, search } => {
            if m_list.is_empty() {
                usage_error("--M-list needs at least one value");
            }
            if m_list.contains(&0) {
                usage_error("every M must be at least 1");
            }
            let (train, test) = load_data(&data.data, data.seed)?;
            let arch = toy_arch_with_classes(train.image_dims()[1], train.num_classes);
            let cfg = yard_config(1, &search, data.seed);
            let head = header(Some(data.seed), &config_text(&train, &test, &cfg));
            let runs = run_ablation::<f32>(&arch, &m_list, &train, &test, &cfg, data.seed)?;
            fs::create_dir_all(&data.out)?;
            for (row, report) in &runs {
                report.check()?;
                let dir = data.out.join(format!("M{}", row.m));
                fs::create_dir_all(&dir)?;
                write(&dir.join("yard_report.csv"), &format!("{head}{}", report.to_csv()))?;
                write(&dir.join("summary.json"), &report.summary_json())?;
                write(&dir.join("train_log.csv"), &format!("{head}{}", report.log.to_csv()))?;
            }
            let rows: Vec<_> = runs.into_iter().map(|(r, _)| r).collect();
            let csv = format!("{head}{}", ablation_csv(&rows));
            write(&data.out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
