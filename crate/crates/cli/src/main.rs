//! `paranet`: train, evaluate and profile three-pipeline classifiers.
//!
//! Exit status is 0 on success, 1 on usage errors (including invalid model
//! labels) and 2 on data or model errors. `PARANET_THREADS` caps the worker
//! pool; results do not depend on it.

mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use paranet::budget::{self, ExitPolicy};
use paranet::checkpoint;
use paranet::data::{self, Dataset, SynthConfig};
use paranet::label::{parse_model_label, ModelConfig};
use paranet::network::build_graph;
use paranet::train::{self, run_training, TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE};

const INVOCATION_FILE: &str = "invocation.json";

#[derive(Parser, Debug)]
#[command(name = "paranet", version, about = "Three-pipeline early-exit image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv and checkpoints to --out.
    Train(TrainArgs),
    /// Per-exit accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Per-exit FLOP table of an architecture.
    Flops(FlopsArgs),
    /// Accuracy against cumulative FLOPs for each exit.
    Anytime(AnytimeArgs),
    /// Early-exit accuracy and cost over a grid of thresholds.
    Sweep(SweepArgs),
    /// Replay an invocation recorded in invocation.json.
    Rerun {
        /// A recorded invocation file, or a directory containing invocation.json.
        path: PathBuf,
    },
}

/// `n=..,classes=..[,noise=..,size=..,seed=..,val=..]`
#[derive(Debug, Clone, PartialEq)]
struct SynthSpec {
    config: SynthConfig,
    val: usize,
}

fn parse_synth(s: &str) -> Result<SynthSpec, String> {
    let mut n = None;
    let mut classes = None;
    let mut config = SynthConfig::new(0, 0);
    let mut val = None;
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
        let int = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "n" => n = Some(int()?),
            "classes" => classes = Some(int()?),
            "size" => config.size = int()?,
            "val" => val = Some(int()?),
            "seed" => config.seed = value.parse().map_err(|e| format!("seed: {e}"))?,
            "noise" => config.noise = value.parse().map_err(|e| format!("noise: {e}"))?,
            other => return Err(format!("unknown key {other:?} (expected n, classes, noise, size, seed, val)")),
        }
    }
    config.n = n.ok_or("missing n=")?;
    config.classes = classes.ok_or("missing classes=")?;
    let val = val.unwrap_or((config.n / 4).max(config.classes));
    Ok(SynthSpec { config, val })
}

fn parse_label(s: &str) -> Result<ModelConfig, String> {
    parse_model_label(s).map_err(|e| e.to_string())
}

fn parse_milestone(m: &str) -> Result<(usize, f64), String> {
    let (e, r) = m.split_once(':').ok_or_else(|| format!("expected epoch:rate, got {m:?}"))?;
    let epoch = e.trim().parse().map_err(|err| format!("{e}: {err}"))?;
    let rate = r.trim().parse().map_err(|err| format!("{r}: {err}"))?;
    Ok((epoch, rate))
}

fn parse_threshold(v: &str) -> Result<f64, String> {
    let x: f64 = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
    if x.is_nan() || x < 0.0 {
        return Err(format!("threshold {x} must be non-negative"));
    }
    Ok(x)
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Directory holding CIFAR-100 train.bin and test.bin.
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Synthetic data, e.g. n=64,classes=8[,noise=0.25,size=32,seed=0,val=16].
    #[arg(long, value_parser = parse_synth)]
    synth: Option<SynthSpec>,
}

impl DataArgs {
    fn load(&self) -> paranet::Result<(Dataset, Dataset)> {
        match (&self.cifar, &self.synth) {
            (Some(dir), _) => data::load_cifar100(dir),
            (None, Some(s)) => data::synth_split(&s.config, s.val),
            (None, None) => unreachable!("clap requires one data source"),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Model label such as PN3-ddd, PN3-x3d or PN3cut-ddd.
    #[arg(long, value_parser = parse_label)]
    label: ModelConfig,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 130)]
    epochs: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_GROWTH)]
    growth: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_LAYERS_PER_BLOCK)]
    layers_per_block: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random 4-pixel crops and horizontal flips.
    #[arg(long)]
    augment: bool,
    /// Learning-rate milestones as epoch:rate pairs.
    #[arg(long, value_parser = parse_milestone, value_delimiter = ',', default_value = "0:0.1,50:0.01,100:0.001")]
    lr_schedule: Vec<(usize, f64)>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Continue from <out>/checkpoint when present.
    #[arg(long)]
    resume: bool,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write metrics.png.
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Directory for eval.csv (defaults to the checkpoint directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, value_parser = parse_label)]
    label: ModelConfig,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_GROWTH)]
    growth: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_LAYERS_PER_BLOCK)]
    layers_per_block: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_INPUT_SIZE)]
    input_size: usize,
    /// Add batch-norm, ReLU and pooling costs.
    #[arg(long)]
    count_elementwise: bool,
    /// Also write the table to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnytimeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long)]
    count_elementwise: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated exit-1 thresholds; values above 1 never exit.
    #[arg(long, value_parser = parse_threshold, value_delimiter = ',', required = true)]
    tau1: Vec<f64>,
    /// Comma-separated exit-2 thresholds.
    #[arg(long, value_parser = parse_threshold, value_delimiter = ',', required = true)]
    tau2: Vec<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long)]
    count_elementwise: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Invocation {
    program: String,
    version: String,
    argv: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(paranet::Error),
}

impl From<paranet::Error> for Failure {
    fn from(e: paranet::Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |source| {
        Failure::Run(paranet::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Directory outputs get `invocation.json`; a CSV output `x.csv` gets
/// `x.invocation.json` beside it so commands sharing a directory do not
/// overwrite each other's record.
fn invocation_path_for_csv(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.{INVOCATION_FILE}"))
}

fn record_invocation(dir: &Path, argv: &[String]) -> CliResult {
    record_invocation_at(&dir.join(INVOCATION_FILE), argv)
}

fn record_invocation_at(path: &Path, argv: &[String]) -> CliResult {
    let inv = Invocation {
        program: "paranet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        argv: argv.to_vec(),
    };
    let text = serde_json::to_string_pretty(&inv).expect("serializable") + "\n";
    write_file(path, text)
}

fn pick(split: SplitArg, (train, val): (Dataset, Dataset)) -> Dataset {
    match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
    }
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> CliResult {
    if model.input_size != data.image_size || model.num_classes < data.num_classes {
        return Err(Failure::Run(paranet::Error::Config(format!(
            "model {} expects {}x{} inputs and {} classes, data has {}x{} images and {} classes",
            model.label(),
            model.input_size,
            model.input_size,
            model.num_classes,
            data.image_size,
            data.image_size,
            data.num_classes
        ))));
    }
    Ok(())
}

fn accuracies_line(acc: &[f64; 3]) -> String {
    format!("exit1 {:.4}  exit2 {:.4}  exit3 {:.4}", acc[0], acc[1], acc[2])
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> CliResult {
    let (train_set, val_set) = a.data.load()?;
    let model = a
        .label
        .clone()
        .with_growth(a.growth)
        .with_layers_per_block(a.layers_per_block)
        .with_classes(train_set.num_classes)
        .with_input_size(train_set.image_size);
    let config = TrainConfig {
        epochs: a.epochs,
        lr_schedule: a.lr_schedule.clone(),
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        seed: a.seed,
        augment: a.augment,
    };
    let resume_dir = a.out.join(FINAL_CHECKPOINT);
    let mut trainer = if a.resume && resume_dir.join(checkpoint::MANIFEST_FILE).exists() {
        let mut t = checkpoint::load(&resume_dir)?;
        if t.model != model {
            return Err(Failure::Run(paranet::Error::Checkpoint {
                path: resume_dir,
                detail: format!("holds {} but the command asks for {}", t.model.label(), model.label()),
            }));
        }
        t.config.epochs = a.epochs;
        eprintln!("resuming {} after epoch {}", model.label(), t.epochs_completed);
        t
    } else {
        Trainer::new(model, config)?
    };
    record_invocation(&a.out, argv)?;
    let rows = run_training(&mut trainer, &train_set, &val_set, &a.out, a.stop_after, |m| {
        eprintln!(
            "epoch {:>3}  lr {:<6}  loss {:.4}  {}",
            m.epoch,
            m.lr,
            m.train_loss,
            accuracies_line(&m.val_acc)
        );
    })?;
    if let Some(last) = rows.last() {
        println!("{}", accuracies_line(&last.val_acc));
    }
    if a.plot {
        let text = fs::read_to_string(a.out.join(METRICS_FILE)).map_err(io_err(&a.out))?;
        let series: Vec<Vec<(f64, f64)>> = (3..6)
            .map(|col| {
                text.lines()
                    .skip(1)
                    .filter_map(|l| {
                        let f: Vec<f64> = l.split(',').filter_map(|v| v.parse().ok()).collect();
                        (f.len() == 6).then(|| (f[0], f[col]))
                    })
                    .collect()
            })
            .collect();
        plot::line_plot(&a.out.join("metrics.png"), &series).map_err(Failure::Run)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> CliResult {
    let trainer = checkpoint::load(&a.ckpt)?;
    let data = pick(a.split, a.data.load()?);
    check_compatible(&trainer.model, &data)?;
    let acc = train::evaluate(&trainer.net, &data)?;
    println!("{}", accuracies_line(&acc));
    let out = a.out.unwrap_or_else(|| a.ckpt.clone());
    let mut csv = String::from("exit,accuracy\n");
    for (i, v) in acc.iter().enumerate() {
        csv.push_str(&format!("{},{v:.4}\n", i + 1));
    }
    write_file(&out.join("eval.csv"), csv)?;
    record_invocation(&out, argv)
}

fn cmd_flops(a: FlopsArgs, argv: &[String]) -> CliResult {
    let model = a
        .label
        .with_growth(a.growth)
        .with_layers_per_block(a.layers_per_block)
        .with_classes(a.classes)
        .with_input_size(a.input_size);
    let net = build_graph::<f32>(&model, 0)?;
    let table = budget::count_flops(&net, a.count_elementwise);
    let census = net.parameter_census();
    let mut csv = String::from("exit,flops,params\n");
    for (i, f) in table.cumulative.iter().enumerate() {
        csv.push_str(&format!("{},{f},{}\n", i + 1, census[i].scalars));
    }
    print!("{csv}");
    if let Some(out) = a.out {
        write_file(&out, &csv)?;
        record_invocation_at(&invocation_path_for_csv(&out), argv)?;
    }
    Ok(())
}

fn cmd_anytime(a: AnytimeArgs, argv: &[String]) -> CliResult {
    let trainer = checkpoint::load(&a.ckpt)?;
    let data = pick(a.split, a.data.load()?);
    check_compatible(&trainer.model, &data)?;
    let table = budget::count_flops(&trainer.net, a.count_elementwise);
    let points = budget::anytime_curve(&trainer.net, &data, &table)?;
    let csv = budget::anytime_csv(&points);
    print!("{csv}");
    write_file(&a.out, &csv)?;
    record_invocation_at(&invocation_path_for_csv(&a.out), argv)?;
    if a.plot {
        let series = vec![points.iter().map(|p| (p.flops as f64, p.accuracy)).collect()];
        plot::line_plot(&a.out.with_extension("png"), &series).map_err(Failure::Run)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, argv: &[String]) -> CliResult {
    let trainer = checkpoint::load(&a.ckpt)?;
    let data = pick(a.split, a.data.load()?);
    check_compatible(&trainer.model, &data)?;
    let table = budget::count_flops(&trainer.net, a.count_elementwise);
    let grid: Vec<(f64, f64)> = a.tau1.iter().flat_map(|&t1| a.tau2.iter().map(move |&t2| (t1, t2))).collect();
    let rows = budget::threshold_sweep(&trainer.net, &data, &table, &grid)?;
    let csv = budget::sweep_csv(&rows);
    print!("{csv}");
    write_file(&a.out, &csv)?;
    record_invocation_at(&invocation_path_for_csv(&a.out), argv)?;
    if a.plot {
        let series = vec![rows.iter().map(|r| (r.mean_flops, r.accuracy)).collect()];
        plot::line_plot(&a.out.with_extension("png"), &series).map_err(Failure::Run)?;
    }
    // Sanity reference: the exit-3-only policy.
    let last = rows.iter().find(|r| r.policy == ExitPolicy::always_last());
    if let Some(r) = last {
        eprintln!("exit-3 only: accuracy {:.4} at {:.0} FLOPs", r.accuracy, r.mean_flops);
    }
    Ok(())
}

fn cmd_rerun(path: &Path) -> CliResult {
    let file = if path.is_dir() { path.join(INVOCATION_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let inv: Invocation = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    if inv.argv.first().map(String::as_str) == Some("rerun") {
        return Err(Failure::Usage("a recorded invocation cannot itself be a rerun".into()));
    }
    dispatch(inv.argv)
}

fn usage_for(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand.and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// Runs one invocation; `argv` excludes the program name.
fn dispatch(argv: Vec<String>) -> CliResult {
    let full = std::iter::once("paranet".to_string()).chain(argv.iter().cloned());
    let cli = match Cli::try_parse_from(full) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let mut msg = e.render().to_string();
            if !msg.contains("Usage:") {
                msg.push_str(&format!("\n{}\n", usage_for(argv.first().map(String::as_str))));
            }
            return Err(Failure::Usage(msg));
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Flops(a) => cmd_flops(a, &argv),
        Command::Anytime(a) => cmd_anytime(a, &argv),
        Command::Sweep(a) => cmd_sweep(a, &argv),
        Command::Rerun { path } => cmd_rerun(&path),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("PARANET_THREADS") else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PARANET_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let argv: Vec<String> = std::env::args_os().skip(1).map(|a: OsString| a.to_string_lossy().into_owned()).collect();
    match dispatch(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_parsing() {
        let s = parse_synth("n=64,classes=8").unwrap();
        assert_eq!((s.config.n, s.config.classes, s.config.size, s.val), (64, 8, 32, 16));
        assert_eq!(s.config.noise, SynthConfig::DEFAULT_NOISE);
        let s = parse_synth("n=2048,classes=16,noise=0.6,size=16,seed=3,val=100").unwrap();
        assert_eq!((s.config.noise, s.config.size, s.config.seed, s.val), (0.6, 16, 3, 100));
        assert!(parse_synth("classes=8").is_err());
        assert!(parse_synth("n=8,classes=2,colour=red").is_err());
        assert!(parse_synth("n=x,classes=2").is_err());
    }

    #[test]
    fn schedule_and_threshold_lists() {
        assert_eq!(parse_milestone("5:0.01").unwrap(), (5, 0.01));
        assert!(parse_milestone("0-0.1").is_err());
        assert_eq!(parse_threshold("2").unwrap(), 2.0);
        assert!(parse_threshold("-1").is_err());
        let cli = Cli::try_parse_from(["paranet", "sweep", "--ckpt", "c", "--synth", "n=8,classes=2", "--tau1", "0,0.5", "--tau2", "2", "--out", "o.csv"]).unwrap();
        match cli.command {
            Command::Sweep(a) => assert_eq!((a.tau1, a.tau2), (vec![0.0, 0.5], vec![2.0])),
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["paranet", "train", "--label", "PN3-ddd", "--synth", "n=8,classes=2", "--out", "o"]).unwrap();
        match cli.command {
            Command::Train(a) => assert_eq!(a.lr_schedule, vec![(0, 0.1), (50, 0.01), (100, 0.001)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_errors_are_usage_errors() {
        let argv = ["train", "--label", "PN3-11d", "--synth", "n=8,classes=2", "--out", "x"];
        match dispatch(argv.iter().map(|s| s.to_string()).collect()) {
            Err(Failure::Usage(msg)) => {
                assert!(msg.contains("matched to itself"), "{msg}");
                assert!(msg.contains("Usage"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn data_source_is_exclusive_and_required() {
        let run = |argv: &[&str]| dispatch(argv.iter().map(|s| s.to_string()).collect());
        assert!(matches!(run(&["eval", "--ckpt", "c"]), Err(Failure::Usage(_))));
        assert!(matches!(
            run(&["eval", "--ckpt", "c", "--cifar", "d", "--synth", "n=8,classes=2"]),
            Err(Failure::Usage(_))
        ));
    }
}
