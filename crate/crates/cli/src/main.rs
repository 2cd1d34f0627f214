use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use pbpk_core::metrics::{compare, evaluate, predictions_csv, ComparisonTable, MetricsReport};
use pbpk_core::models::{ModelConfig, ModelKind};
use pbpk_core::pbpk::{
    generate_dataset, split_dataset, ConcentrationTensor, DatagenConfig, NormMode, Organ, OrganGraph, SplitPart,
};
use pbpk_core::train::{epoch_log_csv, train, ModelCheckpoint, TrainConfig};
use pbpk_core::SCHEMA_VERSION;

const SEED_ENV: &str = "PBPK_SEED";

#[derive(Parser)]
#[command(name = "pbpk", version, about = "Synthetic PBPK datasets and next-step concentration models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate concentration-time profiles for a set of random drugs.
    Generate(GenerateArgs),
    /// Train an MLP, LSTM or dynamic graph network on a dataset file.
    Train(TrainArgs),
    /// Write a persistence-baseline checkpoint (graph model with zero readout).
    Baseline(BaselineArgs),
    /// Score a checkpoint on the validation or test drugs.
    Evaluate(EvaluateArgs),
    /// Rank evaluation reports and draw the comparison chart.
    Compare(CompareArgs),
    /// Redraw the comparison chart from a comparison JSON file.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of drugs [default: 200]
    #[arg(long)]
    n_drugs: Option<usize>,
    /// Sampling seed; falls back to $PBPK_SEED, then 7
    #[arg(long)]
    seed: Option<u64>,
    /// JSON list of organs replacing the built-in table
    #[arg(long)]
    organs_file: Option<PathBuf>,
    /// Samples per trajectory [default: 48]
    #[arg(long)]
    t_steps: Option<usize>,
    /// Simulated hours [default: 24]
    #[arg(long)]
    t_end_h: Option<f64>,
    /// Integrator step in hours [default: 0.001]
    #[arg(long)]
    dt_h: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the tensor as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    data: PathBuf,
    /// JSON file with optional `model` and `train` sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed; falls back to the config file, $PBPK_SEED, then 7
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Epoch log CSV [default: <out>.epochs.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print progress every N epochs to stderr (0 disables)
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitPart,
    #[arg(long)]
    report_out: PathBuf,
    /// Write every prediction as CSV
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// Model name in the report [default: the model kind]
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 2.., required = true)]
    reports: Vec<PathBuf>,
    /// Output directory for comparison.{json,txt,svg,csv}
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    comparison: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the bar values as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("${SEED_ENV} is not an unsigned integer: `{s}`"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_data(path: &Path) -> Result<ConcentrationTensor> {
    ConcentrationTensor::from_json(&read(path)?).with_context(|| format!("invalid dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_json(&read(path)?).with_context(|| format!("invalid checkpoint {}", path.display()))
}

fn run_config(command: &str, fields: Value) -> Value {
    let mut rc = json!({
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    if let (Some(rc), Value::Object(f)) = (rc.as_object_mut(), fields) {
        rc.extend(f);
    }
    rc
}

/// `# schema_version=… run_config=…` header line for CSV and text outputs.
fn comment_header(rc: &Value) -> String {
    format!("# schema_version={SCHEMA_VERSION} run_config={rc}\n")
}

fn svg_with_metadata(svg: &str, rc: &Value) -> String {
    let meta = rc.to_string().replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    match svg.find('\n') {
        Some(i) => format!("{}\n<metadata>{meta}</metadata>{}", &svg[..i], &svg[i..]),
        None => svg.to_string(),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let d = DatagenConfig::default();
    let cfg = DatagenConfig {
        n_drugs: a.n_drugs.unwrap_or(d.n_drugs),
        seed: match a.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(d.seed),
        },
        t_steps: a.t_steps.unwrap_or(d.t_steps),
        t_end_h: a.t_end_h.unwrap_or(d.t_end_h),
        dt_h: a.dt_h.unwrap_or(d.dt_h),
        ..d
    };
    cfg.validate()?;
    let graph = match &a.organs_file {
        Some(p) => {
            let organs: Vec<Organ> =
                serde_json::from_str(&read(p)?).with_context(|| format!("invalid organ table {}", p.display()))?;
            OrganGraph::new(organs)?
        }
        None => OrganGraph::default(),
    };
    let rc = run_config(
        "generate",
        json!({
            "seed": cfg.seed,
            "generator": cfg,
            "organs_file": a.organs_file.as_deref().map(path_str),
            "out": path_str(&a.out),
            "csv": a.csv.as_deref().map(path_str),
        }),
    );
    let data = generate_dataset(&cfg, &graph)?;
    write(&a.out, &data.to_json(Some(rc.clone()))?)?;
    if let Some(p) = &a.csv {
        write(p, &(comment_header(&rc) + &data.to_csv()))?;
    }
    let (n, t, o) = data.shape();
    println!(
        "generated {n}×{t}×{o} concentration tensor (N={n}, T={t}, O={o}, seed={}) -> {}",
        data.seed,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let file = match &a.config {
        Some(p) => serde_json::from_str::<ConfigFile>(&read(p)?)
            .with_context(|| format!("invalid config {}", p.display()))?,
        None => ConfigFile::default(),
    };
    let file_sets_seed = file.train.is_some();
    let mut tcfg = file.train.unwrap_or_default();
    tcfg.seed = match (a.seed, file_sets_seed) {
        (Some(s), _) => s,
        (None, true) => tcfg.seed,
        (None, false) => env_seed()?.unwrap_or(tcfg.seed),
    };
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let mcfg = ModelConfig {
        kind: a.model,
        n_organs: data.n_organs(),
        ..file.model.unwrap_or_default()
    };
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.epochs.csv", a.out.display())));
    let rc = run_config(
        "train",
        json!({
            "seed": tcfg.seed,
            "data": path_str(&a.data),
            "dataset_seed": data.seed,
            "config": a.config.as_deref().map(path_str),
            "out": path_str(&a.out),
            "log": path_str(&log_path),
            "model": mcfg,
            "train": tcfg,
        }),
    );
    let split = split_dataset(data.n_drugs(), data.seed)?;
    let every = a.log_every;
    let outcome = train(&mcfg, &data, &split, &tcfg, &mut |r| {
        if every > 0 && (r.epoch % every == 0 || r.epoch + 1 == tcfg.epochs) {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  train {:.6e}  val {:.6e}",
                r.epoch, r.lr, r.train_loss, r.val_loss
            );
        }
    })?;
    let mut ckpt = outcome.checkpoint;
    ckpt.run_config = Some(rc.clone());
    write(&a.out, &ckpt.to_json()?)?;
    write(&log_path, &(comment_header(&rc) + &epoch_log_csv(&outcome.epochs)))?;
    println!(
        "trained {} for {} epochs; best epoch {} (val loss {:.6e}) -> {}",
        mcfg.kind,
        tcfg.epochs,
        ckpt.epoch,
        ckpt.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let split = split_dataset(data.n_drugs(), data.seed)?;
    let mut ckpt = ModelCheckpoint::persistence(&data, &split, NormMode::PerOrgan)?;
    ckpt.run_config = Some(run_config(
        "baseline",
        json!({
            "baseline": "persistence",
            "data": path_str(&a.data),
            "dataset_seed": data.seed,
            "out": path_str(&a.out),
        }),
    ));
    write(&a.out, &ckpt.to_json()?)?;
    println!("persistence baseline -> {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let (mut report, rows) = evaluate(&ckpt, &data, a.split).with_context(|| {
        format!(
            "cannot evaluate {} on {}",
            a.checkpoint.display(),
            a.data.display()
        )
    })?;
    if let Some(label) = &a.label {
        report.model = label.clone();
    }
    let rc = run_config(
        "evaluate",
        json!({
            "checkpoint": path_str(&a.checkpoint),
            "data": path_str(&a.data),
            "dataset_seed": data.seed,
            "split": a.split.name(),
            "label": report.model,
            "report_out": path_str(&a.report_out),
            "dump_predictions": a.dump_predictions.as_deref().map(path_str),
        }),
    );
    report.checkpoint = Some(path_str(&a.checkpoint));
    report.run_config = Some(rc.clone());
    write(&a.report_out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if let Some(p) = &a.dump_predictions {
        write(p, &(comment_header(&rc) + &predictions_csv(&rows)))?;
    }
    println!(
        "{} on {} split: RMSE {:.6} MAE {:.6} R2 {:.4} (n={})",
        report.model, report.split, report.rmse, report.mae, report.r2, report.n_samples
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            serde_json::from_str::<MetricsReport>(&read(p)?).with_context(|| format!("invalid report {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = compare(&reports)?;
    let rc = run_config(
        "compare",
        json!({
            "reports": a.reports.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
            "dataset_seed": table.dataset_seed,
            "out": path_str(&a.out),
        }),
    );
    table.run_config = Some(rc.clone());
    let text = table.render_text();
    write(&a.out.join("comparison.json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
    write(&a.out.join("comparison.txt"), &(comment_header(&rc) + &text))?;
    write(&a.out.join("comparison.svg"), &svg_with_metadata(&table.to_svg(), &rc))?;
    write(&a.out.join("comparison.csv"), &(comment_header(&rc) + &table.plot_csv()))?;
    print!("{text}");
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let table: ComparisonTable = serde_json::from_str(&read(&a.comparison)?)
        .with_context(|| format!("invalid comparison {}", a.comparison.display()))?;
    if table.rows.is_empty() {
        bail!("comparison {} has no rows", a.comparison.display());
    }
    let rc = run_config(
        "plot",
        json!({
            "comparison": path_str(&a.comparison),
            "out": path_str(&a.out),
            "csv": a.csv.as_deref().map(path_str),
        }),
    );
    write(&a.out, &svg_with_metadata(&table.to_svg(), &rc))?;
    if let Some(p) = &a.csv {
        write(p, &(comment_header(&rc) + &table.plot_csv()))?;
    }
    println!("chart -> {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pbpk: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
