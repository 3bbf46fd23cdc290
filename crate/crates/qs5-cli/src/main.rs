//! `qs5`: generate data, train, quantize, and evaluate small state-space
//! sequence models from the command line.
//!
//! Every command echoes its fully resolved configuration as TOML next to
//! its outputs, so any run can be reproduced from its artifacts alone.
//!
//! Exit codes: 0 success, 2 usage error, 3 non-convergence, 4 IO/format.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qs5_core::dynsys::{self, MackeyGlassConfig};
use qs5_core::model::{apply_ptq, ModelBundle, ModelMeta, QuantConfig, TaskKind};
use qs5_core::serialize::{load_model, save_model};
use qs5_core::ssm::Readout;
use qs5_core::tasks::{generate_toy_classification, TaskData, ToyClassificationConfig};
use qs5_core::train::{
    evaluate, finetune_qaft, metric_higher_is_better, train_from, CheckpointMode, EpochLog,
    LrSchedule, QaftConfig, TrainConfig, TrainResult,
};
use qs5_core::QssmError;

const EXIT_USAGE: u8 = 2;
const EXIT_NON_CONVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "qs5", version, about = "quantized state-space sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a delay-embedded Mackey-Glass series as CSV.
    Generate(GenerateArgs),
    /// Train a model (full precision or quantization-aware).
    Train(TrainArgs),
    /// Quantize a trained model without further training.
    Ptq(PtqArgs),
    /// Briefly fine-tune a full-precision model under quantization.
    Qaft(QaftArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Cross-product sweep over delays, quant configs, and seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DataArgs {
    /// Task: mackey_glass or toy_classification.
    #[arg(long, default_value = "mackey_glass")]
    task: String,
    /// Mackey-Glass delay tau (0 to 100).
    #[arg(long, default_value_t = 17.0)]
    tau: f64,
    /// Series length after the transient.
    #[arg(long, default_value_t = 700)]
    steps: usize,
    /// Dataset RNG seed.
    #[arg(long, default_value_t = 100)]
    data_seed: u64,
    /// Forecast context window length.
    #[arg(long, default_value_t = 50)]
    context: usize,
    /// Keep every n-th training window.
    #[arg(long, default_value_t = 5)]
    stride: usize,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ModelArgs {
    /// Backbone width.
    #[arg(long, default_value_t = 7)]
    h: usize,
    /// State dimension per block.
    #[arg(long, default_value_t = 5)]
    p: usize,
    /// Number of blocks.
    #[arg(long, default_value_t = 2)]
    depth: usize,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct FitArgs {
    /// Quantization config, e.g. FP, W8A8, W4A8SSM8, W4A8Abar8.
    #[arg(long, default_value = "FP")]
    quant: String,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Model/training RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PtqArgs {
    /// Trained full-precision model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    quant: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QaftArgs {
    /// Trained full-precision model file.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated tau values.
    #[arg(long, value_delimiter = ',', default_value = "5,25,50")]
    taus: Vec<f64>,
    /// Comma-separated quant config names.
    #[arg(long, value_delimiter = ',', default_value = "FP,W8A8")]
    quants: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Fully resolved run configuration, echoed as TOML next to every output.
#[derive(Serialize, Deserialize)]
struct ExperimentConfig {
    command: String,
    data: DataArgs,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitArgs>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Ptq(a) => cmd_ptq(a),
        Command::Qaft(a) => cmd_qaft(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &anyhow::Error) -> u8 {
    if let Some(q) = e.downcast_ref::<QssmError>() {
        return match q {
            QssmError::InvalidConfig(_) | QssmError::BadQuantConfig { .. } => EXIT_USAGE,
            QssmError::Diverged { .. } => EXIT_NON_CONVERGED,
            QssmError::Io(_) | QssmError::Format(_) => EXIT_IO,
            _ => 1,
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    1
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let text = toml::to_string_pretty(cfg)?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn parse_task(name: &str) -> anyhow::Result<TaskKind> {
    match name {
        "mackey_glass" => Ok(TaskKind::Regression),
        "toy_classification" => Ok(TaskKind::Classification),
        other => Err(QssmError::InvalidConfig(format!(
            "unknown task {other:?}; expected mackey_glass or toy_classification"
        ))
        .into()),
    }
}

fn parse_quant(name: &str) -> anyhow::Result<QuantConfig> {
    QuantConfig::parse(name).map_err(|e| {
        anyhow::anyhow!(QssmError::InvalidConfig(format!(
            "{e}; grammar: FP | W<bits>A<bits>[SSM<bits>|SSMA<bits>|Abar<bits>]"
        )))
    })
}

fn mackey_config(d: &DataArgs) -> anyhow::Result<MackeyGlassConfig> {
    let cfg = MackeyGlassConfig {
        tau: d.tau,
        steps: d.steps,
        seed: d.data_seed,
        transient: 500,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(d: &DataArgs) -> anyhow::Result<TaskData> {
    match parse_task(&d.task)? {
        TaskKind::Regression => {
            let series = dynsys::generate_mackey_glass(&mackey_config(d)?)?;
            let mut ds = dynsys::make_forecast_dataset(&series, d.context, 1)?;
            if d.stride > 1 {
                ds.train = ds.train.into_iter().step_by(d.stride).collect();
                ds.test = ds.test.into_iter().step_by(2).collect();
            }
            Ok(TaskData::Forecast(ds))
        }
        TaskKind::Classification => {
            let cfg = ToyClassificationConfig {
                seq_len: 64,
                train_per_class: 16,
                test_per_class: 12,
                noise: 0.4,
                seed: d.data_seed,
                ..Default::default()
            };
            Ok(TaskData::Classify(generate_toy_classification(&cfg)?))
        }
    }
}

fn model_meta(task: TaskKind, m: &ModelArgs, seed: u64) -> ModelMeta {
    let (h_in, h_out) = match task {
        TaskKind::Regression => (10, 10),
        TaskKind::Classification => (1, 4),
    };
    ModelMeta {
        task,
        h_in,
        h: m.h,
        p: m.p,
        depth: m.depth,
        h_out,
        seed,
        readout: Readout::Current,
    }
}

fn train_config(f: &FitArgs) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        lr: f.lr,
        weight_decay: f.weight_decay,
        seed: f.seed,
        qcfg_name: f.quant.clone(),
        lr_schedule: LrSchedule::Cosine,
        qaft: QaftConfig::default(),
        checkpoint: CheckpointMode::BestEval,
        clip_norm: 1.0,
    }
}

fn write_log(dir: &Path, history: &[EpochLog]) -> anyhow::Result<()> {
    let mut out = String::from("epoch,train_loss,eval_metric,wall_secs\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.eval_metric, row.wall_secs
        ));
    }
    std::fs::write(dir.join("log.csv"), out)?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    schema_version: u32,
    converged: bool,
    best_epoch: usize,
    best_metric: f64,
    final_metric: f64,
    epochs_used: usize,
    lr_used: f64,
    metric: &'static str,
}

fn write_summary(dir: &Path, res: &TrainResult, data: &TaskData) -> anyhow::Result<()> {
    let final_metric = evaluate(&res.final_model, data)?;
    let summary = RunSummary {
        schema_version: 1,
        converged: res.converged,
        best_epoch: res.best_epoch,
        best_metric: res.best_metric,
        final_metric,
        epochs_used: res.epochs_used,
        lr_used: res.lr_used,
        metric: if metric_higher_is_better(res.final_model.meta.task) {
            "accuracy"
        } else {
            "smape"
        },
    };
    std::fs::write(dir.join("summary.toml"), toml::to_string_pretty(&summary)?)?;
    Ok(())
}

fn finish_training(
    dir: &Path,
    res: &TrainResult,
    data: &TaskData,
) -> anyhow::Result<ExitCode> {
    save_model(&res.model, dir.join("model.qssm"))?;
    write_log(dir, &res.history)?;
    write_summary(dir, res, data)?;
    if res.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("run did not converge");
        Ok(ExitCode::from(EXIT_NON_CONVERGED))
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    let series = dynsys::generate_mackey_glass(&mackey_config(&a.data)?)?;
    let mut csv = String::from("t");
    for j in 0..series.data.ncols() {
        csv.push_str(&format!(",c{j}"));
    }
    csv.push('\n');
    for (t, row) in series.data.outer_iter().enumerate() {
        csv.push_str(&t.to_string());
        for v in row.iter() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(a.out.join("series.csv"), csv)?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "generate".into(),
            data: a.data,
            model: None,
            fit: None,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    let qcfg = parse_quant(&a.fit.quant)?;
    let task = parse_task(&a.data.task)?;
    let data = load_data(&a.data)?;
    let meta = model_meta(task, &a.model, a.fit.seed);
    let model = ModelBundle::new(meta, qcfg);
    let tcfg = train_config(&a.fit);
    let res = train_from(model, &tcfg, &data)?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "train".into(),
            data: a.data,
            model: Some(a.model),
            fit: Some(a.fit),
        },
    )?;
    finish_training(&a.out, &res, &data)
}

fn cmd_ptq(a: PtqArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    let qcfg = parse_quant(&a.quant)?;
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let quantized = apply_ptq(&model, qcfg)?;
    save_model(&quantized, a.out.join("model.qssm"))?;
    let metric = evaluate(&quantized, &data)?;
    let text = format!(
        "schema_version = 1\nquant = {:?}\nmetric_value = {}\n",
        a.quant, metric
    );
    std::fs::write(a.out.join("summary.toml"), text)?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "ptq".into(),
            data: a.data,
            model: None,
            fit: None,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_qaft(a: QaftArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    parse_quant(&a.fit.quant)?;
    let base = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let tcfg = train_config(&a.fit);
    let res = finetune_qaft(&base, &tcfg, &data)?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "qaft".into(),
            data: a.data,
            model: None,
            fit: Some(a.fit),
        },
    )?;
    finish_training(&a.out, &res, &data)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let metric = evaluate(&model, &data)?;
    let name = if metric_higher_is_better(model.meta.task) {
        "accuracy"
    } else {
        "smape"
    };
    std::fs::write(
        a.out.join("metrics.toml"),
        format!("schema_version = 1\nmetric = {name:?}\nmetric_value = {metric}\n"),
    )?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "eval".into(),
            data: a.data,
            model: None,
            fit: None,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

struct SweepCell {
    tau: f64,
    quant: String,
    seed: u64,
    smape: Option<f64>,
    converged: bool,
    error: Option<String>,
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<ExitCode> {
    use rayon::prelude::*;
    std::fs::create_dir_all(&a.out)?;
    // validate every config up front so a typo is a usage error, not a
    // partial-failure row
    for q in &a.quants {
        parse_quant(q)?;
    }
    for &tau in &a.taus {
        let mut d = a.data.clone();
        d.tau = tau;
        mackey_config(&d)?;
    }

    let mut cells: Vec<(f64, String, u64)> = Vec::new();
    for &tau in &a.taus {
        for q in &a.quants {
            for &s in &a.seeds {
                cells.push((tau, q.clone(), s));
            }
        }
    }

    let results: Vec<SweepCell> = cells
        .par_iter()
        .map(|(tau, quant, seed)| {
            let run = || -> anyhow::Result<(f64, bool)> {
                let mut d = a.data.clone();
                d.tau = *tau;
                d.task = "mackey_glass".into();
                let data = load_data(&d)?;
                let qcfg = parse_quant(quant)?;
                let meta = model_meta(TaskKind::Regression, &a.model, *seed);
                let mut tcfg = train_config(&a.fit);
                tcfg.seed = *seed;
                tcfg.qcfg_name = quant.clone();
                let res = train_from(ModelBundle::new(meta, qcfg), &tcfg, &data)?;
                Ok((res.best_metric, res.converged))
            };
            match run() {
                Ok((smape, converged)) => SweepCell {
                    tau: *tau,
                    quant: quant.clone(),
                    seed: *seed,
                    smape: Some(smape),
                    converged,
                    error: None,
                },
                Err(e) => SweepCell {
                    tau: *tau,
                    quant: quant.clone(),
                    seed: *seed,
                    smape: None,
                    converged: false,
                    error: Some(format!("{e:#}").replace([',', '\n'], ";")),
                },
            }
        })
        .collect();

    let mut cells_csv = String::from("tau,quant,seed,smape,converged,error\n");
    for c in &results {
        cells_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.tau,
            c.quant,
            c.seed,
            c.smape.map_or(String::new(), |v| v.to_string()),
            c.converged,
            c.error.clone().unwrap_or_default()
        ));
    }
    std::fs::write(a.out.join("cells.csv"), cells_csv)?;

    // aggregate: mean over seeds of converged cells, in declared order
    let mut agg_csv = String::from("tau,quant,mean_smape,n_converged,n_seeds\n");
    for &tau in &a.taus {
        for q in &a.quants {
            let vals: Vec<f64> = results
                .iter()
                .filter(|c| c.tau == tau && &c.quant == q && c.converged)
                .filter_map(|c| c.smape)
                .collect();
            let mean = if vals.is_empty() {
                String::new()
            } else {
                (vals.iter().sum::<f64>() / vals.len() as f64).to_string()
            };
            agg_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                tau,
                q,
                mean,
                vals.len(),
                a.seeds.len()
            ));
        }
    }
    std::fs::write(a.out.join("aggregate.csv"), agg_csv)?;
    write_config(
        &a.out,
        &ExperimentConfig {
            command: "sweep".into(),
            data: a.data,
            model: Some(a.model),
            fit: Some(a.fit),
        },
    )?;
    Ok(ExitCode::SUCCESS)
}
