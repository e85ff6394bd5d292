//! `deeptour`: data generation, training, evaluation, scaling fits, and
//! diagnostics for the decoder-only TSP constructor.
//!
//! Exit codes: 0 success, 2 validation error, 3 state mismatch, 4 numerical
//! failure.

mod manifest;

use clap::{Parser, Subcommand};
use deeptour_core::analysis::{
    cosine_map, embedding_snapshots, evaluate, long_sightedness, matrix_to_csv, pca2d,
    render_svg, to_json, tours_to_csv, Policy, Series,
};
use deeptour_core::instances::{
    generate_labeled, read_dataset, write_dataset, DatasetHeader, DistributionKind, LabelKind,
    TspInstance, MAX_HELD_KARP_N,
};
use deeptour_core::model::{
    load_checkpoint, param_count, save_checkpoint, ModelConfig, ModelParams,
};
use deeptour_core::scaling::{
    fit_bivariate, fit_power, fit_shifted, fixtures, flops_per_solution, read_records,
    BivariateFit, DecodeStrategy, EvalRecord, PowerLawFit, ShiftedFit,
};
use deeptour_core::training::{
    load_train_state, run_training, save_train_state, OptimizerState, TrainConfig, TrainError,
};
use manifest::RunManifest;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
enum CliError {
    /// bad flags, malformed inputs, unsatisfiable requests -> exit 2
    Validation(String),
    /// inputs disagree with each other (checkpoint vs config/data) -> exit 3
    StateMismatch(String),
    /// non-finite losses, non-converging fits -> exit 4
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::StateMismatch(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::StateMismatch(m) | CliError::Numerical(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Parser)]
#[command(name = "deeptour", about = "Decoder-only neural TSP constructor toolkit")]
struct Cli {
    /// Worker threads for data generation/decoding (0 = all cores). Outputs
    /// are bit-identical regardless of this setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (and optionally label) a TSP instance dataset
    GenData {
        #[arg(long)]
        kind: DistributionKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "none")]
        label: LabelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a labeled dataset
    Train {
        /// JSON file: {"model": ModelConfig, "train": TrainConfig}
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Save an intermediate checkpoint every this many steps
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from <out>/train_state.bin
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a labeled dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// greedy | beam:K | rrc:K
        #[arg(long, default_value = "greedy")]
        decode: DecodeStrategy,
        /// Training instance size for the log(n) correction (default: data n)
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit scaling laws to evaluation records or the bundled reference tables
    FitScaling {
        /// EvalRecord CSV path, or "table9" for the bundled fixture
        #[arg(long)]
        records: String,
        /// N | S | C | WD | NA | time
        #[arg(long)]
        form: String,
        /// Restrict to one width (fixture forms)
        #[arg(long)]
        filter_width: Option<usize>,
        /// Restrict to one depth (fixture forms)
        #[arg(long)]
        filter_depth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostics: longsight | pca | cosine | flops
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: String,
        /// Rank buckets for longsight
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Policy for longsight: model | oracle | nearest
        #[arg(long, default_value = "model")]
        policy: String,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { kind, n, count, seed, label, out } => {
            gen_data(kind, n, count, seed, label, &out)
        }
        Command::Train { config, data, out, checkpoint_every, resume } => {
            train(&config, &data, &out, checkpoint_every, resume)
        }
        Command::Eval { ckpt, data, decode, n_train, seed, out } => {
            eval(&ckpt, &data, decode, n_train, seed, &out)
        }
        Command::FitScaling { records, form, filter_width, filter_depth, out } => {
            fit_scaling(&records, &form, filter_width, filter_depth, &out)
        }
        Command::Analyze { ckpt, data, report, k, policy, n_train, out } => {
            analyze(&ckpt, &data, &report, k, &policy, n_train, &out)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| validation(format!("cannot create {}: {e}", path.display())))
}

fn gen_data(
    kind: DistributionKind,
    n: usize,
    count: u64,
    seed: u64,
    label: LabelKind,
    out: &Path,
) -> Result<(), CliError> {
    if label == LabelKind::HeldKarp && n > MAX_HELD_KARP_N {
        return Err(CliError::Validation(format!(
            "heldkarp labels require n <= {MAX_HELD_KARP_N}, got {n}"
        )));
    }
    let mut manifest = RunManifest::start("gen-data", seed, &(kind, n, count, label));
    let instances = generate_labeled(kind, n, count, seed, label).map_err(validation)?;
    let header = DatasetHeader { kind, label, n, count, seed };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_dataset(out, &header, &instances).map_err(validation)?;
    manifest.push_output(out);
    manifest.finish_beside(out).map_err(validation)?;
    println!("gen-data ok out={} count={count} n={n} label={label:?}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
    /// Parameter initialization seed (separate from the data/sampling seed)
    #[serde(default)]
    init_seed: u64,
}

fn train(
    config_path: &Path,
    data_path: &Path,
    out: &Path,
    checkpoint_every: Option<usize>,
    resume: bool,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| validation(format!("{}: {e}", config_path.display())))?;
    let cfg: TrainFileConfig = serde_json::from_str(&text)
        .map_err(|e| validation(format!("bad config: {e}")))?;
    cfg.model.validate().map_err(validation)?;
    cfg.train.validate().map_err(validation)?;
    let (header, instances) = read_dataset(data_path).map_err(validation)?;
    if header.label == LabelKind::None {
        return Err(CliError::Validation("training requires a labeled dataset".into()));
    }
    ensure_dir(out)?;

    let mut manifest = RunManifest::start("train", cfg.train.seed, &cfg);
    let state_path = out.join("train_state.bin");
    let (mut params, mut opt, start_step) = if resume {
        let mut params = ModelParams::zeros(cfg.model).map_err(validation)?;
        let opt = load_train_state(&state_path, &mut params).map_err(|e| {
            CliError::StateMismatch(format!("cannot resume from {}: {e}", state_path.display()))
        })?;
        let step = opt.step;
        (params, opt, step)
    } else {
        let params = ModelParams::init(cfg.model, cfg.init_seed).map_err(validation)?;
        let opt = OptimizerState::new(&params);
        (params, opt, 0)
    };

    let mut curve_csv = String::from("step,lr,loss\n");
    let ckpt_dir = out.to_path_buf();
    let curve = run_training(
        &cfg.train,
        &instances,
        &mut params,
        &mut opt,
        start_step,
        |point, params, opt| {
            if let Some(every) = checkpoint_every {
                if (point.step + 1) % every == 0 {
                    let p = ckpt_dir.join(format!("ckpt_{:06}.ckpt", point.step + 1));
                    let _ = save_checkpoint(&p, params);
                    let _ = save_train_state(&ckpt_dir.join("train_state.bin"), params, opt);
                }
            }
        },
    )
    .map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        TrainError::DatasetExhausted { .. } | TrainError::TourTooShort(_) => {
            validation(e)
        }
        other => CliError::Validation(other.to_string()),
    })?;
    for p in &curve {
        writeln!(curve_csv, "{},{},{}", p.step, p.lr, p.loss).unwrap();
    }

    let ckpt_path = out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &params).map_err(validation)?;
    save_train_state(&state_path, &params, &opt).map_err(validation)?;
    let curve_path = out.join("loss_curve.csv");
    // on resume, append only the new rows to the existing curve
    if resume && curve_path.exists() {
        let mut existing = std::fs::read_to_string(&curve_path).map_err(validation)?;
        existing.push_str(curve_csv.trim_start_matches("step,lr,loss\n"));
        std::fs::write(&curve_path, existing).map_err(validation)?;
    } else {
        std::fs::write(&curve_path, &curve_csv).map_err(validation)?;
    }
    // echo the full effective config for auditability
    std::fs::write(out.join("config_echo.json"), to_json(&cfg)).map_err(validation)?;

    manifest.push_output(&ckpt_path);
    manifest.push_output(&curve_path);
    manifest.finish_in(out).map_err(validation)?;
    let final_loss = curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
    println!(
        "train ok out={} steps={} params={} final_loss={final_loss}",
        out.display(),
        opt.step,
        param_count(&cfg.model)
    );
    Ok(())
}

fn load_labeled(
    ckpt: &Path,
    data: &Path,
) -> Result<(ModelParams, DatasetHeader, Vec<TspInstance>), CliError> {
    let params = load_checkpoint(ckpt)
        .map_err(|e| CliError::StateMismatch(format!("{}: {e}", ckpt.display())))?;
    let (header, instances) = read_dataset(data).map_err(validation)?;
    Ok((params, header, instances))
}

fn eval(
    ckpt: &Path,
    data: &Path,
    decode: DecodeStrategy,
    n_train: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let (params, header, instances) = load_labeled(ckpt, data)?;
    if header.label == LabelKind::None {
        return Err(CliError::Validation("eval requires a labeled dataset".into()));
    }
    let n_train = n_train.unwrap_or(header.n);
    ensure_dir(out)?;
    let mut manifest = RunManifest::start("eval", seed, &(decode, n_train));
    let (evals, summary) =
        evaluate(&params, &instances, decode, n_train, seed).map_err(validation)?;
    let tours_path = out.join("tours.csv");
    std::fs::write(&tours_path, tours_to_csv(&evals)).map_err(validation)?;

    let gflops = flops_per_solution(&params.config, header.n, decode).ok();
    #[derive(Serialize)]
    struct EvalReport<'a> {
        decode: String,
        n_train: usize,
        summary: &'a deeptour_core::analysis::EvalSummary,
        gflops_per_solution: Option<f64>,
    }
    let report = EvalReport {
        decode: decode.to_string(),
        n_train,
        summary: &summary,
        gflops_per_solution: gflops,
    };
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, to_json(&report)).map_err(validation)?;
    manifest.push_output(&tours_path);
    manifest.push_output(&summary_path);
    manifest.finish_in(out).map_err(validation)?;
    println!(
        "eval ok out={} count={} mean_gap={} decode={decode}",
        out.display(),
        summary.count,
        summary.mean_gap_percent
    );
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    form: String,
    n_points: usize,
    power: Option<PowerLawFit>,
    bivariate: Option<BivariateFit>,
    shifted: Option<ShiftedFit>,
    /// c of the N ~ c D W^2 approximation, for the NA form
    dw2_c: Option<f64>,
}

/// (x-or-(x1,x2), gap) source rows for the requested fit form.
struct FitInputs {
    univariate: Vec<(f64, f64)>,
    bivariate: Vec<(f64, f64, f64)>,
}

fn fit_rows(
    records: &str,
    form: &str,
    filter_width: Option<usize>,
    filter_depth: Option<usize>,
) -> Result<FitInputs, CliError> {
    let rows: Vec<EvalRecord> = if records == "table9" {
        let t9 = fixtures::table9().map_err(validation)?;
        t9.into_iter()
            .map(|(config, gap)| EvalRecord {
                config,
                params: param_count(&config),
                decode: DecodeStrategy::Greedy,
                dataset: "table9".into(),
                mean_gap_percent: gap,
                wall_seconds: 0.0,
                gflops_per_solution: 0.0,
                samples_seen: 0,
            })
            .collect()
    } else {
        read_records(Path::new(records)).map_err(validation)?
    };
    let rows: Vec<EvalRecord> = rows
        .into_iter()
        .filter(|r| filter_width.map(|w| r.config.width == w).unwrap_or(true))
        .filter(|r| filter_depth.map(|d| r.config.depth == d).unwrap_or(true))
        .collect();
    let mut inputs = FitInputs { univariate: Vec::new(), bivariate: Vec::new() };
    for r in &rows {
        let gap = r.mean_gap_percent;
        match form {
            "N" => inputs.univariate.push((r.params as f64, gap)),
            "S" => inputs.univariate.push((r.samples_seen as f64, gap)),
            "C" => inputs.univariate.push((r.gflops_per_solution, gap)),
            "time" => inputs.univariate.push((r.wall_seconds, gap)),
            "WD" => inputs
                .bivariate
                .push((r.config.depth as f64, r.config.width as f64, gap)),
            "NA" => inputs.bivariate.push((
                r.params as f64,
                r.config.depth as f64 / r.config.width as f64,
                gap,
            )),
            other => {
                return Err(CliError::Validation(format!(
                    "unknown form {other} (N|S|C|WD|NA|time)"
                )))
            }
        }
    }
    Ok(inputs)
}

fn fit_scaling(
    records: &str,
    form: &str,
    filter_width: Option<usize>,
    filter_depth: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let inputs = fit_rows(records, form, filter_width, filter_depth)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::start("fit-scaling", 0, &(records, form));
    let numerical = |e: deeptour_core::scaling::ScalingError| CliError::Numerical(e.to_string());

    let mut report = FitReport {
        form: form.to_string(),
        n_points: inputs.univariate.len().max(inputs.bivariate.len()),
        power: None,
        bivariate: None,
        shifted: None,
        dw2_c: None,
    };
    let mut series = Vec::new();
    match form {
        "N" | "S" | "C" => {
            let fit = fit_power(&inputs.univariate).map_err(numerical)?;
            series.push(Series {
                label: format!("fit alpha={:.4}", fit.alpha),
                points: inputs
                    .univariate
                    .iter()
                    .map(|&(x, _)| (x, fit.predict(x)))
                    .collect(),
                line: true,
            });
            report.power = Some(fit);
        }
        "time" => {
            let fit = fit_shifted(&inputs.univariate).map_err(numerical)?;
            if !fit.converged {
                return Err(CliError::Numerical(
                    "shifted fit did not converge within budget".into(),
                ));
            }
            series.push(Series {
                label: format!("fit beta={:.4} gamma={:.4}", fit.beta_t, fit.gamma),
                points: inputs
                    .univariate
                    .iter()
                    .map(|&(t, _)| (t, fit.predict(t)))
                    .collect(),
                line: true,
            });
            report.shifted = Some(fit);
        }
        "WD" | "NA" => {
            let fit = fit_bivariate(&inputs.bivariate).map_err(numerical)?;
            report.bivariate = Some(fit);
            if form == "NA" {
                report.dw2_c =
                    Some(deeptour_core::model::dw2_constant(&deeptour_core::scaling::grid()));
            }
            series.push(Series {
                label: format!("pred e1={:.4} e2={:.4}", fit.exp1, fit.exp2),
                points: inputs
                    .bivariate
                    .iter()
                    .map(|&(x1, x2, _)| (x1, fit.predict(x1, x2)))
                    .collect(),
                line: false,
            });
        }
        _ => unreachable!("validated in fit_rows"),
    }
    if !inputs.univariate.is_empty() {
        series.push(Series {
            label: "data".into(),
            points: inputs.univariate.clone(),
            line: false,
        });
    } else {
        series.push(Series {
            label: "data".into(),
            points: inputs.bivariate.iter().map(|&(x1, _, y)| (x1, y)).collect(),
            line: false,
        });
    }

    let json_path = out.join("fit_report.json");
    std::fs::write(&json_path, to_json(&report)).map_err(validation)?;
    let svg_path = out.join("fit.svg");
    std::fs::write(&svg_path, render_svg(&series, true, true)).map_err(validation)?;
    manifest.push_output(&json_path);
    manifest.push_output(&svg_path);
    manifest.finish_in(out).map_err(validation)?;
    let headline = report
        .power
        .map(|f| format!("alpha={} mape={}", f.alpha, f.mape))
        .or_else(|| report.bivariate.map(|f| format!("e1={} e2={}", f.exp1, f.exp2)))
        .or_else(|| {
            report
                .shifted
                .map(|f| format!("beta={} gamma={}", f.beta_t, f.gamma))
        })
        .unwrap_or_default();
    println!("fit-scaling ok out={} form={form} {headline}", out.display());
    Ok(())
}

fn analyze(
    ckpt: &Path,
    data: &Path,
    report: &str,
    k: usize,
    policy: &str,
    n_train: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let (params, header, instances) = load_labeled(ckpt, data)?;
    let n_train = n_train.unwrap_or(header.n);
    ensure_dir(out)?;
    let mut manifest = RunManifest::start("analyze", 0, &(report, k, policy));
    match report {
        "longsight" => {
            if header.label == LabelKind::None {
                return Err(CliError::Validation(
                    "longsight requires labeled data".into(),
                ));
            }
            let policy = match policy {
                "model" => Policy::Model(&params, n_train),
                "oracle" => Policy::Oracle,
                "nearest" => Policy::NearestAvailable,
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown policy {other} (model|oracle|nearest)"
                    )))
                }
            };
            let rep = long_sightedness(&policy, &instances, k).map_err(validation)?;
            let path = out.join("longsight.csv");
            std::fs::write(&path, rep.to_csv()).map_err(validation)?;
            manifest.push_output(&path);
            manifest.finish_in(out).map_err(validation)?;
            println!(
                "analyze ok out={} report=longsight attempts={}",
                out.display(),
                rep.total_attempts()
            );
        }
        "cosine" | "pca" => {
            let snaps =
                embedding_snapshots(&params, &instances[0], n_train).map_err(validation)?;
            let snap = &snaps[0];
            if report == "cosine" {
                let c = cosine_map(&snap.rows)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                let path = out.join("cosine.csv");
                std::fs::write(&path, matrix_to_csv(&c)).map_err(validation)?;
                manifest.push_output(&path);
                manifest.finish_in(out).map_err(validation)?;
                println!(
                    "analyze ok out={} report=cosine rows={}",
                    out.display(),
                    c.len()
                );
            } else {
                let (proj, vals) =
                    pca2d(&snap.rows).map_err(|e| CliError::Numerical(e.to_string()))?;
                let mut csv = String::from("node,p0,p1,is_optimal_next\n");
                for (node, p) in snap.nodes.iter().zip(&proj) {
                    writeln!(
                        csv,
                        "{node},{},{},{}",
                        p[0],
                        p[1],
                        (*node == snap.optimal_next) as u8
                    )
                    .unwrap();
                }
                let path = out.join("pca.csv");
                std::fs::write(&path, csv).map_err(validation)?;
                #[derive(Serialize)]
                struct PcaMeta {
                    explained_variance: [f64; 2],
                }
                std::fs::write(
                    out.join("pca.json"),
                    to_json(&PcaMeta { explained_variance: vals }),
                )
                .map_err(validation)?;
                manifest.push_output(&path);
                manifest.finish_in(out).map_err(validation)?;
                println!(
                    "analyze ok out={} report=pca var0={} var1={}",
                    out.display(),
                    vals[0],
                    vals[1]
                );
            }
        }
        "flops" => {
            let gflops = flops_per_solution(&params.config, header.n, DecodeStrategy::Greedy)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            #[derive(Serialize)]
            struct FlopsReport {
                depth: usize,
                width: usize,
                n: usize,
                gflops_per_solution: f64,
            }
            let path = out.join("flops.json");
            std::fs::write(
                &path,
                to_json(&FlopsReport {
                    depth: params.config.depth,
                    width: params.config.width,
                    n: header.n,
                    gflops_per_solution: gflops,
                }),
            )
            .map_err(validation)?;
            manifest.push_output(&path);
            manifest.finish_in(out).map_err(validation)?;
            println!(
                "analyze ok out={} report=flops gflops={gflops}",
                out.display()
            );
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown report {other} (longsight|pca|cosine|flops)"
            )))
        }
    }
    Ok(())
}
