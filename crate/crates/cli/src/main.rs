use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use ptss::checkpoint::{load_checkpoint, save_checkpoint};
use ptss::data::{load_dataset, parse_series, write_dataset, GranularitySpec, Split};
use ptss::exec::Execution;
use ptss::network::ModelConfig;
use ptss::prompt::PromptSet;
use ptss::session::{evaluate, predict_series};
use ptss::synth::{synthesize_dataset, SynthSpec};
use ptss::trainer::{config_for, fit_with, prepare_data, TrainConfig};
use ptss_server::{router, AppState, Limits};

#[derive(Parser)]
#[command(name = "ptss", version, about = "Prompt-guided multi-granularity time series segmentation")]
struct Cli {
    /// Run data-parallel work on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus a JSONL report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides the seed of the training config.
        #[arg(long)]
        seed: Option<u64>,
        /// Zero the checkpoint timestamp.
        #[arg(long)]
        deterministic: bool,
    },
    /// Score a checkpoint on a dataset split under simulated prompts.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// One or more comma-separated fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        prompt_fraction: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Segment one series CSV; writes `t,state,level,confidence` rows.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// JSON array of prompts on the series timeline.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Window stride; defaults to half the window.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Dataset manifest offered to clients as `demo`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        model_id: String,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ptss::Error>() {
            use ptss::Error as E;
            return match e {
                E::InvalidSpec(_) | E::FactorTooLarge { .. } => 2,
                E::EmptyDataset(_) | E::DegenerateSplit(_) | E::WindowTooLong { .. } => 3,
                E::NonFiniteLoss { .. } => 4,
                E::CorruptCheckpoint(_) | E::VersionMismatch(_) => 5,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                return 6;
            }
        }
    }
    1
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let spec: SynthSpec = fs::read_to_string(spec)
        .map_err(|e| ptss::Error::InvalidSpec(format!("{}: {e}", spec.display())))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| ptss::Error::InvalidSpec(e.to_string())))?;
    let ds = synthesize_dataset(&spec, seed)?;
    let manifest = write_dataset(&ds, out)?;
    println!("{}", json!({"manifest": manifest, "series": ds.series.len(), "levels": ds.spec.levels}));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
    seed: Option<u64>,
    deterministic: bool,
    exec: Execution,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let base: ModelConfig = model_config.map(read_json).transpose()?.unwrap_or_default();
    let mut tc: TrainConfig = train_config.map(read_json).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        tc.seed = s;
    }
    let prepared = prepare_data(&dataset, base.window, tc.window_stride)?;
    let mc = config_for(&base, &dataset, &prepared.stats);
    log::info!(
        "training on {} windows, validating on {}",
        prepared.train.len(),
        prepared.val.len()
    );
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.jsonl");
        PathBuf::from(p)
    });
    let mut report_file = fs::File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
    let mut write_err = None;
    let outcome = fit_with(&prepared.train, &prepared.val, &mc, &tc, exec, |rec| {
        let line = serde_json::to_string(rec).expect("serializable record");
        if let Err(e) = writeln!(report_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing report");
    }
    save_checkpoint(&outcome.params, out, deterministic)?;
    let best = outcome.report.best();
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "report": report_path,
            "epochs": outcome.report.epochs.len(),
            "best_epoch": outcome.report.best_epoch,
            "val_loss": best.val_loss,
            "val_accuracy": best.val_accuracy,
        })
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(json!(s)).with_context(|| format!("unknown split `{s}` (train, validation, test)"))
}

fn eval(data: &Path, ckpt: &Path, fractions: &[f64], seed: u64, split: &str, exec: Execution) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    let split = parse_split(split)?;
    for &f in fractions {
        anyhow::ensure!((0.0..=1.0).contains(&f), "prompt fraction {f} outside [0, 1]");
        let ev = evaluate(&params, &dataset, split, f, seed, exec)?;
        println!("{}", serde_json::to_string(&ev)?);
    }
    Ok(())
}

fn predict(ckpt: &Path, input: &Path, prompts: Option<&Path>, stride: Option<usize>, out: Option<&Path>, exec: Execution) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let labeled = text.lines().next().unwrap_or_default().split(',').any(|c| c.trim() == "y0");
    let spec = GranularitySpec {
        levels: if labeled { params.config.levels.clone() } else { Vec::new() },
    };
    let series = parse_series("input", &text, &spec)?;
    let mut set = PromptSet::new();
    if let Some(p) = prompts {
        let list: Vec<ptss::prompt::Prompt> = read_json(p)?;
        for prompt in list {
            set.insert(prompt);
        }
    }
    let stride = stride.unwrap_or((params.config.window / 2).max(1));
    let res = predict_series(&params, &series, &set, stride, exec)?;
    let gs = GranularitySpec {
        levels: params.config.levels.clone(),
    };
    let mut csv = String::from("t,state,level,confidence\n");
    for (t, (&s, row)) in res.states.iter().zip(res.probs.rows()).enumerate() {
        let level = gs.level_of(s).map(|(g, _)| gs.levels[g].name.clone()).unwrap_or_default();
        csv.push_str(&format!("{t},{s},{level},{:.6}\n", row[s]));
    }
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn serve(ckpt: &Path, addr: SocketAddr, ui_dir: Option<PathBuf>, data: Option<&Path>, model_id: String, exec: Execution) -> Result<()> {
    let params = load_checkpoint(ckpt)?;
    let mut state = AppState::new(Limits::default());
    state.exec = exec;
    state.add_model(model_id, params)?;
    if let Some(d) = data {
        state.add_dataset("demo", load_dataset(d)?);
    }
    let app = router(Arc::new(state), ui_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        ptss_server::serve(listener, app).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Synth { spec, out, seed } => synth(&spec, &out, seed),
        Command::Train {
            data,
            model_config,
            train_config,
            out,
            report,
            seed,
            deterministic,
        } => train(
            &data,
            model_config.as_deref(),
            train_config.as_deref(),
            &out,
            report.as_deref(),
            seed,
            deterministic,
            exec,
        ),
        Command::Eval {
            data,
            ckpt,
            prompt_fraction,
            seed,
            split,
        } => eval(&data, &ckpt, &prompt_fraction, seed, &split, exec),
        Command::Predict {
            ckpt,
            input,
            prompts,
            stride,
            out,
        } => predict(&ckpt, &input, prompts.as_deref(), stride, out.as_deref(), exec),
        Command::Serve {
            ckpt,
            addr,
            ui_dir,
            data,
            model_id,
        } => serve(&ckpt, addr, ui_dir, data.as_deref(), model_id, exec),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PTSS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
