use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use parapath::data::{generate_synthetic, load_pairs, save_pairs, tokenize_pairs, PairRecord, RetrievalSet, SynthSpec};
use parapath::eval::{
    default_sweep_grid, evaluate, op_count, path_similarity_trace, probe_inputs, run_sweep,
    single_prefix_overhead_percent, sweep_csv, InferenceMode, PROBE_COUNT,
};
use parapath::trainer::{fit, load_checkpoint, save_checkpoint, write_metrics_csv, Hooks, TrainConfig, TrainState};
use parapath::{Error, Result};

#[derive(Parser)]
#[command(name = "parapath", version, about = "Train and evaluate prefix-forked parallel embedding paths")]
struct Cli {
    /// Overrides the seed of the config or spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train) or file (eval, trace, sweep).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "single_prefix")]
    SinglePrefix,
    Aggregate,
    #[value(name = "no_prefix")]
    NoPrefix,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::SinglePrefix => InferenceMode::SINGLE,
            Mode::Aggregate => InferenceMode::Aggregate,
            Mode::NoPrefix => InferenceMode::NoPrefix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config file.
    Train { config: PathBuf },
    /// Precision@1 of a checkpoint on a JSON Lines pair file.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "single_prefix")]
        mode: Mode,
    },
    /// Mean pairwise path cosine over probe queries of a dataset.
    Trace { checkpoint: PathBuf, dataset: PathBuf },
    /// Generate a synthetic corpus from a JSON spec.
    GenData {
        spec: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Multiply-add counts of one encode for each inference mode.
    Opcount {
        config: PathBuf,
        /// Sequence length; defaults to max_len.
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Train and score every point of the N x K x lambda_mim grid.
    Sweep { config: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// Training records and a held-out retrieval set.
fn training_data(config: &TrainConfig) -> Result<(Vec<PairRecord>, RetrievalSet)> {
    match &config.dataset {
        Some(path) => {
            let records = load_pairs(Path::new(path))?;
            let set = RetrievalSet::from_records(&records)?;
            Ok((records, set))
        }
        None => {
            let corpus = generate_synthetic(&SynthSpec::default())?;
            Ok((corpus.train(), RetrievalSet::from_records(&corpus.eval())?))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config_path, seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let (records, held_out) = training_data(&config)?;
    let data = tokenize_pairs(&records, &config.model().vocab())?;
    let probes = probe_inputs(&held_out, &config.model(), PROBE_COUNT, config.seed)?;
    let mut state = TrainState::new(config.clone())?;

    let mut trace = String::from("step,path_cosine_mean\n");
    let mut on_eval = |step: usize, st: &TrainState| -> Result<()> {
        if st.config.num_paths > 1 {
            trace.push_str(&format!("{step},{}\n", path_similarity_trace(&st.model, &probes)?));
        }
        Ok(())
    };
    let total = config.total_steps;
    let dir = out.clone();
    let mut on_checkpoint = |step: usize, st: &TrainState| -> Result<()> {
        let name = if step == total { "checkpoint.bin".to_string() } else { format!("checkpoint-{step}.bin") };
        save_checkpoint(st, &dir.join(name))
    };
    let hooks = Hooks { on_eval: Some(&mut on_eval), on_checkpoint: Some(&mut on_checkpoint) };
    let metrics = fit(&mut state, &data, hooks)?;
    write_metrics_csv(&metrics, &out.join("metrics.csv"))?;
    if config.eval_every > 0 {
        write(&out.join("trace.csv"), &trace)?;
    }
    if let Some(last) = metrics.last() {
        println!("step {} loss_total {:.6}", last.step, last.loss.total);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => train(&config, cli.seed, cli.out),
        Command::Eval { checkpoint, dataset, mode } => {
            let state = load_checkpoint(&checkpoint)?;
            let set = RetrievalSet::from_records(&load_pairs(&dataset)?)?;
            let report = evaluate(&state.model, &set, mode.into(), cli.seed.unwrap_or(state.config.seed))?;
            print!("{}", report.to_text());
            println!("{}", report.to_json());
            if let Some(out) = cli.out {
                write(&out, &report.to_json())?;
            }
            Ok(())
        }
        Command::Trace { checkpoint, dataset } => {
            let state = load_checkpoint(&checkpoint)?;
            let set = RetrievalSet::from_records(&load_pairs(&dataset)?)?;
            let seed = cli.seed.unwrap_or(state.config.seed);
            let probes = probe_inputs(&set, &state.model.config, PROBE_COUNT, seed)?;
            let value = path_similarity_trace(&state.model, &probes)?;
            println!("path_cosine_mean {value}");
            if let Some(out) = cli.out {
                write(&out, &format!("step,path_cosine_mean\n{},{value}\n", state.step))?;
            }
            Ok(())
        }
        Command::GenData { spec, output, split } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let mut spec = SynthSpec::from_json(&text)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let corpus = generate_synthetic(&spec)?;
            let records = match split {
                Split::All => corpus.records.clone(),
                Split::Train => corpus.train(),
                Split::Eval => corpus.eval(),
            };
            save_pairs(&records, &output)?;
            println!("wrote {} records to {}", records.len(), output.display());
            Ok(())
        }
        Command::Opcount { config, seq_len } => {
            let model = load_config(&config, cli.seed)?.model();
            let len = seq_len.unwrap_or(model.max_len);
            for mode in [InferenceMode::NoPrefix, InferenceMode::SINGLE, InferenceMode::Aggregate] {
                println!("{:<14}{}", mode.name(), op_count(&model, mode, len));
            }
            println!("single_prefix overhead {:.4}%", single_prefix_overhead_percent(&model, len));
            Ok(())
        }
        Command::Sweep { config } => {
            let config = load_config(&config, cli.seed)?;
            let (records, held_out) = training_data(&config)?;
            let data = tokenize_pairs(&records, &config.model().vocab())?;
            let rows = run_sweep(&config, &default_sweep_grid(), &data, &held_out)?;
            let csv = sweep_csv(&rows);
            match cli.out {
                Some(out) => write(&out, &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
