//! `metacl` command line: generate data, run experiments, resume them, and
//! compute metrics from an accuracy matrix.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metacl::bench::config::{preset_blobs, DataSource, ExperimentConfig};
use metacl::bench::metrics::AccuracyMatrix;
use metacl::bench::ssds;
use metacl::bench::stream::gen_synth_blobs;
use metacl::runtime::{write_results, ExperimentState, Method};
use metacl::Error;

#[derive(Parser)]
#[command(name = "metacl", version, about = "Continual semi-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset dataset as an SSDS container plus a matching config.
    GenData {
        #[arg(long, default_value = "blobs8")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the experiment config written next to the data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one method (or all three) over the configured task stream.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        task_aware: bool,
    },
    /// Continue every unfinished experiment found under an output directory.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print A and F for a CSV accuracy matrix (row k holds k entries).
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io { .. } => 3,
        Error::Shape { .. } | Error::Numeric(_) => 1,
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
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metacl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData { preset, out, seed } => gen_data(&preset, &out, seed),
        Command::Run {
            config,
            out,
            seed,
            method,
            task_aware,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if task_aware {
                cfg.eval.task_aware = true;
            }
            let methods = match method {
                Some(m) => vec![m.parse::<Method>()?],
                None => Method::ALL.to_vec(),
            };
            run(&cfg, &methods, &out)
        }
        Command::Resume { out } => resume(&out),
        Command::Metrics { matrix } => {
            let text = std::fs::read_to_string(&matrix).map_err(|e| Error::Data(format!("{}: {e}", matrix.display())))?;
            let m = AccuracyMatrix::parse_csv(&text)?;
            let a = m.step_accuracies();
            let f = m.step_forgetting();
            for (k, (a, f)) in a.iter().zip(&f).enumerate() {
                println!("k={} A_k={a} F_k={f}", k + 1);
            }
            println!("A={}", m.avg_accuracy()?);
            println!("F={}", m.avg_forgetting()?);
            Ok(())
        }
    }
}

fn gen_data(preset: &str, out: &Path, seed: u64) -> Result<(), Error> {
    let (spec, data_seed) = preset_blobs(preset)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = gen_synth_blobs(spec, data_seed)?;
    let file = format!("{preset}.ssds");
    ssds::write_labelled(out.join(&file), &dataset.items, dataset.num_classes)?;
    let mut cfg = ExperimentConfig::blobs8(seed, 50);
    cfg.data.source = DataSource::File { path: PathBuf::from(&file) };
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    println!("wrote {} items to {} and {}", dataset.len(), out.join(&file).display(), cfg_path.display());
    Ok(())
}

fn run(cfg: &ExperimentConfig, methods: &[Method], out: &Path) -> Result<(), Error> {
    let stream = cfg.build_stream()?;
    let mut states = Vec::new();
    for &m in methods {
        let dir = out.join(m.name());
        let mut state = ExperimentState::new(cfg.clone(), m, &stream)?;
        state.run_to_end(&stream, Some(&dir))?;
        report(&state);
        states.push(state);
    }
    write_results(&out.join("results.csv"), &states.iter().collect::<Vec<_>>())
}

fn resume(out: &Path) -> Result<(), Error> {
    let mut states = Vec::new();
    for m in Method::ALL {
        let dir = out.join(m.name());
        if !dir.join(metacl::runtime::experiment::STATE_FILE).exists() {
            continue;
        }
        let (mut state, stream) = ExperimentState::load(&dir)?;
        state.run_to_end(&stream, Some(&dir))?;
        report(&state);
        states.push(state);
    }
    if states.is_empty() {
        return Err(Error::Config(format!("no saved experiment under {}", out.display())));
    }
    write_results(&out.join("results.csv"), &states.iter().collect::<Vec<_>>())
}

fn report(state: &ExperimentState) {
    if let (Ok(a), Ok(f)) = (state.matrix.avg_accuracy(), state.matrix.avg_forgetting()) {
        println!("{}: A={:.4} F={:.4}", state.method, a, f);
    }
}
