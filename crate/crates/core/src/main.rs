//! Command-line front end: corpus generation, tokenizer training, scenario
//! runs, ablation sweeps, and report re-emission.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error. The
//! `XVSPD_OUT_DIR` environment variable sets the default output root.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xvspd::adapt::LambdaMode;
use xvspd::cache::EvictionPolicy;
use xvspd::corpus::{gen_corpus, CorpusSpec};
use xvspd::harness::{
    report_emit, run_scenario, sweep, AxisValue, RunReport, ScenarioConfig,
};
use xvspd::tokenizer::Tokenizer;
use xvspd::Error;

#[derive(Parser)]
#[command(name = "xvspd", version, about = "Cross-vocabulary speculative decoding harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Material {
    Drafter,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    K,
    Gamma,
    Lambda,
    CachePolicy,
    CacheCapacity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file and write it as JSON.
    GenCorpus {
        /// Corpus spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output file; defaults to corpus.json under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a BPE tokenizer on a corpus spec's training material.
    TrainTokenizer {
        /// Corpus spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        merges: usize,
        /// Which training material to use: the drafter sees merge-rich
        /// words only as halves, the target sees them whole.
        #[arg(long, value_enum, default_value = "target")]
        material: Material,
        /// Output file; defaults to tokenizer.json under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one streaming scenario and emit CSV/JSON artifacts.
    Run {
        /// Scenario config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one scenario across several values of an ablation axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values. k: "3,4"; gamma: "0.3,0.7";
        /// lambda: "fixed:0.2,dynamic,approx_kl"; cache-policy:
        /// "lru,lfu"; cache-capacity: "full,16,32".
        #[arg(long)]
        values: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-emit CSV and histogram artifacts from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os("XVSPD_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn parse_values(axis: Axis, raw: &str) -> Result<Vec<AxisValue>, Error> {
    let bad = |v: &str| Error::InvalidConfig(format!("bad axis value {v:?}"));
    raw.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| match axis {
            Axis::K => v.parse().map(AxisValue::K).map_err(|_| bad(v)),
            Axis::Gamma => v.parse().map(AxisValue::Gamma).map_err(|_| bad(v)),
            Axis::Lambda => match v {
                "dynamic" => Ok(AxisValue::Lambda(LambdaMode::DynamicTargetProb)),
                "approx_kl" => Ok(AxisValue::Lambda(LambdaMode::ApproxKl)),
                _ => v
                    .strip_prefix("fixed:")
                    .and_then(|x| x.parse().ok())
                    .map(|x| AxisValue::Lambda(LambdaMode::Fixed(x)))
                    .ok_or_else(|| bad(v)),
            },
            Axis::CachePolicy => match v {
                "lru" => Ok(AxisValue::CachePolicy(EvictionPolicy::Lru)),
                "lfu" => Ok(AxisValue::CachePolicy(EvictionPolicy::Lfu)),
                _ => Err(bad(v)),
            },
            Axis::CacheCapacity => match v {
                "full" => Ok(AxisValue::CacheCapacity(None)),
                _ => v.parse().map(|c| AxisValue::CacheCapacity(Some(c))).map_err(|_| bad(v)),
            },
        })
        .collect()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn print_summary(report: &RunReport) {
    match &report.aggregates {
        Some(a) => println!(
            "samples={} acceptance_rate={:.6} speedup={:.6} avg_ngram_hit={:.6} cache_size={}",
            report.rows.len(),
            a.acceptance_rate,
            a.speedup,
            a.avg_ngram_hit,
            a.final_cache_size
        ),
        None => println!("samples=0 (empty stream)"),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let spec: CorpusSpec = load_json(&spec)?;
            let corpus = gen_corpus(&spec)?;
            let out = out.unwrap_or_else(|| out_root().join("corpus.json"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, serde_json::to_string_pretty(&corpus)?)?;
            println!("wrote {} ({} train / {} test sentences)", out.display(), corpus.train.len(), corpus.test.len());
        }
        Command::TrainTokenizer { spec, merges, material, out } => {
            let spec: CorpusSpec = load_json(&spec)?;
            let corpus = gen_corpus(&spec)?;
            let strings = match material {
                Material::Drafter => &corpus.drafter_material,
                Material::Target => &corpus.target_material,
            };
            let tok = Tokenizer::train_bpe(strings, merges)?;
            let out = out.unwrap_or_else(|| out_root().join("tokenizer.json"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            tok.save(&out)?;
            println!("wrote {} (vocab size {})", out.display(), tok.vocab_size());
        }
        Command::Run { config, out_dir } => {
            let mut cfg: ScenarioConfig = load_json(&config)?;
            cfg.out_dir = out_dir.or(cfg.out_dir).or_else(|| Some(out_root().join("run")));
            let report = run_scenario(&cfg)?;
            print_summary(&report);
        }
        Command::Sweep { config, axis, values, out_dir } => {
            let mut cfg: ScenarioConfig = load_json(&config)?;
            cfg.out_dir = out_dir.or(cfg.out_dir).or_else(|| Some(out_root().join("sweep")));
            let values = parse_values(axis, &values)?;
            if values.is_empty() {
                return Err(Error::InvalidConfig("no axis values given".into()));
            }
            let reports = sweep(&cfg, &values)?;
            for (v, report) in values.iter().zip(&reports) {
                print!("{v:?}: ");
                print_summary(report);
            }
        }
        Command::Report { input, out_dir } => {
            let report: RunReport = load_json(&input)?;
            let dir = out_dir.unwrap_or_else(|| out_root().join("report"));
            let files = report_emit(&report, &dir)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
