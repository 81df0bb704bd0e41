use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Map};

use aad_core::dataset::write_dataset;
use aad_core::experiment::{
    configure_jobs, report_from_results, run_experiment, run_trf_analysis, stats_from_results, Algorithm,
    ExperimentConfig,
};
use aad_core::features::{extract, FeatureKind};
use aad_core::io::{file_digest, read_wav_mono, write_signal};
use aad_core::synth::{gen_dataset, SynthConfig, SynthTruth};
use aad_core::Result;

#[derive(Parser)]
#[command(name = "aad", version, about = "Auditory attention decoding from ear-EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a 64 Hz speech feature from a WAV file.
    Features {
        audio: PathBuf,
        #[arg(long, default_value = "envelope")]
        kind: FeatureKind,
        /// Output payload; defaults to <audio>.<kind>.f32
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a planted TRF.
    Synth {
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with further generator settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// seconds per trial
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        gain_ignored: Option<f64>,
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Cross-validated TRFs and cluster permutation tests.
    Trf {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Nested cross-validated decoding over segment lengths.
    Decode {
        dataset: PathBuf,
        /// Overrides the config's algorithm list
        #[arg(long)]
        algo: Vec<Algorithm>,
        /// Overrides the config's feature list
        #[arg(long)]
        feature: Vec<FeatureKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-participant marker t-tests from a results directory.
    Stats {
        results: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Mean accuracy table from a results directory.
    Report { results: PathBuf },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_jobs();
    match cli.command {
        Command::Features { audio, kind, out } => {
            let signal = read_wav_mono(&audio)?;
            let feature = extract(&signal, kind)?;
            let out = out.unwrap_or_else(|| audio.with_extension(format!("{}.f32", kind.as_str())));
            let mut extra = Map::new();
            extra.insert("kind".into(), json!(kind.as_str()));
            extra.insert("source".into(), json!(audio.display().to_string()));
            extra.insert("source_sha256".into(), json!(file_digest(&audio)?));
            write_signal(&out, kind.as_str(), &feature.signal, extra)?;
            println!("{}", out.display());
        }
        Command::Synth { participants, seed, out, config, trials, duration, gain_ignored, snr_db } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| aad_core::AadError::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| aad_core::AadError::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(v) = participants {
                cfg.participants = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = trials {
                cfg.trials = v;
            }
            if let Some(v) = duration {
                cfg.duration = v;
            }
            if let Some(v) = gain_ignored {
                cfg.gain_ignored = v;
            }
            if let Some(v) = snr_db {
                cfg.snr_db = v;
            }
            cfg.validate()?;
            let dataset = gen_dataset(&cfg)?;
            write_dataset(&out, &dataset)?;
            let truth = SynthTruth::new(&cfg)?;
            fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
            println!("{} participants written to {}", dataset.participants.len(), out.display());
        }
        Command::Trf { dataset, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.dataset = dataset;
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_trf_analysis(&cfg)?;
            for t in &report.tests {
                println!(
                    "{:<9} {:<10} {:<6} clusters={} min_p={}{}",
                    t.feature.as_str(),
                    t.role.as_str(),
                    t.channel,
                    t.result.clusters.len(),
                    t.result.min_p().map_or("-".to_string(), |p| format!("{p:.4}")),
                    if t.significant { "  *" } else { "" }
                );
            }
        }
        Command::Decode { dataset, algo, feature, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.dataset = dataset;
            if !algo.is_empty() {
                cfg.algorithms = algo;
            }
            if !feature.is_empty() {
                cfg.features = feature;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            run_experiment(&cfg)?;
            print!("{}", report_from_results(&cfg.out)?);
        }
        Command::Stats { results, alpha } => {
            let stats = stats_from_results(&results, alpha)?;
            fs::write(results.join("marker_stats.json"), serde_json::to_string_pretty(&stats)?)?;
            for s in &stats {
                println!(
                    "{:<6} {:<7} {:<9} t={:>7.3} p={:.2e} {}",
                    s.participant,
                    s.algorithm.as_str(),
                    s.feature.as_str(),
                    s.t,
                    s.p,
                    if s.significant { "significant" } else { "n.s." }
                );
            }
        }
        Command::Report { results } => print!("{}", report_from_results(&results)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aad: {e}");
            ExitCode::FAILURE
        }
    }
}
