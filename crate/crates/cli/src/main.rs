use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmao_core::ctc::{ctc_brute_force, ctc_loss, LabelSeq};
use dmao_core::harness::{
    encoder_gradcheck, evaluate, load_checkpoint, read_manifest, report_distribution, run_training, TrainConfig,
};
use dmao_core::tensor::{Init, Tape, Tensor};
use dmao_core::{Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "dmao", version, about = "Grow-and-drop architecture adaptation lab for a CTC encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model, data and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "dmao-run")]
        out: PathBuf,
        /// Held-out utterances scored after training (0 skips evaluation).
        #[arg(long, default_value_t = 200)]
        eval_n: usize,
    },
    /// Greedy label error rate of a checkpoint on held-out synthetic data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Per-module parameter ratio between two checkpoints, as TSV.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Finite-difference check of the encoder + CTC gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compares the CTC loss with exhaustive path enumeration on random scores.
    CtcOracle {
        #[arg(long)]
        t: usize,
        /// Number of non-blank symbols.
        #[arg(long)]
        vocab: usize,
        /// Comma-separated labels in 1..=vocab; empty for the blank-only target.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        labels: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_labels(text: &str, vocab: usize) -> Result<LabelSeq> {
    let symbols = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad label {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = symbols.iter().find(|&&s| s > vocab) {
        return Err(Error::InvalidInput(format!("label {bad} outside 1..={vocab}")));
    }
    LabelSeq::new(symbols)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out, eval_n } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.reseed(seed);
            }
            let summary = run_training(&cfg, &out)?;
            for r in &summary.surgeries {
                println!(
                    "surgery step={} dropped={} ({} params) grown={} ({} params)",
                    r.step,
                    r.dropped.len(),
                    r.dropped_params(),
                    r.grown.len(),
                    r.grown_params()
                );
            }
            println!("group_params {} -> {}", summary.initial_params, summary.final_params);
            println!("final_loss={}", summary.losses.last().copied().unwrap_or(f64::NAN));
            if eval_n > 0 {
                let ckpt = load_checkpoint(&summary.final_checkpoint())?;
                println!("ler={:.4}", evaluate(&ckpt.model, eval_n, &ckpt.config.data, 0)?);
            }
            println!("artifacts in {}", out.display());
            Ok(true)
        }
        Command::Eval { checkpoint, n, eval_seed } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            info!("checkpoint at step {}", ckpt.state.step);
            println!("ler={:.4}", evaluate(&ckpt.model, n, &ckpt.config.data, eval_seed)?);
            Ok(true)
        }
        Command::Report { before, after } => {
            let report = report_distribution(&read_manifest(&before)?, &read_manifest(&after)?)?;
            print!("{}", report.to_tsv());
            Ok(true)
        }
        Command::Gradcheck { config, probes, seed } => {
            let cfg = TrainConfig::load(&config)?;
            let mut ok = true;
            for scaled in [false, true] {
                let (points, report) = encoder_gradcheck(&cfg.model, &cfg.data, probes, seed, scaled, 1e-4)?;
                println!(
                    "{} scaled={scaled} probes={} max_rel_err={:.3e} worst={}",
                    if report.passed() { "PASS" } else { "FAIL" },
                    report.checked,
                    report.max_rel_err,
                    points.get(report.worst_index).map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default()
                );
                ok &= report.passed();
            }
            Ok(ok)
        }
        Command::CtcOracle { t, vocab, labels, seed } => {
            let labels = parse_labels(&labels, vocab)?;
            let logits = Tensor::<f64>::alloc(&[t, vocab + 1], Init::Normal { mean: 0.0, std: 1.0, seed })?;
            let mut tape = Tape::new();
            let x = tape.constant(logits)?;
            let lp = tape.log_softmax(x)?;
            let log_probs = tape.value(lp).clone();
            let fast = ctc_loss(&log_probs, &labels)?;
            let exact = ctc_brute_force(&log_probs, &labels)?;
            let diff = (fast - exact).abs();
            println!("ctc_loss={fast:.12} brute_force={exact:.12} abs_diff={diff:.3e}");
            Ok(diff < 1e-9)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
