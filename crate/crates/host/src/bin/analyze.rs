use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use offload_core::analysis::{
    simulate_mask_attack, simulate_masking_game, sweep_k, tabulate_detection, within_three_sigma, Adversary,
    AttackTrialConfig, SweepOption, DEFAULT_TRIALS,
};
use offload_core::client::detection_failure_probability;
use offload_host::files::{read_model, read_tensor_dir, write_atomic};
use offload_host::report::Table;

/// Evaluates and simulates the security formulas.
#[derive(Debug, Parser)]
#[command(name = "analyze", version)]
struct Args {
    /// Also write the table as CSV plot data.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Options {
    None,
    P,
    C,
    Pc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-value distinguishing game against uniform masks.
    MaskingGame {
        /// Mask scales, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: u64,
        #[arg(long, default_value_t = 0.0)]
        x1: f64,
        #[arg(long, default_value_t = 1.0)]
        x2: f64,
    },
    /// Mask-recovery attack: bounded guessing against random guessing.
    Attack {
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: u64,
        /// Data range as `min,max`.
        #[arg(long, default_value = "0,1", allow_hyphen_values = true)]
        range: String,
    },
    /// Miss probability of partial verification against a cheating worker.
    Detection {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        rounds: Vec<u32>,
        /// Add a Monte Carlo column and flag cells beyond three sigma.
        #[arg(long)]
        simulate: bool,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
    },
    /// Argmax agreement and output error of masked offload per mask scale.
    SweepK {
        #[arg(long)]
        model: PathBuf,
        /// Directory of .vst input tensors.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        options: Options,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000,100000,1000000")]
        k: Vec<f32>,
    },
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let table = match args.command {
        Command::MaskingGame { k, trials, x1, x2 } => masking_game(&k, trials, x1, x2, args.seed)?,
        Command::Attack { k, trials, range } => attack(&k, trials, &range, args.seed)?,
        Command::Detection {
            n,
            alpha,
            beta,
            rounds,
            simulate,
            trials,
        } => detection(&n, &alpha, &beta, &rounds, simulate.then_some(trials), args.seed)?,
        Command::SweepK {
            model,
            corpus,
            options,
            k,
        } => sweep(&model, &corpus, options, &k, args.seed)?,
    };
    print!("{}", table.render());
    if let Some(path) = args.csv {
        write_atomic(&path, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn masking_game(ks: &[f64], trials: u64, x1: f64, x2: f64, seed: u64) -> anyhow::Result<Table> {
    let mut t = Table::new([
        "k",
        "trials",
        "success",
        "stated",
        "exact",
        "stated_3sigma",
        "exact_3sigma",
    ]);
    for &k in ks {
        let r = simulate_masking_game(x1, x2, k, trials, seed, Adversary::Region)?;
        t.push([
            k.to_string(),
            trials.to_string(),
            format!("{:.5}", r.success_rate),
            format!("{:.5}", r.stated_success),
            format!("{:.5}", r.exact_success()),
            within_three_sigma(r.success_rate, r.stated_success, trials).to_string(),
            within_three_sigma(r.success_rate, r.exact_success(), trials).to_string(),
        ]);
    }
    Ok(t)
}

fn parse_range(s: &str) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = s.split_once(',').context("--range expects min,max")?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn attack(ks: &[f64], trials: u64, range: &str, seed: u64) -> anyhow::Result<Table> {
    let (lo, hi) = parse_range(range)?;
    let mut t = Table::new(["k", "trials", "random_baseline", "bounded_guess"]);
    for &k in ks {
        let r = simulate_mask_attack(&AttackTrialConfig::new(lo, hi, k, trials, seed)?);
        t.push([
            k.to_string(),
            trials.to_string(),
            format!("{:.5}", r.random_baseline_error),
            format!("{:.5}", r.bounded_guess_error),
        ]);
    }
    Ok(t)
}

fn detection(
    ns: &[u64],
    alphas: &[f64],
    betas: &[f64],
    rounds: &[u32],
    trials: Option<u64>,
    seed: u64,
) -> anyhow::Result<Table> {
    let Some(trials) = trials else {
        let mut t = Table::new(["n", "alpha", "beta", "rounds", "miss_probability"]);
        for &n in ns {
            for &alpha in alphas {
                for &beta in betas {
                    for &k in rounds {
                        let p = detection_failure_probability(n, alpha, beta, k)?;
                        t.push([
                            n.to_string(),
                            alpha.to_string(),
                            beta.to_string(),
                            k.to_string(),
                            format!("{p:.6}"),
                        ]);
                    }
                }
            }
        }
        return Ok(t);
    };
    let cells = tabulate_detection(ns, alphas, betas, rounds, trials, seed)?;
    let mut t = Table::new([
        "n",
        "alpha",
        "beta",
        "rounds",
        "a",
        "b",
        "closed_form",
        "simulated",
        "flagged",
    ]);
    for c in &cells {
        t.push([
            c.n.to_string(),
            c.alpha.to_string(),
            c.beta.to_string(),
            c.rounds.to_string(),
            c.a.to_string(),
            c.b.to_string(),
            format!("{:.6}", c.closed_form),
            format!("{:.6}", c.simulated),
            c.flagged.to_string(),
        ]);
    }
    Ok(t)
}

fn sweep(model: &Path, corpus: &Path, options: Options, ks: &[f32], seed: u64) -> anyhow::Result<Table> {
    let model = read_model(model)?;
    let inputs: Vec<_> = read_tensor_dir(corpus)?.into_iter().map(|(_, t)| t).collect();
    if inputs.is_empty() {
        bail!("no .vst files in {}", corpus.display());
    }
    let option = match options {
        Options::None => SweepOption::None,
        Options::P => SweepOption::Privacy,
        Options::C => SweepOption::Confidentiality,
        Options::Pc => SweepOption::Both,
    };
    let mut t = Table::new(["k", "option", "agreement", "mean_relative_error"]);
    for row in sweep_k(&model, &inputs, ks, option, seed)? {
        t.push([
            row.k.to_string(),
            row.option.label().to_string(),
            format!("{:.4}", row.agreement),
            format!("{:.3e}", row.mean_relative_error),
        ]);
    }
    Ok(t)
}
