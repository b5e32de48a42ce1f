use std::net::TcpListener;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use offload_core::worker::{Behavior, Worker, DEFAULT_CAPACITY};
use offload_host::server::{WorkerServer, WorkerStore};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BehaviorArg {
    Honest,
    Cheat,
    /// Commit honestly, then alter opened values.
    Tamper,
}

/// Untrusted inference worker.
#[derive(Debug, Parser)]
#[command(name = "worker", version)]
struct Args {
    /// Bind address; port 0 picks a free port.
    #[arg(long, env = "OFFLOAD_WORKER_LISTEN", default_value = "127.0.0.1:7070")]
    listen: String,
    /// Directory for stored models and per-inference records.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "honest")]
    behavior: BehaviorArg,
    /// Fraction of units corrupted by a cheating worker.
    #[arg(long, default_value_t = 0.1)]
    cheat_beta: f64,
    /// Layer whose output a cheating worker corrupts.
    #[arg(long, default_value_t = 0)]
    cheat_layer: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Records kept before the least recently used is evicted.
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let behavior = match args.behavior {
        BehaviorArg::Honest => Behavior::Honest,
        BehaviorArg::Tamper => Behavior::TamperOpenings,
        BehaviorArg::Cheat => {
            if !(0.0..=1.0).contains(&args.cheat_beta) {
                bail!("--cheat-beta must lie in [0, 1], got {}", args.cheat_beta);
            }
            Behavior::Cheat {
                beta: args.cheat_beta,
                target_layer: args.cheat_layer,
                seed: args.seed,
            }
        }
    };
    if args.capacity == 0 {
        bail!("--capacity must be at least 1");
    }
    let store = args
        .store
        .as_deref()
        .map(WorkerStore::open)
        .transpose()
        .context("opening store")?;
    let server = WorkerServer::new(Worker::new(behavior, args.capacity), store).context("loading store")?;
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    server.serve(listener)?;
    Ok(())
}
