use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use offload_core::client::{
    layer_input_ranges, select_verification, verify_layered, Client, Evidence, OffloadMode, OffloadPlan, Verdict,
    VerificationStatus,
};
use offload_core::rng::DetRng;
use offload_core::{ModelSpec, Tensor};
use offload_host::files::{read_model, read_tensor, read_tensor_dir, write_tensor};
use offload_host::net::{connect, TcpSession};
use offload_host::report::Table;
use offload_host::state::{ClientConfig, StateDir};

/// Offloading client: sets up workers, runs inferences and verifies them.
#[derive(Debug, Parser)]
#[command(name = "client", version)]
struct Args {
    /// State directory holding the model, masks and inference records.
    #[arg(long, env = "OFFLOAD_CLIENT_STATE", default_value = "client-state", global = true)]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Holistic,
    Layered,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Installs the model (or its weight shares) on the workers.
    Setup {
        #[arg(long)]
        model: PathBuf,
        /// One address, or two comma-separated when confidentiality is on.
        #[arg(long, value_delimiter = ',', required = true)]
        workers: Vec<String>,
        /// Mask inputs of offloaded layers with this mask scale.
        #[arg(long)]
        privacy_k: Option<f32>,
        /// Split offloaded weights into two shares with this mask scale.
        #[arg(long)]
        confidentiality_k: Option<f32>,
        /// Masks precomputed per offloaded layer.
        #[arg(long, default_value_t = 64)]
        masks: usize,
        /// Tensor files used to size the masks; random inputs otherwise.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Offloads one inference and stores its record.
    Infer {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        verify_ratio: f32,
        /// Also write the output tensor here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Checks a fraction of a stored inference.
    Verify {
        #[arg(long)]
        inference: u64,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Lists stored records and their verification status.
    Records,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let state = StateDir::new(&args.state);
    let result = match args.command {
        Command::Setup {
            model,
            workers,
            privacy_k,
            confidentiality_k,
            masks,
            calibration,
            seed,
        } => setup(
            &state,
            &model,
            workers,
            privacy_k,
            confidentiality_k,
            masks,
            calibration.as_deref(),
            seed,
        ),
        Command::Infer {
            mode,
            input,
            verify_ratio,
            output,
        } => infer(&state, mode, &input, verify_ratio, output.as_deref()),
        Command::Verify {
            inference,
            fraction,
            seed,
        } => verify(&state, inference, fraction, seed),
        Command::Records => records(&state),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn plan_for(model: &ModelSpec, mode: Mode, ratio: f32, config: &ClientConfig) -> OffloadPlan {
    let mut plan = match mode {
        Mode::Holistic => OffloadPlan::holistic(ratio),
        Mode::Layered => OffloadPlan::layered(model, ratio),
    };
    plan.privacy = config.privacy;
    plan.confidentiality = config.confidentiality;
    plan
}

fn connect_all(addrs: &[String]) -> anyhow::Result<Vec<TcpSession>> {
    addrs
        .iter()
        .map(|a| connect(a.as_str()).with_context(|| format!("connecting to worker {a}")))
        .collect()
}

fn calibration_inputs(model: &ModelSpec, dir: Option<&Path>, seed: u64) -> anyhow::Result<Vec<Tensor>> {
    if let Some(dir) = dir {
        let samples: Vec<Tensor> = read_tensor_dir(dir)?.into_iter().map(|(_, t)| t).collect();
        if samples.is_empty() {
            bail!("no .vst files in {}", dir.display());
        }
        return Ok(samples);
    }
    let shape = model.input_shape().clone();
    let mut rng = DetRng::stream(seed, 0xca1);
    Ok((0..32)
        .map(|_| {
            let data = (0..shape.len()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            Tensor::new(shape.clone(), data).expect("shape matches data")
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn setup(
    state: &StateDir,
    model_path: &Path,
    workers: Vec<String>,
    privacy: Option<f32>,
    confidentiality: Option<f32>,
    masks: usize,
    calibration: Option<&Path>,
    seed: u64,
) -> anyhow::Result<ExitCode> {
    let model = read_model(model_path)?;
    let config = ClientConfig {
        workers,
        privacy,
        confidentiality,
        next_id: 1,
        seed,
    };
    let mode = if privacy.is_some() || confidentiality.is_some() {
        Mode::Layered
    } else {
        Mode::Holistic
    };
    let plan = plan_for(&model, mode, 1.0, &config);
    plan.validate(&model, config.workers.len())?;
    let mut client = Client::new(model.clone(), plan, connect_all(&config.workers)?)?;
    client.setup(seed)?;
    state.clear_masks()?;
    if privacy.is_some() {
        let samples = calibration_inputs(&model, calibration, seed)?;
        client.prepare_masks(masks, &layer_input_ranges(&model, &samples)?, seed)?;
        for set in client.masks().values() {
            state.save_masks(set)?;
        }
    }
    state.save_model(&model)?;
    state.save_config(&config)?;
    println!(
        "set up {} worker(s) for a {}-layer model in {}",
        config.workers.len(),
        model.len(),
        state.dir().display()
    );
    Ok(ExitCode::SUCCESS)
}

fn infer(state: &StateDir, mode: Mode, input: &Path, ratio: f32, output: Option<&Path>) -> anyhow::Result<ExitCode> {
    let mut config = state.load_config().context("run `client setup` first")?;
    let model = state.load_model()?;
    let x = read_tensor(input)?;
    let plan = plan_for(&model, mode, ratio, &config);
    plan.validate(&model, config.workers.len())?;
    let addrs = &config.workers[..plan.workers_required()];
    let mut client = Client::new(model, plan, connect_all(addrs)?)?;
    client.set_next_id(config.next_id);
    for set in state.load_masks()? {
        client.install_masks(set);
    }
    let result = client.offload_infer(&x);
    // Ids and masks are spent even when the call fails part way.
    config.next_id = client.next_id();
    state.save_config(&config)?;
    for set in client.masks().values() {
        state.save_masks(set)?;
    }
    let (y, record) = result?;
    state.save_record(&record)?;
    if let Some(path) = output {
        write_tensor(path, &y)?;
    }
    println!("inference {}", record.inference_id);
    println!("argmax {}", y.argmax());
    println!("output {:?}", y.data());
    Ok(ExitCode::SUCCESS)
}

fn verify(state: &StateDir, id: u64, fraction: f64, seed: u64) -> anyhow::Result<ExitCode> {
    let config = state.load_config()?;
    let model = state.load_model()?;
    let mut record = state.load_record(id)?;
    let verdict = match record.mode {
        OffloadMode::Layered => {
            let selection = select_verification(&model, &record, fraction, seed)?;
            verify_layered(&model, &record, &selection)?
        }
        OffloadMode::Holistic => {
            let worker = config.workers.first().context("no worker configured")?;
            let links = connect_all(std::slice::from_ref(worker))?;
            let mut client = Client::new(model, OffloadPlan::holistic(record.verify_ratio), links)?;
            client.verify(&record, fraction, seed)?
        }
    };
    record.status = match &verdict {
        Verdict::Passed { .. } => VerificationStatus::Passed { fraction },
        Verdict::Failed(e) => VerificationStatus::Failed(e.clone()),
    };
    state.save_record(&record)?;
    match verdict {
        Verdict::Passed { units_checked } => {
            println!("inference {id}: passed ({units_checked} units checked)");
            Ok(ExitCode::SUCCESS)
        }
        Verdict::Failed(e) => {
            println!("inference {id}: FAILED, {}", describe(&e));
            Ok(ExitCode::from(2))
        }
    }
}

fn describe(e: &Evidence) -> String {
    match e {
        Evidence::WrongInference { expected, got } => format!("proof answers inference {got}, expected {expected}"),
        Evidence::Malformed(why) => format!("malformed proof: {why}"),
        Evidence::Proof => "openings do not match the commit".into(),
        Evidence::MissingUnit { intermediate, unit } => {
            format!("unit {unit} of intermediate {intermediate} not opened")
        }
        Evidence::Recompute { intermediate, unit } => {
            format!("recomputation mismatch in unit {unit} of intermediate {intermediate}")
        }
        Evidence::OutputMismatch { unit } => format!("opened output unit {unit} differs from the returned output"),
    }
}

fn records(state: &StateDir) -> anyhow::Result<ExitCode> {
    let mut table = Table::new(["id", "mode", "ratio", "bytes", "status"]);
    for r in state.load_records()? {
        let mode = match r.mode {
            OffloadMode::Holistic => "holistic",
            OffloadMode::Layered => "layered",
        };
        let status = match &r.status {
            VerificationStatus::Unverified => "unverified".to_string(),
            VerificationStatus::Passed { fraction } => format!("passed@{fraction}"),
            VerificationStatus::Failed(e) => format!("failed: {}", describe(e)),
        };
        table.push([
            r.inference_id.to_string(),
            mode.to_string(),
            r.verify_ratio.to_string(),
            state.record_size(r.inference_id)?.to_string(),
            status,
        ]);
    }
    print!("{}", table.render());
    Ok(ExitCode::SUCCESS)
}
