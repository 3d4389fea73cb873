use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use usam::checkpoint::Checkpoint;
use usam::data::Dataset;
use usam::gradcheck::model_check;
use usam::model::{self, analytic_trainable_count};
use usam::train::{self, evaluate, Trainer};
use usam::{Config, UsamError};
use usam_numerics::{primitive_suite, Binder, Tape};

#[derive(Parser)]
#[command(name = "usam", version, about = "Train and inspect the toy multi-encoder audio language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic copy/reverse dataset.
    GenData {
        /// Config file; only the task keys are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a line-per-record text export next to `--out`.
        #[arg(long)]
        text: bool,
    },
    /// Train from a config file and dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        force: bool,
        /// Stop after this many steps instead of `total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print the metrics table of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Skip greedy decoding (no exact-match figure).
        #[arg(long)]
        no_decode: bool,
    },
    /// Finite-difference check of the primitives or of the full loss.
    Gradcheck {
        #[arg(long, value_enum, default_value = "model")]
        scope: Scope,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Per-task mean routing weights.
    InspectRouting {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-example significance scores, decisions and fallbacks.
    InspectSaclm {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    Tapm,
    Saclm,
    Enc1,
    Enc2,
    Enc3,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Op,
    Model,
}

/// A run that completed but whose check did not hold.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<(Checkpoint, Config)> {
    let ckpt = Checkpoint::load(path, None, false).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let config = ckpt.config()?;
    Ok((ckpt, config))
}

fn gen_data(spec: Option<&Path>, n: usize, seed: u64, out: &Path, text: bool) -> anyhow::Result<()> {
    let mut spec = load_config(spec)?.task;
    spec.data_seed = seed;
    let data = Dataset::generate(&spec, n);
    data.save(out)?;
    if text {
        std::fs::write(out.with_extension("txt"), data.to_text())?;
    }
    println!("wrote {n} examples to {}", out.display());
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    data: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
    ablate: Vec<Ablate>,
    force: bool,
    steps: Option<usize>,
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    for ab in &a.ablate {
        match ab {
            Ablate::Tapm => config.train.disable_tapm = true,
            Ablate::Saclm => config.train.disable_saclm = true,
            Ablate::Enc1 => config.train.zero_encoder[0] = true,
            Ablate::Enc2 => config.train.zero_encoder[1] = true,
            Ablate::Enc3 => config.train.zero_encoder[2] = true,
        }
    }
    config.validate()?;
    let data = load_data(&a.data)?;
    if data.spec != config.task {
        eprintln!("warning: dataset spec differs from the config's task keys");
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, Some(&config.fingerprint()), a.force)?;
            println!("resuming from {} at step {}", path.display(), ckpt.step);
            Trainer::from_checkpoint(config, data.examples, &ckpt)?
        }
        None => Trainer::new(config, data.examples)?,
    };
    println!(
        "trainable parameters: {} (analytic {})",
        trainer.store.trainable_count(),
        analytic_trainable_count(&trainer.config.model)
    );
    std::fs::create_dir_all(&a.out_dir)?;
    let until = a.steps.unwrap_or(trainer.config.train.total_steps);
    let every = trainer.config.train.log_every.max(1);
    trainer.run_until(until, |log| {
        if log.step % every == 0 || log.step == until {
            println!("{log}");
        }
    })?;
    let path = a.out_dir.join("final.ckpt");
    trainer.checkpoint().save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, decode: bool) -> anyhow::Result<()> {
    let (ckpt, config) = load_ckpt(ckpt)?;
    let data = load_data(data)?;
    let m = evaluate(&config, &ckpt.store, &data.examples, decode)?;
    print!("{m}");
    Ok(())
}

fn gradcheck_cmd(scope: Scope, eps: f64, tol: f64) -> anyhow::Result<()> {
    let mut ok = true;
    match scope {
        Scope::Op => {
            for c in primitive_suite(eps, tol)? {
                println!("{:<18} {}", c.name, c.report);
                ok &= c.report.passed();
            }
        }
        Scope::Model => {
            let report = model_check(eps, tol)?;
            println!("{:<18} {}", "combined_loss", report);
            ok = report.passed();
        }
    }
    if !ok {
        return Err(CheckFailed.into());
    }
    Ok(())
}

fn inspect_routing(ckpt: &Path, data: &Path) -> anyhow::Result<()> {
    let (ckpt, config) = load_ckpt(ckpt)?;
    if config.train.disable_tapm {
        bail!("checkpoint was trained without routing");
    }
    let data = load_data(data)?;
    let m = evaluate(&config, &ckpt.store, &data.examples, false)?;
    let experts = config.model.num_experts;
    let head: Vec<String> = (0..experts).map(|i| format!("{:>9}", format!("expert{i}"))).collect();
    println!("{:<8}{}", "task", head.join(""));
    for (task, w) in &m.routing {
        let ws: Vec<String> = w.iter().map(|v| format!("{v:>9.4}")).collect();
        println!("{task:<8}{}", ws.join(""));
    }
    if let Some(d) = m.routing_distance() {
        println!("L1(copy, reverse) = {d:.4}");
    }
    Ok(())
}

fn inspect_saclm(ckpt: &Path, data: &Path) -> anyhow::Result<()> {
    let (ckpt, config) = load_ckpt(ckpt)?;
    let data = load_data(data)?;
    if data.examples.len() < 2 {
        bail!("inspection needs at least two examples");
    }
    let bank = usam::encoders::EncoderBank::from_store(&ckpt.store, &config.model)?;
    let mut ab = train::ablation(&config);
    ab.disable_saclm = false;
    let settings = train::loss_settings(&config, false);
    let batch: Vec<_> = data.examples.iter().collect();
    let negatives = usam::saclm::derangement(batch.len(), 0)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, &ckpt.store);
    let out = model::forward(&b, &config.model, &bank, &batch, &negatives, ab, settings)?;
    for (i, (s, d)) in out.scores.iter().zip(&out.decisions).enumerate() {
        let s = tape.value(*s);
        let fallback = s.data().iter().all(|&v| v < config.model.threshold);
        let scores: Vec<String> = s.data().iter().map(|v| format!("{v:.4}")).collect();
        let picks: Vec<String> = d.data().iter().map(|v| format!("{v}")).collect();
        let noise: Vec<String> = batch[i].noise_frames.iter().map(|f| f.to_string()).collect();
        println!(
            "example={i} task={} fallback={} S=[{}] D=[{}] noise_frames=[{}]",
            batch[i].task.name(),
            u8::from(fallback),
            scores.join(" "),
            picks.join(" "),
            noise.join(" ")
        );
    }
    println!("fallbacks={}", out.fallbacks);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, n, seed, out, text } => gen_data(spec.as_deref(), n, seed, &out, text),
        Command::Train {
            config,
            data,
            out_dir,
            resume,
            ablate,
            force,
            steps,
        } => train_cmd(TrainArgs {
            config,
            data,
            out_dir,
            resume,
            ablate,
            force,
            steps,
        }),
        Command::Eval { ckpt, data, no_decode } => eval_cmd(&ckpt, &data, !no_decode),
        Command::Gradcheck { scope, eps, tol } => gradcheck_cmd(scope, eps, tol),
        Command::InspectRouting { ckpt, data } => inspect_routing(&ckpt, &data),
        Command::InspectSaclm { ckpt, data } => inspect_saclm(&ckpt, &data),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<UsamError>() {
        Some(UsamError::Config(_) | UsamError::Argument(_) | UsamError::Fingerprint { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.downcast_ref::<CheckFailed>().is_none() {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
