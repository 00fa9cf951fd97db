//! `dfm`: train, distill, sample from and check discrete flow maps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dfm_core::checkpoint::Checkpoint;
use dfm_core::config::{Config, ScheduleChoice, ScheduleConfig};
use dfm_core::data::Dataset;
use dfm_core::eval::{cfg_sweep, eval_rng, evaluate, verify_identities, Tolerances};
use dfm_core::losses::LossKind;
use dfm_core::model::{Denoiser, DenoiserModel};
use dfm_core::oracle::OracleDenoiser;
use dfm_core::sampler::{block_generate, generate_many, sample_rng, DiagonalOnly, SamplerConfig};
use dfm_core::simplex::TokenSeq;
use dfm_core::toy::ToyDistribution;
use dfm_core::trainer::Trainer;

#[derive(Parser)]
#[command(
    name = "dfm",
    version,
    about = "Discrete flow maps on the probability simplex"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diagonal (stage one) training from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Consistency distillation from a trained checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        loss: DistillLoss,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw samples and print one per line.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 10)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        guidance: Option<f64>,
        /// Characters for corpus models, token ids otherwise.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        /// Append the terminal simplex state of each sample.
        #[arg(long)]
        emit_probs: bool,
        /// Sample with the diagonal only, ignoring the off-diagonal.
        #[arg(long)]
        diagonal_only: bool,
    },
    /// Check the flow-map identities against the exact posterior.
    Verify {
        #[arg(long, value_enum)]
        mode: VerifyMode,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Toy distribution table (TOML).
        #[arg(long)]
        dist: PathBuf,
        #[arg(long, default_value_t = 10)]
        grid: usize,
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 5e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0.9)]
        t_max: f64,
        /// Oracle mode only.
        #[arg(long, value_enum, default_value_t = ScheduleArg::Linear)]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 2000)]
        ode_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// TV and unigram entropy against the training law at several NFEs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        nfe: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        diagonal_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Guided block generation over a range of guidance strengths.
    CfgSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
        omegas: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        prompts: usize,
        #[arg(long, default_value_t = 200)]
        per_prompt: usize,
        #[arg(long, default_value_t = 4)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillLoss {
    Psd,
    Lsd,
    Esd,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyMode {
    Oracle,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Linear,
    BlendedArgmax,
}

/// Bad input from the caller, as opposed to a failed run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

enum Outcome {
    Done,
    CheckFailed,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Usage(format!("cannot load {}: {e}", path.display())).into())
}

fn load_config(path: &Path) -> anyhow::Result<Config> {
    Config::load(path).map_err(|e| Usage(format!("cannot load {}: {e}", path.display())).into())
}

fn dataset_for(cfg: &Config) -> anyhow::Result<Dataset> {
    Dataset::from_config(&cfg.data)
        .map_err(|e| Usage(format!("cannot build the dataset: {e}")).into())
}

fn render(data: &Dataset, tokens: &[usize]) -> String {
    match data {
        Dataset::Corpus(c) => c.decode(tokens),
        _ => tokens
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn parse_prompt(data: &Dataset, text: &str) -> anyhow::Result<Vec<usize>> {
    let tokens = match data {
        Dataset::Corpus(c) => match c.encode(text) {
            Ok(t) => t,
            Err(e) => return usage(e.to_string()),
        },
        _ => {
            let parsed: Result<Vec<usize>, _> = text
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|p| !p.is_empty())
                .map(str::parse)
                .collect();
            match parsed {
                Ok(t) => t,
                Err(_) => return usage("prompt must be token ids separated by commas or spaces"),
            }
        }
    };
    if let Some(&bad) = tokens.iter().find(|&&t| t >= data.vocab()) {
        return usage(format!("prompt token {bad} is outside the vocabulary"));
    }
    Ok(tokens)
}

fn train(config: &Path, out: &Path, steps: Option<u64>) -> anyhow::Result<Outcome> {
    let mut cfg = load_config(config)?;
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    let data = dataset_for(&cfg)?;
    let mut tr = Trainer::new(cfg, data)?;
    tr.run()?;
    tr.checkpoint()?.save(out)?;
    info!("wrote {}", out.display());
    Ok(Outcome::Done)
}

fn distill(
    config: &Path,
    init: &Path,
    loss: DistillLoss,
    out: &Path,
    steps: Option<u64>,
) -> anyhow::Result<Outcome> {
    let mut cfg = load_config(config)?;
    cfg.loss.kind = match loss {
        DistillLoss::Psd => LossKind::Psd,
        DistillLoss::Lsd => LossKind::Lsd,
        DistillLoss::Esd => LossKind::Esd,
    };
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    let data = dataset_for(&cfg)?;
    let ck = load_checkpoint(init)?;
    let mut tr = Trainer::distill_from(cfg, data, &ck)?;
    tr.run()?;
    tr.checkpoint()?.save(out)?;
    info!("wrote {}", out.display());
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    nfe: usize,
    n: usize,
    seed: u64,
    guidance: Option<f64>,
    prompt: Option<&str>,
    blocks: usize,
    emit_probs: bool,
    diagonal_only: bool,
) -> anyhow::Result<Outcome> {
    let ck = load_checkpoint(ckpt)?;
    let data = dataset_for(&ck.meta.config)?;
    let model = ck.model()?;
    let prompt = prompt.map(|p| parse_prompt(&data, p)).transpose()?;
    if emit_probs && blocks > 1 {
        return usage("--emit-probs needs a single block");
    }
    let cfg = SamplerConfig {
        nfe,
        seed,
        guidance_omega: guidance.unwrap_or(ck.meta.config.sampler.guidance_omega),
        block_len: model.seq_len(),
        n_blocks: blocks,
        ..ck.meta.config.sampler.clone()
    };
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let diag = DiagonalOnly(&model);
    let den: &dyn Denoiser = if diagonal_only { &diag } else { &model };
    let noise = &ck.meta.config.noise;
    let start = prompt.unwrap_or_default();
    let with_prompt = |tokens: &[usize]| {
        let mut all = start.clone();
        all.extend_from_slice(tokens);
        render(&data, &all)
    };
    if blocks > 1 {
        let prompt = TokenSeq::new(start.clone());
        for i in 0..n {
            let mut rng = sample_rng(seed, i as u64);
            let seq = block_generate(den, &prompt, &cfg, noise, &mut rng)?;
            println!("{}", with_prompt(&seq.tokens));
        }
        return Ok(Outcome::Done);
    }
    let ctx = (!start.is_empty()).then_some(start.as_slice());
    for (seq, x) in generate_many(den, &cfg, noise, n, ctx)? {
        let mut line = with_prompt(&seq.tokens);
        if emit_probs {
            let rows: Vec<String> = x
                .rows()
                .into_iter()
                .map(|r| {
                    r.iter()
                        .map(|v| format!("{v:.6}"))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect();
            line.push('\t');
            line.push_str(&rows.join(";"));
        }
        println!("{line}");
    }
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn verify(
    mode: VerifyMode,
    ckpt: Option<&Path>,
    dist: &Path,
    grid: usize,
    probes: usize,
    tol: f64,
    t_max: f64,
    schedule: ScheduleArg,
    ode_steps: usize,
    seed: u64,
    report: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let truth = match ToyDistribution::load(dist) {
        Ok(d) => d,
        Err(e) => return usage(format!("cannot load {}: {e}", dist.display())),
    };
    if !(tol > 0.0) || grid < 3 || probes == 0 || !(t_max > 0.0 && t_max < 1.0) {
        return usage("need tol > 0, grid >= 3, probes >= 1 and t_max in (0, 1)");
    }
    let mut rng = eval_rng(seed);
    let tols = Tolerances::uniform(tol);
    let rep = match mode {
        VerifyMode::Oracle => {
            if ckpt.is_some() {
                return usage("--ckpt is only used with --mode model");
            }
            let noise = Default::default();
            let kind = match schedule {
                ScheduleArg::Linear => ScheduleChoice::Linear,
                ScheduleArg::BlendedArgmax => ScheduleChoice::BlendedArgmax,
            };
            let sched = ScheduleConfig {
                kind,
                ..Default::default()
            }
            .build(truth.vocab(), &noise)?;
            let oracle = OracleDenoiser::new(truth.clone(), sched, noise).with_steps(ode_steps);
            verify_identities(&oracle, &truth, &noise, grid, t_max, probes, tols, &mut rng)?
        }
        VerifyMode::Model => {
            let Some(path) = ckpt else {
                return usage("--mode model needs --ckpt");
            };
            let ck = load_checkpoint(path)?;
            let model: DenoiserModel = ck.model()?;
            if (model.seq_len(), model.vocab()) != (truth.seq_len(), truth.vocab()) {
                return usage("the distribution does not match the checkpoint shape");
            }
            verify_identities(
                &model,
                &truth,
                &ck.meta.config.noise,
                grid,
                t_max,
                probes,
                tols,
                &mut rng,
            )?
        }
    };
    let text = rep.to_toml()?;
    print!("{text}");
    if let Some(p) = report {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(if rep.pass {
        Outcome::Done
    } else {
        Outcome::CheckFailed
    })
}

fn eval(
    ckpt: &Path,
    nfes: &[usize],
    n: usize,
    seed: u64,
    diagonal_only: bool,
    out: Option<&Path>,
) -> anyhow::Result<Outcome> {
    if nfes.is_empty() || nfes.contains(&0) || n == 0 {
        return usage("NFE values and the sample count must be positive");
    }
    let ck = load_checkpoint(ckpt)?;
    let data = dataset_for(&ck.meta.config)?;
    let model = ck.model()?;
    let truth = data.truth();
    let base = SamplerConfig {
        seed,
        block_len: model.seq_len(),
        ..ck.meta.config.sampler.clone()
    };
    let name = ckpt.display().to_string();
    let noise = &ck.meta.config.noise;
    let rep = if diagonal_only {
        evaluate(
            &DiagonalOnly(&model),
            truth.as_ref(),
            nfes,
            &base,
            noise,
            n,
            &name,
        )?
    } else {
        evaluate(&model, truth.as_ref(), nfes, &base, noise, n, &name)?
    };
    let text = rep.to_toml()?;
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome::Done)
}

fn sweep(
    ckpt: &Path,
    omegas: &[f64],
    n_prompts: usize,
    per_prompt: usize,
    nfe: usize,
    seed: u64,
) -> anyhow::Result<Outcome> {
    if omegas.is_empty() || omegas.iter().any(|w| !(*w >= 0.0)) {
        return usage("guidance strengths must be non-negative");
    }
    let ck = load_checkpoint(ckpt)?;
    let model = ck.model()?;
    if !model.arch().conditional {
        return usage("cfg-sweep needs a conditional checkpoint");
    }
    let data = dataset_for(&ck.meta.config)?;
    // prompts follow the data law; unconditional draws are skipped
    let mut rng = eval_rng(seed ^ 0x70);
    let mut prompts = Vec::with_capacity(n_prompts);
    for _ in 0..n_prompts * 100 {
        if prompts.len() == n_prompts {
            break;
        }
        if let Some(ctx) = data.sample(&mut rng).context {
            prompts.push(TokenSeq::new(ctx));
        }
    }
    if prompts.is_empty() {
        bail!("the dataset produced no prompts");
    }
    let base = SamplerConfig {
        nfe,
        seed,
        block_len: model.seq_len(),
        n_blocks: 1,
        ..ck.meta.config.sampler.clone()
    };
    let rows = cfg_sweep(
        &model,
        &data,
        &prompts,
        omegas,
        &base,
        &ck.meta.config.noise,
        per_prompt,
    )?;
    println!("omega\tmetric\tentropy");
    for r in rows {
        let metric = r.metric.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{}\t{metric}\t{:.4}", r.omega, r.entropy);
    }
    Ok(Outcome::Done)
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.cmd {
        Command::Train { config, out, steps } => train(&config, &out, steps),
        Command::Distill {
            config,
            init,
            loss,
            out,
            steps,
        } => distill(&config, &init, loss, &out, steps),
        Command::Sample {
            ckpt,
            nfe,
            num_samples,
            seed,
            guidance,
            prompt,
            blocks,
            emit_probs,
            diagonal_only,
        } => sample(
            &ckpt,
            nfe,
            num_samples,
            seed,
            guidance,
            prompt.as_deref(),
            blocks,
            emit_probs,
            diagonal_only,
        ),
        Command::Verify {
            mode,
            ckpt,
            dist,
            grid,
            probes,
            tol,
            t_max,
            schedule,
            ode_steps,
            seed,
            report,
        } => verify(
            mode,
            ckpt.as_deref(),
            &dist,
            grid,
            probes,
            tol,
            t_max,
            schedule,
            ode_steps,
            seed,
            report.as_deref(),
        ),
        Command::Eval {
            ckpt,
            nfe,
            num_samples,
            seed,
            diagonal_only,
            out,
        } => eval(
            &ckpt,
            &nfe,
            num_samples,
            seed,
            diagonal_only,
            out.as_deref(),
        ),
        Command::CfgSweep {
            ckpt,
            omegas,
            prompts,
            per_prompt,
            nfe,
            seed,
        } => sweep(&ckpt, &omegas, prompts, per_prompt, nfe, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("DFM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: DFM_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
