//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on usage or validation errors, 2 on runtime failures.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::lodo::{self, Learner};
use crate::bench::{gen_domains, GeneratorConfig};
use crate::config::ModelConfig;
use crate::diffusion::FeatureKind;
use crate::encoders::{load_features, write_features, FeatureSample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numcore::gradcheck::{self, GRAD_TOL};
use crate::pipeline::{checkpoint, evaluate, train::gradcheck_loss_final, train_with, Model, Variant};

#[derive(Debug, Parser)]
#[command(name = "doctor", about = "Domain-generalizing multimodal misinformation detector", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark as a feature file.
    GenData(Common),
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Score a checkpoint on a feature file.
    Eval(Common),
    /// Leave-one-domain-out table.
    Lodo(Common),
    /// Full model and the four ablations on one held-out domain.
    Ablate(Common),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck(Common),
    /// Per-sample refined features as CSV.
    DumpEmbeddings(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub per_domain: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint to read (eval, dump-embeddings).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Model variant: full, no-diffusion, no-distillation, no-se, no-st.
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Held-out domain for `ablate`; defaults to the highest domain id.
    #[arg(long)]
    pub target: Option<usize>,
    /// Run the naive-fusion baseline instead of the full model (`lodo`).
    #[arg(long)]
    pub baseline: bool,
    /// Disable the worker pool.
    #[arg(long)]
    pub sequential: bool,
}

/// Effective configuration: file values overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
}

impl RunConfig {
    pub fn resolve(flags: &Common) -> Result<Self> {
        let mut cfg: RunConfig = match &flags.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        cfg.model.seed = cfg.seed;
        cfg.generator.seed = cfg.seed;
        if let Some(d) = flags.domains {
            cfg.generator.domains = d;
            if cfg.generator.trap_domain.is_some_and(|t| t >= d) {
                cfg.generator.trap_domain = d.checked_sub(1);
            }
        }
        if let Some(n) = flags.per_domain {
            cfg.generator.per_domain = n;
        }
        if let Some(e) = flags.epochs {
            cfg.model.train.epochs = e;
        }
        if let Some(lr) = flags.lr {
            cfg.model.train.learning_rate = lr;
        }
        cfg.model.validate()?;
        cfg.generator.validate(&cfg.model.dims)?;
        Ok(cfg)
    }
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Invalid(_) | Error::Parse { .. } | Error::Json(_) | Error::Shape { .. } | Error::MissingParam(_)
    )
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if is_validation(&e) {
                1
            } else {
                2
            }
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::invalid(format!("--{flag} is required")))
}

/// Write to `--out` when given, else to stdout.
fn emit(out: &Option<PathBuf>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_nonempty(path: &Path) -> Result<Vec<FeatureSample>> {
    let data = load_features(path)?;
    if data.is_empty() {
        return Err(Error::invalid(format!("{} holds no samples", path.display())));
    }
    Ok(data)
}

fn dispatch(cmd: &Command, stdout: &mut dyn Write) -> Result<i32> {
    let flags = match cmd {
        Command::GenData(f)
        | Command::Train(f)
        | Command::Eval(f)
        | Command::Lodo(f)
        | Command::Ablate(f)
        | Command::Gradcheck(f)
        | Command::DumpEmbeddings(f) => f,
    };
    let cfg = RunConfig::resolve(flags)?;
    let variant: Variant = flags.variant.parse()?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    let exec = if flags.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cmd {
        Command::GenData(_) => {
            let out = required(&flags.out, "out")?;
            let bench = gen_domains(&cfg.generator, &cfg.model.dims)?;
            let data = bench.encode(&cfg.model.dims, cfg.seed, exec)?;
            write_features(out, &data)?;
            writeln!(stdout, "wrote {} samples over {} domains", data.len(), bench.domains.len())?;
        }
        Command::Train(_) => {
            let data = load_nonempty(required(&flags.data, "data")?)?;
            let out = required(&flags.out, "out")?;
            let mut failed = None;
            let (model, _) = train_with(&data, &cfg.model, variant, exec, |e| {
                if let Err(err) = serde_json::to_string(e).map(|s| writeln!(stdout, "{s}")) {
                    failed.get_or_insert(err.to_string());
                }
            })?;
            if let Some(err) = failed {
                return Err(Error::invalid(err));
            }
            checkpoint::save(&model, out)?;
        }
        Command::Eval(_) => {
            let model = checkpoint::load(required(&flags.model, "model")?)?;
            let data = load_nonempty(required(&flags.data, "data")?)?;
            let (m, _) = evaluate(&model, &data, exec)?;
            emit(&flags.out, &format!("{}\n", serde_json::to_string(&m)?), stdout)?;
        }
        Command::Lodo(_) => {
            let data = load_nonempty(required(&flags.data, "data")?)?;
            let last = data.iter().map(|s| s.domain).max().unwrap_or(0);
            let targets: Vec<usize> = (0..=last).collect();
            let learner = if flags.baseline {
                Learner::Baseline
            } else {
                Learner::Doctor(variant)
            };
            let rows = lodo::run_lodo(&data, &targets, learner, &cfg.model, exec)?;
            emit(&flags.out, &lodo::lodo_csv(&rows), stdout)?;
        }
        Command::Ablate(_) => {
            let data = load_nonempty(required(&flags.data, "data")?)?;
            let target = flags
                .target
                .unwrap_or_else(|| data.iter().map(|s| s.domain).max().unwrap_or(0));
            let rows = lodo::run_ablation(&data, target, &cfg.model, exec)?;
            emit(&flags.out, &lodo::ablation_csv(target, &rows), stdout)?;
        }
        Command::Gradcheck(_) => return gradcheck_report(&cfg, stdout),
        Command::DumpEmbeddings(_) => {
            let model = checkpoint::load(required(&flags.model, "model")?)?;
            let data = load_nonempty(required(&flags.data, "data")?)?;
            emit(&flags.out, &embeddings_csv(&model, &data, exec)?, stdout)?;
        }
    }
    Ok(0)
}

fn gradcheck_report(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = gradcheck::op_suite(&mut rng, 10)?;

    let gen = GeneratorConfig {
        domains: 2,
        per_domain: 1,
        trap_domain: None,
        seed: cfg.seed,
        ..cfg.generator.clone()
    };
    let bench = gen_domains(&gen, &cfg.model.dims)?;
    let data = bench.encode(&cfg.model.dims, cfg.seed, Execution::Sequential)?;
    let batch: Vec<&FeatureSample> = data.iter().collect();
    let model = Model::new(&cfg.model, Variant::Full)?;
    let full = gradcheck_loss_final(&model, &batch, cfg.seed, 3)?;
    report.push(("loss_final".into(), gradcheck::max_error(&full)));

    let mut text = String::new();
    for (name, err) in &report {
        let _ = writeln!(text, "{name} {err:.3e}");
    }
    stdout.write_all(text.as_bytes())?;
    Ok(if gradcheck::max_error(&report) <= GRAD_TOL { 0 } else { 2 })
}

/// One row per sample: index, domain, label, then each present refined feature.
pub fn embeddings_csv(model: &Model, data: &[FeatureSample], exec: Execution) -> Result<String> {
    let traces = model.trace_all(data, exec)?;
    let d = model.config.dims.shared_dim;
    let kinds: Vec<FeatureKind> = FeatureKind::ALL.into_iter().filter(|&k| model.variant.has(k)).collect();
    let mut out = String::from("index,domain,label");
    for k in &kinds {
        for j in 0..d {
            let _ = write!(out, ",{}_{j}", k.as_str());
        }
    }
    out.push('\n');
    for (i, (s, t)) in data.iter().zip(&traces).enumerate() {
        let _ = write!(out, "{i},{},{}", s.domain, s.label);
        for k in &kinds {
            let v = t.refined[k.index()]
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("missing {} feature", k.as_str())))?;
            for x in v {
                let _ = write!(out, ",{x}");
            }
        }
        out.push('\n');
    }
    Ok(out)
}
