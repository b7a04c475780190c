//! Command-line front end for the `mdc` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 self-check failure.
//! Every run writes a JSON manifest: next to `--out` as `<out>.manifest.json`
//! (or `manifest.json` inside the training output directory), at `--manifest`
//! when given, and on stderr when the output goes to stdout.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use crate::corpus::{read_chunks, synthetic_text, SyntheticSource};
use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, TokenSequence, Vocabulary};
use crate::losses::{
    loss_continuous_ce, loss_ctmc, loss_ctmc_doubly_stochastic, loss_discrete, loss_genmd4, loss_maskgit,
    loss_score_entropy, LossEstimate, McConfig, ScoreView,
};
use crate::predictor::{Context, Predictor, TabularPredictor};
use crate::rng::stream;
use crate::sampler::{trajectory, SamplerConfig};
use crate::schedule::{Schedule, VectorSchedule, T_MIN};
use crate::selfcheck::{self, Fault};
use crate::trainer::{evaluate_bpc, Checkpoint, Dataset, StepMetrics, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "MDC_SEED";

#[derive(Debug, Parser)]
#[command(name = "mdc", version, about = "Masked discrete diffusion toolkit")]
struct Cli {
    /// Master seed; falls back to $MDC_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate a masking schedule at interior points t_k = k/(K+1).
    ScheduleDump(ScheduleDumpArgs),
    /// Compare loss estimators on a fixed random fixture.
    LossCompare(LossCompareArgs),
    /// Train a model from a configuration file.
    Train(TrainArgs),
    /// Estimate bits per token of a checkpoint.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Run the bundled property checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest path override.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScheduleDumpArgs {
    /// Schedule spec such as `linear`, `polynomial:2`, `geometric:1e-5:20` or `cosine@0.001`.
    #[arg(long)]
    kind: String,
    /// Number of interior points.
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Ce,
    Ctmc,
    CtmcDs,
    Score,
    Maskgit,
    Genmd4,
    Discrete,
}

#[derive(Debug, Args)]
struct LossCompareArgs {
    #[arg(long, value_delimiter = ',', default_values = ["ce", "ctmc", "ctmc-ds", "score", "maskgit"])]
    estimators: Vec<EstimatorArg>,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    /// Vocabulary size of the fixture.
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Sequence length of the fixture.
    #[arg(long, default_value_t = 8)]
    len: usize,
    #[arg(long, default_value = "linear")]
    schedule: String,
    /// Number of steps for the discrete estimator.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    antithetic: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.mdck, metrics.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured number of steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Chunk file in the `mdc-chunks v1` format.
    #[arg(long, conflicts_with_all = ["text", "source"])]
    chunks: Option<PathBuf>,
    /// UTF-8 text encoded with the checkpoint's character table.
    #[arg(long, conflicts_with = "source")]
    text: Option<PathBuf>,
    /// Synthetic source spec, e.g. `two_state:0.1`.
    #[arg(long)]
    source: Option<String>,
    /// Chunk length for `--text` and `--source`.
    #[arg(long, default_value_t = 64)]
    chunk_len: usize,
    /// Chunk count for `--source`.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 8)]
    draws: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    num: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Emit every `k`-th intermediate state (must divide --steps).
    #[arg(long)]
    snapshot_stride: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    UnconstrainedScore,
}

#[derive(Debug, Args)]
struct SelfcheckArgs {
    /// Inject a known defect (negative control).
    #[arg(long)]
    inject_fault: Option<FaultArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved arguments (and configuration text for training).
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: serde_json::Value,
    pub outputs: Vec<String>,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
}

struct Outcome {
    code: i32,
    seed: u64,
    config: serde_json::Value,
    outputs: Vec<String>,
}

/// Parses `argv` and runs the subcommand. `env_seed` is the value of `$MDC_SEED`.
pub fn run<I, T>(argv: I, env_seed: Option<String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let mut text = e.render().to_string();
            if e.kind() == clap::error::ErrorKind::UnknownArgument {
                text.push_str(&valid_flags(&argv));
            }
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let explicit_seed = match (cli.seed, env_seed) {
        (Some(s), _) => Some(s),
        (None, Some(v)) => match v.trim().parse::<u64>() {
            Ok(s) => Some(s),
            Err(_) => {
                let _ = writeln!(stderr, "error: {SEED_ENV}={v:?} is not an unsigned integer");
                return EXIT_USAGE;
            }
        },
        (None, None) => None,
    };
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let (name, manifest_target) = manifest_target(&cli.command);
    let result = dispatch(cli.command, explicit_seed, stdout, stderr);
    match result {
        Ok(outcome) => {
            let manifest = RunManifest {
                subcommand: name.into(),
                config: outcome.config,
                seed: outcome.seed,
                versions: serde_json::json!({
                    "mdc": env!("CARGO_PKG_VERSION"),
                    "checkpoint_format": crate::trainer::checkpoint::VERSION,
                }),
                outputs: outcome.outputs,
                started_unix_s: started,
                wall_clock_s: clock.elapsed().as_secs_f64(),
            };
            let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            let written = match &manifest_target {
                Some(p) => std::fs::write(p, format!("{json}\n")).map_err(|e| Error::io(p, e)),
                None => writeln!(stderr, "{json}").map_err(|e| Error::io("<stderr>", e)),
            };
            if let Err(e) = written {
                let _ = writeln!(stderr, "error: {e}");
                return EXIT_RUNTIME;
            }
            outcome.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// "valid flags: …" for the subcommand named in `argv` (or the top level).
fn valid_flags(argv: &[OsString]) -> String {
    let root = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| a.to_str().and_then(|a| root.find_subcommand(a)))
        .unwrap_or(&root);
    let flags: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .chain(["--seed".to_string(), "--help".to_string()])
        .collect();
    format!("valid flags: {}\n", flags.join(" "))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn manifest_target(cmd: &Command) -> (&'static str, Option<PathBuf>) {
    let pick = |c: &Common| c.manifest.clone().or_else(|| c.out.as_deref().map(sidecar));
    match cmd {
        Command::ScheduleDump(a) => ("schedule-dump", pick(&a.common)),
        Command::LossCompare(a) => ("loss-compare", pick(&a.common)),
        Command::Train(a) => ("train", Some(a.out.join("manifest.json"))),
        Command::Eval(a) => ("eval", pick(&a.common)),
        Command::Sample(a) => ("sample", pick(&a.common)),
        Command::Selfcheck(a) => ("selfcheck", pick(&a.common)),
    }
}

fn emit(common: &Common, text: &str, stdout: &mut dyn Write) -> Result<Vec<String>> {
    match &common.out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
            Ok(vec![p.display().to_string()])
        }
        None => {
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            Ok(vec!["<stdout>".into()])
        }
    }
}

fn ok(seed: u64, config: serde_json::Value, outputs: Vec<String>) -> Result<Outcome> {
    Ok(Outcome {
        code: EXIT_OK,
        seed,
        config,
        outputs,
    })
}

/// `seed` is the explicit seed from `--seed` or `$MDC_SEED`; commands other
/// than `train` default it to 0, training falls back to the configured seed.
fn dispatch(cmd: Command, seed: Option<u64>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome> {
    let default = seed.unwrap_or(0);
    match cmd {
        Command::ScheduleDump(a) => schedule_dump(a, stdout),
        Command::LossCompare(a) => loss_compare(a, default, stdout),
        Command::Train(a) => train_cmd(a, seed, stdout),
        Command::Eval(a) => eval_cmd(a, default, stdout),
        Command::Sample(a) => sample_cmd(a, default, stdout),
        Command::Selfcheck(a) => selfcheck_cmd(a, stdout, stderr),
    }
}

fn usage(e: Error) -> Error {
    Error::Usage(e.to_string())
}

/// CSV of `t, α, α′, ce_weight, log_snr` at `t_k = k/(points+1)`.
pub fn schedule_table(schedule: &Schedule, points: usize) -> Result<String> {
    let mut s = String::from("t,alpha,alpha_prime,ce_weight,log_snr\n");
    for k in 1..=points {
        let t = k as f64 / (points + 1) as f64;
        writeln!(
            s,
            "{t:?},{:?},{:?},{:?},{:?}",
            schedule.alpha(t)?,
            schedule.alpha_prime(t)?,
            schedule.ce_weight(t)?,
            schedule.log_snr(t)?
        )
        .expect("writing to a String");
    }
    Ok(s)
}

fn schedule_dump(a: ScheduleDumpArgs, stdout: &mut dyn Write) -> Result<Outcome> {
    let sched: Schedule = a.kind.parse().map_err(usage)?;
    let text = schedule_table(&sched, a.points)?;
    let outputs = emit(&a.common, &text, stdout)?;
    ok(0, serde_json::json!({ "schedule": sched.to_string(), "points": a.points }), outputs)
}

/// Random per-position tabular predictor and clean sequence used by `loss-compare`.
pub fn comparison_fixture(m: usize, len: usize, seed: u64) -> Result<(TabularPredictor, TokenSequence)> {
    let v = Vocabulary::new(m)?;
    let mut p = TabularPredictor::new(v, Context::PerPosition { len })?;
    let mut rng = stream(seed, "loss-compare-fixture", 0);
    for q in p.params_mut() {
        *q = rng.random_range(-2.0..2.0);
    }
    let x0 = TokenSequence::clean((0..len).map(|_| rng.random_range(0..m)).collect(), v)?;
    Ok((p, x0))
}

fn loss_compare(a: LossCompareArgs, seed: u64, stdout: &mut dyn Write) -> Result<Outcome> {
    let sched: Schedule = a.schedule.parse().map_err(usage)?;
    if a.m == 0 || a.len == 0 {
        return Err(Error::Usage("--m and --len must be positive".into()));
    }
    let (pred, x0) = comparison_fixture(a.m, a.len, seed)?;
    let v = x0.vocab();
    let kernel = ForwardKernel::scalar(sched, v);
    let cfg = McConfig::new(a.draws).antithetic(a.antithetic);
    let mut csv = String::from("estimator,mean,variance,draws\n");
    for (i, e) in a.estimators.iter().enumerate() {
        let mut rng = stream(seed, "loss-compare", i as u64);
        let est: LossEstimate = match e {
            EstimatorArg::Ce => loss_continuous_ce(&x0, &pred, &kernel, &mut rng, &cfg)?,
            EstimatorArg::Ctmc => loss_ctmc(&x0, &pred, &kernel, &mut rng, &cfg)?,
            EstimatorArg::CtmcDs => loss_ctmc_doubly_stochastic(&x0, &pred, &kernel, &mut rng, &cfg)?,
            EstimatorArg::Score => loss_score_entropy(&x0, &pred, ScoreView::default(), &kernel, &mut rng, &cfg)?,
            EstimatorArg::Maskgit => loss_maskgit(&x0, &pred, &kernel, &mut rng, &cfg)?,
            EstimatorArg::Genmd4 => {
                let vk = ForwardKernel::new(
                    crate::forward::Masking::Vector(VectorSchedule::uniform(a.m, 1.0)?),
                    v,
                )?;
                loss_genmd4(&x0, &pred, &vk, &mut rng, &cfg)?
            }
            EstimatorArg::Discrete => loss_discrete(&x0, &pred, &kernel, &mut rng, a.steps, a.draws, false)?,
        };
        writeln!(csv, "{},{:?},{:?},{}", est.estimator.name(), est.value, est.variance_per_draw(), est.draws)
            .expect("writing to a String");
    }
    let outputs = emit(&a.common, &csv, stdout)?;
    let names: Vec<String> = a
        .estimators
        .iter()
        .map(|e| e.to_possible_value().expect("no skipped variants").get_name().to_string())
        .collect();
    ok(
        seed,
        serde_json::json!({
            "estimators": names, "draws": a.draws, "m": a.m, "len": a.len,
            "schedule": sched.to_string(), "steps": a.steps, "antithetic": a.antithetic,
        }),
        outputs,
    )
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, stdout: &mut dyn Write) -> Result<Outcome> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let data = Dataset::load(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let metrics_path = a.out.join("metrics.csv");
    let ckpt_path = a.out.join("checkpoint.mdck");
    let mut trainer = Trainer::for_dataset(cfg.clone(), &data)?;
    let w_cols = trainer.w().map(|w| w.len());
    let mut metrics = format!("{}\n", StepMetrics::csv_header(w_cols));
    let mut last = None;
    trainer.run(&data.train, |m| {
        metrics.push_str(&m.csv_row());
        metrics.push('\n');
        last = Some(m.loss);
        Ok(())
    })?;
    std::fs::write(&metrics_path, metrics).map_err(|e| Error::io(&metrics_path, e))?;
    trainer.checkpoint().save(&ckpt_path)?;
    writeln!(
        stdout,
        "trained {} steps; final batch loss {} nats/token; checkpoint {}",
        trainer.step_count(),
        last.map_or("n/a".into(), |l| format!("{l:.6}")),
        ckpt_path.display()
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    ok(
        cfg.seed,
        serde_json::json!({ "config_file": a.config.display().to_string(), "resolved": cfg.to_text() }),
        vec![ckpt_path.display().to_string(), metrics_path.display().to_string()],
    )
}

fn eval_chunks(a: &EvalArgs, ckpt: &Checkpoint) -> Result<Vec<TokenSequence>> {
    let m = ckpt.meta.m;
    if let Some(p) = &a.chunks {
        let (v, chunks) = read_chunks(p)?;
        if v.m() != m {
            return Err(Error::InvalidArgument(format!("chunk file has m = {}, checkpoint has m = {m}", v.m())));
        }
        return Ok(chunks);
    }
    if let Some(p) = &a.text {
        let table = ckpt
            .corpus_vocab()?
            .ok_or_else(|| Error::Usage("--text needs a checkpoint trained on text".into()))?;
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let ids = table.encode(&text)?;
        let v = table.vocabulary();
        return ids
            .chunks_exact(a.chunk_len)
            .map(|c| TokenSequence::clean(c.to_vec(), v))
            .collect();
    }
    if let Some(s) = &a.source {
        let src: SyntheticSource = s.parse().map_err(usage)?;
        if src.m() != m {
            return Err(Error::InvalidArgument(format!("source has m = {}, checkpoint has m = {m}", src.m())));
        }
        return Ok(src.chunks(a.count, a.chunk_len, a.data_seed));
    }
    Err(Error::Usage("one of --chunks, --text or --source is required".into()))
}

fn eval_cmd(a: EvalArgs, seed: u64, stdout: &mut dyn Write) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let chunks = eval_chunks(&a, &ckpt)?;
    let report = evaluate_bpc(&ckpt, &chunks, a.draws, seed)?;
    let json = serde_json::json!({
        "bpc": report.bpc, "std_error": report.std_error,
        "chunks": report.chunks, "draws_per_chunk": report.draws_per_chunk,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&json).expect("json"));
    let outputs = emit(&a.common, &text, stdout)?;
    ok(
        seed,
        serde_json::json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "chunks": a.chunks.as_ref().map(|p| p.display().to_string()),
            "text": a.text.as_ref().map(|p| p.display().to_string()),
            "source": a.source, "chunk_len": a.chunk_len, "count": a.count,
            "data_seed": a.data_seed, "draws": a.draws,
        }),
        outputs,
    )
}

fn sample_cmd(a: SampleArgs, seed: u64, stdout: &mut dyn Write) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let pred = ckpt.predictor(true)?;
    if let Some(l) = pred.seq_len() {
        if l != a.len {
            return Err(Error::Usage(format!("this checkpoint generates sequences of length {l}, not {}", a.len)));
        }
    }
    let kernel = ckpt.kernel()?;
    let table = ckpt.corpus_vocab()?;
    let render = |x: &TokenSequence| match &table {
        Some(t) => t.decode(x.ids()),
        None => {
            let mask = x.vocab().mask_id();
            x.ids()
                .iter()
                .map(|&i| if i == mask { '?' } else { synthetic_text(&[i]).chars().next().unwrap_or('?') })
                .collect()
        }
    };
    let cfg = SamplerConfig {
        steps: a.steps,
        temperature: a.temperature,
        t_min: ckpt.meta.t_min.max(T_MIN),
    };
    let stride = a.snapshot_stride.unwrap_or(a.steps);
    let mut out = String::new();
    for i in 0..a.num {
        let mut rng = stream(seed, "sample", i as u64);
        let snaps = trajectory(&pred, &kernel, a.len, &cfg, stride, &mut rng)?;
        if a.snapshot_stride.is_some() {
            for (k, s) in snaps.iter().enumerate() {
                writeln!(out, "{i}\t{}\t{}", k * stride, render(s)).expect("writing to a String");
            }
        } else {
            writeln!(out, "{}", render(snaps.last().expect("final state"))).expect("writing to a String");
        }
    }
    let outputs = emit(&a.common, &out, stdout)?;
    ok(
        seed,
        serde_json::json!({
            "checkpoint": a.checkpoint.display().to_string(), "steps": a.steps, "len": a.len,
            "num": a.num, "temperature": a.temperature, "snapshot_stride": a.snapshot_stride,
        }),
        outputs,
    )
}

fn selfcheck_cmd(a: SelfcheckArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome> {
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::UnconstrainedScore => Fault::UnconstrainedScore,
    });
    let report = selfcheck::run(fault);
    let outputs = emit(&a.common, &format!("{}\n", report.to_json()), stdout)?;
    for c in report.failures() {
        let _ = writeln!(
            stderr,
            "FAILED {}: observed {} vs tolerance {} ({})",
            c.name, c.observed, c.tolerance, c.detail
        );
    }
    Ok(Outcome {
        code: if report.passed { EXIT_OK } else { EXIT_SELFCHECK },
        seed: 0,
        config: serde_json::json!({ "inject_fault": a.inject_fault.map(|_| "unconstrained-score") }),
        outputs,
    })
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run(std::env::args_os(), env_seed, &mut out, &mut err)
}
