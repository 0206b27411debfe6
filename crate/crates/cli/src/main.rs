use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qplan::campaign::{
    compare_frequency, run_campaign, run_campaign_logs, seed_range, sign_test, sweep_csv,
    sweep_point, Campaign, Report, SweepAxis,
};
use qplan::checkpoint::{content_hash, train_checkpoint, Checkpoint, Model};
use qplan::data::{generate_expert, Dataset, ExpertStyle, WindowSpec};
use qplan::denoiser::MlpDenoiser;
use qplan::engine::{EngineKind, EpisodeLog};
use qplan::live::{LiveSession, ReplayCursor, Role};
use qplan::scenario::Scenario;
use qplan::schedule::NoiseSchedule;
use qplan_bridge::{BridgeConfig, LiveEngine, ReplayEngine};

mod settings;

use settings::Settings;

/// Bad flags, values or config files (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A `--check` expectation did not hold (exit code 3).
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "qplan",
    version,
    about = "Rolling-queue diffusion planner: train, evaluate, sweep, time and steer"
)]
struct Cli {
    /// JSON settings merged over the defaults; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for reports, checkpoints and logs.
    #[arg(
        long,
        global = true,
        env = "QPLAN_OUT_DIR",
        default_value = "qplan-out"
    )]
    out_dir: PathBuf,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations and train a denoiser.
    Train(TrainArgs),
    /// Paired-seed evaluation campaign on one scenario.
    Eval(EvalArgs),
    /// One campaign per value of a sweep axis.
    Sweep(SweepArgs),
    /// Measure replanning frequency of both engines.
    Freq(FreqArgs),
    /// Run a live session behind the WebSocket bridge.
    Serve(ServeArgs),
    /// Stream a recorded episode log behind the WebSocket bridge.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint to write [default: <out-dir>/checkpoint.json].
    #[arg(long)]
    output: Option<PathBuf>,
    /// Train on a saved dataset instead of generating one.
    #[arg(long, conflicts_with_all = ["demos", "expert", "data_seed"])]
    dataset: Option<PathBuf>,
    /// Also write the generated dataset here.
    #[arg(long)]
    save_dataset: Option<PathBuf>,
    /// Continue training a checkpoint (same data, same settings).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in this run; the checkpoint can be resumed.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    expert: Option<ExpertStyle>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Fraction of training windows with independent per-row noise levels.
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct GuidanceArgs {
    /// Guidance step size; 0 disables guidance.
    #[arg(long)]
    eta: Option<f64>,
    /// Barrier sharpness.
    #[arg(long)]
    lambda: Option<f64>,
    /// Barrier height.
    #[arg(long)]
    omega: Option<f64>,
    /// Barrier offset, in the barrier's own (squared-distance) units.
    #[arg(long)]
    barrier_radius: Option<f64>,
    /// Guidance corrections with a smaller squared gradient norm are skipped.
    #[arg(long)]
    min_grad_norm_sq: Option<f64>,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preset (reach, static, dynamic) or scenario JSON file.
    #[arg(long)]
    scenario: Option<String>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[command(flatten)]
    guidance: GuidanceArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Engines {
    Queue,
    Baseline,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Queue,
    Baseline,
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Queue => EngineKind::Queue,
            EngineArg::Baseline => EngineKind::Baseline,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, value_enum, default_value_t = Engines::Both)]
    engine: Engines,
    /// Report file prefix [default: scenario name].
    #[arg(long)]
    name: Option<String>,
    /// Write every episode as JSONL under <out-dir>/logs.
    #[arg(long)]
    save_logs: bool,
    /// Exit 3 unless the queue engine beats the baseline (sign test p < 0.05).
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Checkpoints for a mix_ratio sweep, one per value, in the same order.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<PathBuf>,
    /// Checkpoint for eta and obstacle_speed sweeps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, value_enum, default_value_t = EngineArg::Queue)]
    engine: EngineArg,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Exit 3 unless the axis trend holds (eta: minimum obstacle distance
    /// non-decreasing; obstacle_speed: success non-increasing with at most
    /// one inversion).
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct FreqArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Planner ticks timed per engine (at least 10).
    #[arg(long, default_value_t = 200)]
    ticks: usize,
    #[arg(long, default_value = "reach")]
    scenario: String,
    /// Exit 3 unless the measured ratio is at least this.
    #[arg(long, value_name = "RATIO", num_args = 0..=1, default_missing_value = "3.5")]
    check: Option<f64>,
}

#[derive(Args, Debug)]
struct BridgeArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: std::net::SocketAddr,
    /// Ticks per second.
    #[arg(long, default_value_t = 20.0)]
    tick_hz: f64,
}

impl BridgeArgs {
    fn config(&self) -> BridgeConfig {
        BridgeConfig {
            addr: self.addr,
            tick_hz: self.tick_hz,
            ..BridgeConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "dynamic")]
    scenario: String,
    #[arg(long, value_enum, default_value_t = EngineArg::Queue)]
    engine: EngineArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Episode log (JSONL).
    #[arg(long)]
    log: PathBuf,
    #[command(flatten)]
    bridge: BridgeArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        3
    } else if e.downcast_ref::<UsageError>().is_some()
        || matches!(
            e.downcast_ref::<qplan::Error>(),
            Some(qplan::Error::Config(_))
        )
    {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let out = cli.out_dir;
    match cli.command {
        Command::Train(args) => train(settings, &out, args),
        Command::Eval(args) => eval(settings, &out, args),
        Command::Sweep(args) => sweep(settings, &out, args),
        Command::Freq(args) => freq(settings, &out, args),
        Command::Serve(args) => serve(settings, args),
        Command::Replay(args) => replay(settings, args),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn scenario(name: &str) -> Result<Scenario> {
    Scenario::preset_or_file(name).with_context(|| format!("loading scenario '{name}'"))
}

fn train(mut s: Settings, out: &Path, a: TrainArgs) -> Result<()> {
    let d = &mut s.data;
    d.demos = a.demos.unwrap_or(d.demos);
    d.expert = a.expert.unwrap_or(d.expert);
    d.seed = a.data_seed.unwrap_or(d.seed);
    let t = &mut s.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.mix_ratio = a.mix_ratio.unwrap_or(t.mix_ratio);
    t.seed = a.seed.unwrap_or(t.seed);
    t.validate()?;
    if a.stop_after == Some(0) {
        return Err(usage("--stop-after must be at least 1"));
    }

    let windows = WindowSpec {
        horizon: s.schedule.horizon,
        ..WindowSpec::default()
    };
    let dataset = match &a.dataset {
        Some(path) => Dataset::load(path, Some(windows))
            .with_context(|| format!("loading dataset {}", path.display()))?,
        None => generate_expert(
            s.data.demos,
            &scenario(&s.data.scenario)?,
            s.data.expert,
            windows,
            s.data.seed,
        )?,
    };
    if let Some(path) = &a.save_dataset {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        dataset
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let resume = match &a.resume {
        Some(path) => {
            let ck =
                Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            // the run's identity comes from the checkpoint; only the length may grow
            s.arch = ck.arch.clone();
            s.schedule = ck.schedule.clone();
            s.train = qplan::denoiser::TrainConfig {
                epochs: a.epochs.unwrap_or(ck.train.epochs),
                ..ck.train.clone()
            };
            Some(ck)
        }
        None => None,
    };
    let already = resume.as_ref().map_or(0, |ck| ck.state.epochs_done);
    let stop_at = a.stop_after.map(|n| already + n);
    eprintln!(
        "training on {} windows from {} demonstrations, epochs {}..{}",
        dataset.len(),
        dataset.demos.len(),
        already,
        stop_at.unwrap_or(s.train.epochs).min(s.train.epochs),
    );
    let started = std::time::Instant::now();
    let ck = train_checkpoint(
        &dataset,
        &s.arch,
        &s.schedule,
        &s.train,
        resume,
        |epoch, loss| {
            eprintln!(
                "epoch {:>4}  loss {loss:.6}  {:.0?}",
                epoch + 1,
                started.elapsed()
            );
            stop_at.is_none_or(|stop| epoch + 1 < stop)
        },
    )?;

    let path = a.output.unwrap_or_else(|| out.join("checkpoint.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ck.save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in ck.state.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    let loss_path = path.with_extension("loss.csv");
    write(&loss_path, csv)?;
    println!("checkpoint {} (config {})", path.display(), ck.config_hash);
    println!("loss curve {}", loss_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Arc<Model<MlpDenoiser>>, String)> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let hash = content_hash(path)?;
    Ok((Arc::new(ck.model()?), hash))
}

fn apply_guidance_flags(s: &mut Settings, g: &GuidanceArgs) {
    let c = &mut s.engine.guidance;
    c.eta = g.eta.unwrap_or(c.eta);
    c.energy.lambda = g.lambda.unwrap_or(c.energy.lambda);
    c.energy.omega = g.omega.unwrap_or(c.energy.omega);
    c.energy.radius = g.barrier_radius.unwrap_or(c.energy.radius);
    c.min_grad_norm_sq = g.min_grad_norm_sq.unwrap_or(c.min_grad_norm_sq);
}

fn build_campaign(
    s: &mut Settings,
    scenario_name: &str,
    seeds: usize,
    first_seed: u64,
    guidance: &GuidanceArgs,
    engine: EngineKind,
) -> Result<Campaign> {
    apply_guidance_flags(s, guidance);
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut c = Campaign::new(
        scenario(scenario_name)?,
        engine,
        seed_range(first_seed, seeds),
        s.engine.clone(),
    );
    c.baseline = s.baseline.clone();
    c.clock = s.clock;
    c.validate()?;
    Ok(c)
}

fn summary_line(r: &Report) -> String {
    let dist = r
        .mean_min_obstacle_distance
        .map_or("-".into(), |d| format!("{d:.3}"));
    format!(
        "{:<9} success {:>5.1}% [{:.1}, {:.1}]  collision {:>3}  truncated {:>3}  diverged {:>3}  mean min dist {dist}",
        r.campaign.engine.to_string(),
        100.0 * r.success_rate,
        100.0 * r.success_ci.0,
        100.0 * r.success_ci.1,
        r.failures.collision,
        r.failures.truncation,
        r.failures.divergence,
    )
}

fn save_logs(dir: &Path, logs: &[EpisodeLog]) -> Result<()> {
    create_dir(dir)?;
    for log in logs {
        let path = dir.join(format!(
            "{}_{}_{}.jsonl",
            log.header.scenario, log.header.engine, log.header.seed
        ));
        log.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(mut s: Settings, out: &Path, a: EvalArgs) -> Result<()> {
    let c = &a.campaign;
    let name = c.scenario.as_deref().unwrap_or("static");
    let seeds = c.seeds.unwrap_or(60);
    let base = build_campaign(
        &mut s,
        name,
        seeds,
        c.first_seed,
        &c.guidance,
        EngineKind::Queue,
    )?;
    if a.check && a.engine != Engines::Both {
        return Err(usage("--check compares engines and needs --engine both"));
    }
    let (model, hash) = load_model(&c.checkpoint)?;
    let engines = match a.engine {
        Engines::Queue => vec![EngineKind::Queue],
        Engines::Baseline => vec![EngineKind::Baseline],
        Engines::Both => vec![EngineKind::Queue, EngineKind::Baseline],
    };
    let prefix = a.name.unwrap_or_else(|| base.scenario.name.clone());
    create_dir(out)?;
    let mut reports = Vec::new();
    for engine in engines {
        let campaign = base.with_engine(engine);
        let logs = run_campaign_logs(model.clone(), &campaign)?;
        if a.save_logs {
            save_logs(&out.join("logs"), &logs)?;
        }
        let report = Report::from_logs(&campaign, &logs, Some(hash.clone()));
        write(
            &out.join(format!("{prefix}_{engine}.json")),
            serde_json::to_vec_pretty(&report)?,
        )?;
        write(&out.join(format!("{prefix}_{engine}.csv")), report.to_csv())?;
        println!("{}", summary_line(&report));
        reports.push(report);
    }
    if let [queue, baseline] = reports.as_slice() {
        let test = sign_test(queue, baseline)?;
        write(
            &out.join(format!("{prefix}_paired.json")),
            serde_json::to_vec_pretty(&test)?,
        )?;
        println!(
            "paired: queue-only successes {}, baseline-only {}, one-sided sign test p = {:.4}",
            test.first_only, test.second_only, test.p_value
        );
        if a.check && !(queue.success_rate > baseline.success_rate && test.p_value < 0.05) {
            return Err(CheckFailed(format!(
                "queue {:.3} vs baseline {:.3}, p = {:.4}",
                queue.success_rate, baseline.success_rate, test.p_value
            ))
            .into());
        }
    }
    Ok(())
}

/// Number of adjacent pairs where `xs` goes the wrong way.
fn inversions(xs: &[f64], increasing: bool) -> usize {
    xs.windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

fn sweep(mut s: Settings, out: &Path, a: SweepArgs) -> Result<()> {
    let default_scenario = match a.axis {
        SweepAxis::MixRatio => "static",
        _ => "dynamic",
    };
    let name = a.scenario.as_deref().unwrap_or(default_scenario);
    let base = build_campaign(
        &mut s,
        name,
        a.seeds.unwrap_or(20),
        a.first_seed,
        &a.guidance,
        a.engine.into(),
    )?;
    let mut reports = Vec::with_capacity(a.values.len());
    match a.axis {
        SweepAxis::MixRatio => {
            if a.checkpoints.len() != a.values.len() {
                return Err(usage(format!(
                    "a mix_ratio sweep needs one --checkpoints entry per value ({} values, {} checkpoints)",
                    a.values.len(),
                    a.checkpoints.len()
                )));
            }
            for (value, path) in a.values.iter().zip(&a.checkpoints) {
                let ck = Checkpoint::load(path)
                    .with_context(|| format!("loading checkpoint {}", path.display()))?;
                if (ck.train.mix_ratio - value).abs() > 1e-9 {
                    log::warn!(
                        "{} was trained with mix ratio {}, not {value}",
                        path.display(),
                        ck.train.mix_ratio
                    );
                }
                let (model, hash) = load_model(path)?;
                reports.push(run_campaign(model, &base, Some(hash))?);
            }
        }
        axis => {
            let Some(path) = &a.checkpoint else {
                return Err(usage("this sweep needs --checkpoint"));
            };
            let (model, hash) = load_model(path)?;
            for &v in &a.values {
                reports.push(run_campaign(
                    model.clone(),
                    &sweep_point(&base, axis, v),
                    Some(hash.clone()),
                )?);
            }
        }
    }
    let axis_name = serde_json::to_value(a.axis)?
        .as_str()
        .unwrap_or("axis")
        .to_string();
    let csv = sweep_csv(a.axis, &a.values, &reports);
    write(&out.join(format!("sweep_{axis_name}.csv")), &csv)?;
    write(
        &out.join(format!("sweep_{axis_name}.json")),
        serde_json::to_vec_pretty(&reports)?,
    )?;
    print!("{csv}");
    if a.check {
        match a.axis {
            SweepAxis::Eta => {
                let d: Vec<f64> = reports
                    .iter()
                    .map(|r| r.mean_min_obstacle_distance.unwrap_or(f64::INFINITY))
                    .collect();
                if inversions(&d, true) > 0 {
                    return Err(CheckFailed(format!(
                        "minimum obstacle distance not non-decreasing: {d:?}"
                    ))
                    .into());
                }
            }
            SweepAxis::ObstacleSpeed => {
                let rates: Vec<f64> = reports.iter().map(|r| r.success_rate).collect();
                if inversions(&rates, false) > 1 {
                    return Err(
                        CheckFailed(format!("success not non-increasing: {rates:?}")).into(),
                    );
                }
            }
            SweepAxis::MixRatio => {
                return Err(usage("--check has no trend defined for mix_ratio sweeps"))
            }
        }
    }
    Ok(())
}

fn freq(s: Settings, out: &Path, a: FreqArgs) -> Result<()> {
    let (model, hash) = load_model(&a.checkpoint)?;
    let mut c = Campaign::new(
        scenario(&a.scenario)?,
        EngineKind::Queue,
        vec![0],
        s.engine.clone(),
    );
    c.baseline = s.baseline.clone();
    c.clock = s.clock;
    let cmp = compare_frequency(model, &c, a.ticks)?;
    let report = serde_json::json!({
        "checkpoint_hash": hash,
        "settings": s,
        "frequency": cmp,
    });
    write(&out.join("freq.json"), serde_json::to_vec_pretty(&report)?)?;
    for f in [&cmp.queue, &cmp.baseline] {
        println!(
            "{:<9} {:>5} ticks  Δp {:.4} ms/step  Δa {:.4} ms  modeled {:>9.1} Hz  measured {:>9.1} Hz",
            f.engine.to_string(),
            f.ticks,
            f.mean_step_ms,
            f.mean_exec_ms,
            f.modeled_hz,
            f.measured_hz
        );
    }
    println!(
        "ratio: measured {:.2}x, modeled {:.2}x",
        cmp.measured_ratio, cmp.modeled_ratio
    );
    if let Some(min) = a.check {
        if cmp.measured_ratio.is_nan() || cmp.measured_ratio < min {
            return Err(CheckFailed(format!(
                "measured ratio {:.2} below {min}",
                cmp.measured_ratio
            ))
            .into());
        }
    }
    Ok(())
}

fn serve(mut s: Settings, a: ServeArgs) -> Result<()> {
    apply_guidance_flags(&mut s, &a.guidance);
    let (model, _) = load_model(&a.checkpoint)?;
    let session = LiveSession::new(
        model,
        scenario(&a.scenario)?,
        a.engine.into(),
        s.engine.clone(),
        a.seed,
    )?;
    qplan_bridge::run(LiveEngine(session), &a.bridge.config())?;
    Ok(())
}

fn replay(s: Settings, a: ReplayArgs) -> Result<()> {
    let log =
        EpisodeLog::load(&a.log).with_context(|| format!("loading log {}", a.log.display()))?;
    if log.ticks.is_empty() {
        bail!("{} has no ticks to replay", a.log.display());
    }
    let mut guidance = s.engine.guidance.clone();
    guidance.eta = log.header.eta;
    let schedule = NoiseSchedule::from_config(&s.schedule)?;
    let cursor = ReplayCursor::new(log);
    let hello = cursor.hello(Role::Driver, guidance, schedule.horizon(), schedule.tau());
    qplan_bridge::run(ReplayEngine { cursor, hello }, &a.bridge.config())?;
    Ok(())
}
