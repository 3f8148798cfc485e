//! Experiment harness behind the `homefl` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use homefl::accountant::{self, DEFAULT_ORDERS};
use homefl::checkpoint;
use homefl::client::{self, ClientConfig, LocalData};
use homefl::data;
use homefl::dp::DpConfig;
use homefl::experiment::{self, format_epsilon, Arm, ArmResult, ExperimentConfig, Prepared};
use homefl::iot::{self, pipeline, IotConfig};
use homefl::nn::DEFAULT_LAYER_DIMS;
use homefl::server::{self, TrainingReport};
use homefl::train;
use homefl::transport::Connection;
use homefl::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUN: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "homefl", version, about = "Federated home-IoT experiments")]
pub struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's out_dir, else ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source-task model used for transfer learning.
    Pretrain,
    /// Listen for clients and run federated rounds.
    RunServer(RunServerArgs),
    /// Connect to a server and train on one data partition.
    RunClient(RunClientArgs),
    /// Accuracy with/without transfer learning and under each DP setting.
    Accuracy(AccuracyArgs),
    /// Control-path response times and client scaling.
    Latency(LatencyArgs),
    /// Privacy loss for each DP setting.
    DpSweep(DpSweepArgs),
}

#[derive(Debug, Args)]
pub struct RunServerArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    /// Clients to wait for (default: one per configured user).
    #[arg(long)]
    pub clients: Option<usize>,
    /// Source model from `pretrain`; its head is replaced for the target task.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunClientArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub server: String,
    /// User whose data this client trains on.
    #[arg(long)]
    pub partition: String,
    /// Defaults to the partition name.
    #[arg(long)]
    pub client_id: Option<String>,
    /// Read data from a CSV export instead of generating it; the partition
    /// names a `user` value in the file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Local DP noise multiplier; takes precedence over the server's setting.
    #[arg(long, requires = "dp_clip")]
    pub dp_sigma: Option<f64>,
    #[arg(long, requires = "dp_sigma")]
    pub dp_clip: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub dp_microbatches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    Memory,
    Tcp,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    #[arg(long, value_enum, default_value_t = Transport::Memory)]
    pub transport: Transport,
    /// Comma-separated subset of arms (tl, no_tl, dp_sigma_<σ>).
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    /// Also write a gnuplot script.
    #[arg(long)]
    pub gnuplot: bool,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[arg(long)]
    pub gnuplot: bool,
}

#[derive(Debug, Args)]
pub struct DpSweepArgs {
    /// Noise multipliers (default: the config's dp_arms).
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Clipping thresholds, one per σ or a single shared value.
    #[arg(long, value_delimiter = ',')]
    pub clips: Option<Vec<f64>>,
    /// Training examples per client.
    #[arg(long, default_value_t = 6920)]
    pub n: usize,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) if e.is_config() => EXIT_CONFIG,
            CliError::Core(_) => EXIT_RUN,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// The loaded config plus the raw text it came from.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    source: Option<(String, String)>,
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<LoadedConfig> {
    let (mut config, source) = match path {
        None => (ExperimentConfig::default(), None),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg: ExperimentConfig = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            } else {
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            };
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "config".into());
            (cfg, Some((name, text)))
        }
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(LoadedConfig { config, source })
}

fn prepare_out(cli: &Cli, loaded: &LoadedConfig) -> CliResult<PathBuf> {
    let out = cli
        .out
        .clone()
        .or_else(|| loaded.config.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    if let Some((name, text)) = &loaded.source {
        fs::write(out.join(format!("source_{name}")), text)?;
    }
    let effective = toml::to_string_pretty(&loaded.config)
        .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    fs::write(out.join("config.toml"), effective)?;
    Ok(out)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let loaded = load_config(cli.config.as_deref(), cli.seed)?;
    let out = prepare_out(cli, &loaded)?;
    let cfg = &loaded.config;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(cfg, &out),
        Command::RunServer(a) => cmd_run_server(cfg, a, &out),
        Command::RunClient(a) => cmd_run_client(cfg, a, &out),
        Command::Accuracy(a) => cmd_accuracy(cfg, a, &out),
        Command::Latency(a) => cmd_latency(cfg, cli.seed, a, &out),
        Command::DpSweep(a) => cmd_dp_sweep(cfg, a, &out),
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let spec = cfg.synth_spec();
    let source = data::source_task(&spec)?;
    let model = train::train_source_model(&source, spec.source_classes, &cfg.pretrain_config())?;
    let acc = homefl::nn::accuracy(&model, &source)?;
    let path = out.join("source_model.json");
    checkpoint::save(&model.quantized(), &path)?;
    println!(
        "pretrained {} classes on {} examples, training accuracy {acc:.4}; wrote {}",
        spec.source_classes,
        source.len(),
        path.display()
    );
    Ok(())
}

fn prepared_with_checkpoint(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> CliResult<Prepared> {
    let mut prepared = Prepared::new(cfg)?;
    if let Some(p) = ckpt {
        let source = checkpoint::load(p)?;
        if source.input_dim() != cfg.data.feature_dim {
            return Err(CliError::Config(format!(
                "checkpoint expects {} features, data has {}",
                source.input_dim(),
                cfg.data.feature_dim
            )));
        }
        prepared.transfer_model =
            train::swap_head(&source, DEFAULT_LAYER_DIMS[3], cfg.pretrain_config().seed).quantized();
    }
    Ok(prepared)
}

fn write_training_report(report: &TrainingReport, out: &Path, stem: &str) -> CliResult<()> {
    report.write_csv(BufWriter::new(fs::File::create(out.join(format!("{stem}_rounds.csv")))?))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Core(Error::Io(e.into())))?;
    fs::write(out.join(format!("{stem}_report.json")), json)?;
    Ok(())
}

pub fn cmd_run_server(cfg: &ExperimentConfig, args: &RunServerArgs, out: &Path) -> CliResult<()> {
    let prepared = prepared_with_checkpoint(cfg, args.checkpoint.as_deref())?;
    let expected = args.clients.unwrap_or(prepared.partitions.len());
    if expected == 0 {
        return Err(CliError::Config("--clients must be >= 1".into()));
    }
    let listener = TcpListener::bind(&args.listen)?;
    println!("listening on {}, waiting for {expected} clients", listener.local_addr()?);
    let mut conns = Vec::with_capacity(expected);
    while conns.len() < expected {
        let (stream, addr) = listener.accept()?;
        log::info!("connection from {addr}");
        conns.push(Connection::tcp(stream)?);
    }
    let server_cfg = cfg.server_config(cfg.tl_enabled, cfg.dp);
    let report = server::run_rounds(&server_cfg, prepared.initial_model(cfg.tl_enabled), &prepared.eval, conns)?;
    write_training_report(&report, out, "server")?;
    checkpoint::save(&report.final_model, &out.join("global_model.json"))?;
    for r in &report.rounds {
        println!("round {:>2}: global accuracy {:.4} ({} clients)", r.round, r.global_accuracy, r.participants);
    }
    Ok(())
}

pub fn cmd_run_client(cfg: &ExperimentConfig, args: &RunClientArgs, out: &Path) -> CliResult<()> {
    let client_id = args.client_id.clone().unwrap_or_else(|| args.partition.clone());
    let local = match &args.data {
        Some(path) => {
            let batches = data::read_csv(fs::File::open(path)?)?;
            let batch = batches.get(&args.partition).ok_or_else(|| {
                CliError::Config(format!("no rows for user '{}' in {}", args.partition, path.display()))
            })?;
            LocalData::split(batch, cfg.client_seed(&client_id))?
        }
        None => {
            let parts = data::generate(&cfg.synth_spec())?;
            let p = parts
                .get(&args.partition)
                .ok_or_else(|| CliError::Config(format!("unknown partition '{}'", args.partition)))?;
            LocalData::from_partition(p)
        }
    };
    let dp = match (args.dp_sigma, args.dp_clip) {
        (Some(s), Some(c)) => Some(DpConfig {
            num_microbatches: args.dp_microbatches,
            ..DpConfig::new(s, c)
        }),
        _ => None,
    };
    let config = ClientConfig {
        client_id: client_id.clone(),
        data_partition: args.partition.clone(),
        dp,
        tl_enabled: cfg.tl_enabled,
        seed: cfg.client_seed(&client_id),
    };
    let stream = TcpStream::connect(&args.server)?;
    let report = client::run_client(&config, &local, Connection::tcp(stream)?)?;
    let mut csv = String::from("round,loss,accuracy,global_accuracy\n");
    for r in &report.rounds {
        let g = r.global_accuracy.map(|g| format!("{g:.6}")).unwrap_or_default();
        writeln!(csv, "{},{:.6},{:.6},{g}", r.round, r.loss, r.accuracy).expect("write to string");
        println!("round {:>2}: local accuracy {:.4}", r.round, r.accuracy);
    }
    fs::write(out.join(format!("client_{client_id}.csv")), csv)?;
    Ok(())
}

/// Runs one arm with a server and client threads over loopback TCP.
pub fn run_arm_tcp(cfg: &ExperimentConfig, prepared: &Prepared, arm: &Arm) -> homefl::Result<ArmResult> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let clients = prepared.clients(cfg, arm.tl_enabled);
    let sizes: Vec<usize> = clients.iter().map(|(_, d)| d.train.len()).collect();
    let handles: Vec<_> = clients
        .into_iter()
        .map(|(c, d)| {
            thread::spawn(move || -> homefl::Result<()> {
                let conn = Connection::tcp(TcpStream::connect(addr)?)?;
                client::run_client(&c, &d, conn).map(|_| ())
            })
        })
        .collect();
    let mut conns = Vec::new();
    for _ in 0..handles.len() {
        conns.push(Connection::tcp(listener.accept()?.0)?);
    }
    let initial = prepared.initial_model(arm.tl_enabled);
    let report = server::run_rounds(&cfg.server_config(arm.tl_enabled, arm.dp), initial, &prepared.eval, conns)?;
    for h in handles {
        if let Ok(Err(e)) = h.join() {
            log::warn!("client ended with an error: {e}");
        }
    }
    let epsilon = experiment::epsilon_by_round(&cfg.plan, cfg.rounds, arm.dp.as_ref(), &sizes, initial.num_layers())?;
    Ok(ArmResult {
        arm: arm.clone(),
        report,
        epsilon,
    })
}

#[derive(Serialize)]
struct ArmSummary<'a> {
    arm: &'a str,
    tl_enabled: bool,
    dp: Option<DpConfig>,
    final_epsilon: Option<f64>,
    report: &'a TrainingReport,
}

pub fn cmd_accuracy(cfg: &ExperimentConfig, args: &AccuracyArgs, out: &Path) -> CliResult<()> {
    let prepared = Prepared::new(cfg)?;
    let mut arms = experiment::default_arms(cfg);
    if let Some(sel) = &args.arms {
        for name in sel {
            if !arms.iter().any(|a| &a.name == name) {
                return Err(CliError::Config(format!("unknown arm '{name}'")));
            }
        }
        arms.retain(|a| sel.contains(&a.name));
    }
    let mut results = Vec::new();
    let mut failure = None;
    for arm in &arms {
        let res = match args.transport {
            Transport::Memory => experiment::run_arm(cfg, &prepared, arm),
            Transport::Tcp => run_arm_tcp(cfg, &prepared, arm),
        };
        match res {
            Ok(r) => {
                let accs: Vec<String> = r.report.rounds.iter().map(|x| format!("{:.3}", x.global_accuracy)).collect();
                let eps = r.epsilon.last().map(|e| format_epsilon(*e)).unwrap_or_else(|| "-".into());
                println!("{:<16} eps {:>10}  {}", arm.name, eps, accs.join(" "));
                results.push(r);
            }
            Err(e) => {
                // Keep what finished; report the failure after writing it.
                log::error!("arm {} failed: {e}", arm.name);
                failure = Some(e);
                break;
            }
        }
    }
    experiment::write_accuracy_csv(&results, BufWriter::new(fs::File::create(out.join("accuracy.csv"))?))?;
    let summaries: Vec<ArmSummary> = results
        .iter()
        .map(|r| ArmSummary {
            arm: &r.arm.name,
            tl_enabled: r.arm.tl_enabled,
            dp: r.arm.dp,
            final_epsilon: r.epsilon.last().copied().filter(|e| e.is_finite()),
            report: &r.report,
        })
        .collect();
    let json = serde_json::to_string_pretty(&summaries).map_err(|e| CliError::Core(Error::Io(e.into())))?;
    fs::write(out.join("accuracy_report.json"), json)?;
    if args.gnuplot {
        let mut gp = String::from(
            "set datafile separator ','\nset key bottom right\nset xlabel 'round'\nset ylabel 'global accuracy'\nplot ",
        );
        let plots: Vec<String> = results
            .iter()
            .map(|r| {
                format!(
                    "'accuracy.csv' using 2:(strcol(1) eq '{0}' ? $3 : 1/0) with linespoints title '{0}'",
                    r.arm.name
                )
            })
            .collect();
        gp.push_str(&plots.join(", \\\n     "));
        gp.push('\n');
        fs::write(out.join("accuracy.gp"), gp)?;
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn load_iot_config(cfg: &ExperimentConfig, seed: Option<u64>) -> CliResult<(IotConfig, String)> {
    let text = match &cfg.latency_profile {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read latency config {p}: {e}")))?,
        None => iot::DEFAULT_CONFIG_TOML.to_string(),
    };
    let mut iot_cfg = IotConfig::from_toml(&text)?;
    if let Some(s) = seed {
        iot_cfg.seed = s;
    }
    Ok((iot_cfg, text))
}

pub fn cmd_latency(cfg: &ExperimentConfig, seed: Option<u64>, args: &LatencyArgs, out: &Path) -> CliResult<()> {
    let (iot_cfg, text) = load_iot_config(cfg, seed)?;
    fs::write(out.join("latency_config.toml"), text)?;
    let report = iot::run_latency(&iot_cfg)?;
    pipeline::write_traces_csv(&report.breakdown, BufWriter::new(fs::File::create(out.join("breakdown.csv"))?))?;
    pipeline::write_traces_csv(&report.comparison, BufWriter::new(fs::File::create(out.join("paths.csv"))?))?;
    iot::write_scaling_csv(&report.scaling, BufWriter::new(fs::File::create(out.join("scaling.csv"))?))?;
    println!("{:<16} {:<20} {:>8}", "path", "activity", "total_s");
    for t in report.breakdown.iter().chain(&report.comparison) {
        println!(
            "{:<16} {:<20} {:>8}",
            t.path.as_str(),
            t.activity.as_str(),
            pipeline::format_seconds(t.total_us())
        );
    }
    if args.gnuplot {
        let gp = "set datafile separator ','\nset key top left\nset xlabel 'clients'\nset ylabel 'response time (s)'\n\
                  plot 'scaling.csv' using 1:2 skip 1 with lines title 'FL', \\\n     'scaling.csv' using 1:3 skip 1 with lines title 'CL'\n";
        fs::write(out.join("scaling.gp"), gp)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub clip: f64,
    pub steps: u64,
    pub q: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub optimal_order: Option<f64>,
}

/// ε for each (σ, C) with `n` examples per client over the config's rounds.
pub fn dp_sweep(
    cfg: &ExperimentConfig,
    pairs: &[(f64, f64)],
    n: usize,
    rounds: u32,
    delta: f64,
) -> CliResult<Vec<SweepRow>> {
    if pairs.is_empty() {
        return Err(CliError::Config("need at least one sigma".into()));
    }
    if n == 0 {
        return Err(CliError::Config("--n must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for &(sigma, clip) in pairs {
        let dp = DpConfig {
            delta,
            ..DpConfig::new(sigma, clip)
        };
        dp.validate()?;
        let steps = cfg.plan.total_steps(rounds, n, DEFAULT_LAYER_DIMS.len() - 1, Some(&dp));
        let q = (cfg.plan.batch_size as f64 / n as f64).min(1.0);
        let (epsilon, optimal_order) = if steps == 0 {
            (0.0, None)
        } else {
            let spend = accountant::compute_epsilon(q, sigma, steps, delta, &DEFAULT_ORDERS)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let order = (!spend.is_unbounded()).then_some(spend.optimal_order);
            (spend.epsilon, order)
        };
        rows.push(SweepRow {
            sigma,
            clip,
            steps,
            q,
            delta,
            epsilon,
            optimal_order,
        });
    }
    rows.sort_by(|a, b| a.sigma.total_cmp(&b.sigma).then(a.clip.total_cmp(&b.clip)));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("sigma,clip,steps,q,delta,epsilon,optimal_order\n");
    for r in rows {
        let order = r.optimal_order.map(|o| o.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{order}",
            r.sigma,
            r.clip,
            r.steps,
            r.q,
            r.delta,
            format_epsilon(r.epsilon)
        )
        .expect("write to string");
    }
    s
}

pub fn cmd_dp_sweep(cfg: &ExperimentConfig, args: &DpSweepArgs, out: &Path) -> CliResult<()> {
    let pairs: Vec<(f64, f64)> = match &args.sigmas {
        None => cfg.dp_arms.iter().map(|d| (d.noise_multiplier, d.clipping_threshold)).collect(),
        Some(sigmas) => {
            let clips = args.clips.clone().unwrap_or_else(|| vec![1.0]);
            if clips.len() != 1 && clips.len() != sigmas.len() {
                return Err(CliError::Config("--clips needs one value or one per sigma".into()));
            }
            sigmas
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, if clips.len() == 1 { clips[0] } else { clips[i] }))
                .collect()
        }
    };
    let rounds = args.rounds.unwrap_or(cfg.rounds);
    let delta = args.delta.unwrap_or(DpConfig::DEFAULT_DELTA);
    let rows = dp_sweep(cfg, &pairs, args.n, rounds, delta)?;
    let csv = sweep_csv(&rows);
    fs::write(out.join("dp_sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
