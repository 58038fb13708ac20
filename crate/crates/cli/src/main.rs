//! `revbio`: simulate corpora, evaluate instance pools, run impersonation
//! scenarios, manage a registry store and serve the HTTP API.

mod failure;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use revbio_core::eval::{
    calibrate_held_out, consistency_report, corpus_protocol, cross_model_distributions,
    enroll_population, impersonation_experiment, prepare_scenario_system, relationship_matrix,
    run_preset, ConsistencyReport, CrossModelStudy, ImpersonationReport, RelationshipMatrix,
    Scenario, ScenarioPreset, ScenarioSetup,
};
use revbio_core::pairs::DEFAULT_IMPOSTOR_CAP;
use revbio_core::registry::Store;
use revbio_core::sim::{calibrate_sigma, generate_corpus};
use revbio_core::{
    Corpus, ExtractorPort, FileExtractor, ModelInstanceId, SimWorld, SimWorldConfig, ThresholdMode,
    ThresholdSpec,
};
use revbio_service::{open_system, serve, shutdown_signal, AppState, VectorOnly};

use failure::{Failure, EXIT_PORT_IN_USE};

const CORPUS_FILE: &str = "corpus.jsonl";
const WORLD_FILE: &str = "world.json";

#[derive(Debug, Parser)]
#[command(
    name = "revbio",
    version,
    about = "Revocable biometric templates over interchangeable matcher instances"
)]
struct Cli {
    /// Master seed. When omitted a random seed is drawn and printed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: a directory for `simulate`, a file otherwise (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-instance corpus (corpus.jsonl + world.json).
    Simulate(SimArgs),
    /// Find the noise scale that gives a target same-instance d-prime.
    Calibrate(SimArgs),
    /// Instance relationship matrix at an FMR target.
    Matrix(MatrixArgs),
    /// Per-instance consistency and cross-model incompatibility.
    Report(ReportArgs),
    /// Theft / revocation / replay experiment on a synthetic population.
    Scenario(ScenarioArgs),
    /// Serve the HTTP API over a durable store.
    Serve(ServeArgs),
    /// Registry store maintenance.
    #[command(subcommand)]
    Store(StoreCommand),
}

#[derive(Debug, Clone, Args)]
struct SimArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 200)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Latent noise scale; calibrated to --target-dprime when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 7.0)]
    target_dprime: f64,
    /// Per-group noise multipliers, e.g. `g1=1.0,g2=1.3`.
    #[arg(long, value_parser = parse_groups)]
    group_multipliers: Option<Groups>,
}

#[derive(Debug, Clone)]
struct Groups(Vec<(String, f64)>);

#[derive(Debug, Clone, Args)]
struct CorpusArgs {
    /// Embedding records to evaluate; a world.json beside it adds provenance
    /// and groups. When omitted a corpus is simulated from the flags below.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = DEFAULT_IMPOSTOR_CAP)]
    impostor_cap: usize,
}

#[derive(Debug, Args)]
struct MatrixArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 1e-4)]
    fmr: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Reference instance for the cross-model study (default: the first).
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long, value_parser = parse_preset, default_value = "steal-revoke-replay")]
    preset: ScenarioPreset,
    /// Custom event list (JSON); replaces the preset.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    identities: usize,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 7.0)]
    target_dprime: f64,
    /// FMR target for the per-instance thresholds.
    #[arg(long, default_value_t = 1e-4)]
    fmr: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "RBT_STORE_DIR", default_value = "revbio-store")]
    store: PathBuf,
    /// 0 binds an ephemeral port.
    #[arg(long, env = "RBT_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Bearer token for /api/v1/admin/*; admin endpoints are disabled without one.
    #[arg(long, env = "RBT_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: Option<String>,
    #[arg(long, env = "RBT_THRESHOLD_MODE", default_value = "per-instance")]
    threshold_mode: ThresholdMode,
    /// Synthetic world (world.json) that resolves capture descriptors.
    #[arg(long, conflicts_with = "embeddings")]
    world: Option<PathBuf>,
    /// Precomputed embedding records that resolve capture descriptors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Template dimension when serving raw vectors only.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// FMR target for thresholds calibrated when bootstrapping an empty store.
    #[arg(long, default_value_t = 1e-4)]
    fmr: f64,
    /// Held-out synthetic identities used to calibrate a world's thresholds.
    #[arg(long, default_value_t = ScenarioSetup::DEFAULT_CALIBRATION_IDENTITIES)]
    calibration_identities: usize,
}

#[derive(Debug, Subcommand)]
enum StoreCommand {
    /// Write a snapshot and truncate the journal.
    Snapshot {
        #[arg(long, env = "RBT_STORE_DIR")]
        store: PathBuf,
    },
    /// Print instances and identity bindings (never templates).
    Inspect {
        #[arg(long, env = "RBT_STORE_DIR")]
        store: PathBuf,
    },
}

fn parse_groups(s: &str) -> Result<Groups, String> {
    s.split(',')
        .map(|part| {
            let (label, m) = part
                .split_once('=')
                .ok_or_else(|| format!("expected label=multiplier, got {part:?}"))?;
            let m: f64 = m.trim().parse().map_err(|e| format!("{part:?}: {e}"))?;
            Ok((label.trim().to_owned(), m))
        })
        .collect::<Result<_, _>>()
        .map(Groups)
}

fn parse_preset(s: &str) -> Result<ScenarioPreset, String> {
    s.parse()
}

fn resolve_seed(flag: Option<u64>, fallback: Option<u64>) -> u64 {
    flag.or(fallback).unwrap_or_else(|| {
        let seed = rand::random::<u64>();
        eprintln!("seed: {seed} (random; pass --seed {seed} to reproduce)");
        seed
    })
}

fn check_fmr(fmr: f64) -> Result<(), Failure> {
    if fmr > 0.0 && fmr < 1.0 {
        Ok(())
    } else {
        Err(Failure::validation(format!(
            "--fmr must lie in (0, 1), got {fmr}"
        )))
    }
}

impl SimArgs {
    /// Validated world config; the noise scale is calibrated if not given.
    fn world_config(&self, seed: u64) -> Result<SimWorldConfig, Failure> {
        let mut cfg = SimWorldConfig::new(
            self.instances,
            self.identities,
            self.images,
            self.sigma.unwrap_or(1.0),
            seed,
        )
        .with_dim(self.dim);
        if let Some(Groups(g)) = &self.group_multipliers {
            cfg = cfg.with_groups(g.iter().cloned());
        }
        cfg.validate()?;
        if self.sigma.is_none() {
            let outcome = calibrate_sigma(&cfg, self.target_dprime)?;
            log::info!(
                "calibrated sigma {:.6} (d-prime {:.4})",
                outcome.sigma,
                outcome.d_prime
            );
            cfg.sigma = outcome.sigma;
        }
        Ok(cfg)
    }
}

impl CorpusArgs {
    /// The corpus and the seed for pair sampling.
    fn load(&self, seed: Option<u64>) -> Result<(Corpus, u64), Failure> {
        match &self.corpus {
            Some(path) => {
                let mut corpus = Corpus::read_jsonl(BufReader::new(File::open(path)?))?;
                let world = path.with_file_name(WORLD_FILE);
                if world.exists() {
                    corpus.attach_config(&SimWorldConfig::from_json(&fs::read_to_string(world)?)?);
                }
                let seed = resolve_seed(seed, corpus.seed());
                Ok((corpus, seed))
            }
            None => {
                let seed = resolve_seed(seed, None);
                let world = SimWorld::new(self.sim.world_config(seed)?)?;
                Ok((Corpus::synthesize(&world)?, seed))
            }
        }
    }
}

struct Output<'a> {
    path: Option<&'a Path>,
}

impl Output<'_> {
    fn write(&self, text: &str) -> Result<(), Failure> {
        match self.path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(p, text)?;
            }
            None => {
                let mut out = io::stdout().lock();
                out.write_all(text.as_bytes())?;
                if !text.ends_with('\n') {
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    /// Summary lines go to stdout when the report went to a file, else stderr.
    fn summary(&self, line: &str) {
        if self.path.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn simulate(cli: &Cli, args: &SimArgs) -> Result<(), Failure> {
    let cfg = args.world_config(resolve_seed(cli.seed, None))?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let world = SimWorld::new(cfg.clone())?;
    let corpus_path = dir.join(CORPUS_FILE);
    let mut w = BufWriter::new(File::create(&corpus_path)?);
    let records = generate_corpus(&world, &mut w)?;
    w.flush()?;
    fs::write(dir.join(WORLD_FILE), cfg.to_json_pretty() + "\n")?;
    println!(
        "wrote {records} records to {} (sigma {:.6}, seed {}, config digest {})",
        corpus_path.display(),
        cfg.sigma,
        cfg.master_seed,
        cfg.digest()
    );
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport {
    sigma: f64,
    d_prime: f64,
    target_dprime: f64,
    iterations: usize,
    seed: u64,
    dim: usize,
}

fn calibrate(cli: &Cli, args: &SimArgs) -> Result<(), Failure> {
    let seed = resolve_seed(cli.seed, None);
    let mut probe = args.clone();
    probe.sigma = Some(1.0);
    let cfg = probe.world_config(seed)?;
    let o = calibrate_sigma(&cfg, args.target_dprime)?;
    let report = CalibrationReport {
        sigma: o.sigma,
        d_prime: o.d_prime,
        target_dprime: args.target_dprime,
        iterations: o.iterations,
        seed,
        dim: cfg.dim,
    };
    let text = match cli.format {
        Format::Json => to_json(&report),
        Format::Csv => format!(
            "sigma,d_prime,target_dprime,iterations,seed,dim\n{},{},{},{},{},{}\n",
            report.sigma,
            report.d_prime,
            report.target_dprime,
            report.iterations,
            report.seed,
            report.dim
        ),
    };
    let out = Output {
        path: cli.out.as_deref(),
    };
    out.write(&text)?;
    out.summary(&format!(
        "sigma {:.6} gives d-prime {:.4}",
        o.sigma, o.d_prime
    ));
    Ok(())
}

fn matrix(cli: &Cli, args: &MatrixArgs) -> Result<(), Failure> {
    check_fmr(args.fmr)?;
    let (corpus, seed) = args.corpus.load(cli.seed)?;
    let protocol = corpus_protocol(&corpus, args.corpus.impostor_cap, seed);
    let m: RelationshipMatrix = relationship_matrix(&corpus, &protocol, args.fmr)?;
    let out = Output {
        path: cli.out.as_deref(),
    };
    out.write(&match cli.format {
        Format::Json => m.to_json() + "\n",
        Format::Csv => m.to_csv(),
    })?;
    let s = &m.summary;
    out.summary(&format!(
        "{} instances, {} off-diagonal cells: min diagonal threshold {:.6}, max off-diagonal genuine {:.6}, \
         worst accept rate {:.3e}",
        m.n,
        m.off_diagonal.len(),
        s.min_diagonal_threshold,
        s.max_off_diagonal_genuine,
        s.worst_accept_rate
    ));
    Ok(())
}

#[derive(Serialize)]
struct FullReport {
    consistency: ConsistencyReport,
    cross_model: CrossModelStudy,
}

fn report(cli: &Cli, args: &ReportArgs) -> Result<(), Failure> {
    if args.folds < 2 {
        return Err(Failure::validation(format!(
            "--folds must be at least 2, got {}",
            args.folds
        )));
    }
    let (corpus, seed) = args.corpus.load(cli.seed)?;
    let protocol = corpus_protocol(&corpus, args.corpus.impostor_cap, seed);
    let consistency = consistency_report(&corpus, &protocol, args.folds)?;
    let reference = match &args.reference {
        Some(r) => ModelInstanceId::new(r.clone()),
        None => corpus.instances()[0].clone(),
    };
    let alternatives: Vec<ModelInstanceId> = corpus
        .instances()
        .iter()
        .filter(|i| **i != reference)
        .cloned()
        .collect();
    let cross_model =
        cross_model_distributions(&corpus, &protocol, &reference, &alternatives, false)?;
    let worst_cross = cross_model
        .alternatives
        .iter()
        .map(|a| a.d_prime.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let out = Output {
        path: cli.out.as_deref(),
    };
    out.write(&match cli.format {
        Format::Json => to_json(&FullReport {
            consistency: consistency.clone(),
            cross_model,
        }),
        Format::Csv => consistency.to_csv(),
    })?;
    out.summary(&format!(
        "d-prime {:.4} ± {:.4} ({:.2}% of mean); accuracy {:.3}% ± {:.3}; max cross-model d-prime vs {reference} {:.4}",
        consistency.d_prime.mean,
        consistency.d_prime.std,
        100.0 * consistency.d_prime.relative_std(),
        consistency.accuracy.mean,
        consistency.accuracy.std,
        worst_cross
    ));
    Ok(())
}

fn scenario_csv(r: &ImpersonationReport) -> String {
    let mut s = String::from("metric,value\n");
    let rows: [(&str, String); 10] = [
        ("identities", r.identities.to_string()),
        ("revocations", r.revocations.to_string()),
        ("attacker_attempts", r.attacker_attempts.to_string()),
        ("attacker_accepts", r.attacker_accepts.to_string()),
        (
            "legitimate_before_accepts",
            r.legitimate_before_accepts.to_string(),
        ),
        (
            "legitimate_after_accepts",
            r.legitimate_after_accepts.to_string(),
        ),
        (
            "legitimate_before_rate",
            r.legitimate_before_rate.to_string(),
        ),
        ("legitimate_after_rate", r.legitimate_after_rate.to_string()),
        (
            "non_interference_checks",
            r.non_interference_checks.to_string(),
        ),
        (
            "non_interference_violations",
            r.non_interference_violations.to_string(),
        ),
    ];
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn scenario(cli: &Cli, args: &ScenarioArgs) -> Result<(), Failure> {
    check_fmr(args.fmr)?;
    if args.identities == 0 {
        return Err(Failure::validation("--identities must be positive"));
    }
    // Parse the event file before any expensive work.
    let custom = match &args.scenario {
        Some(p) => Some(Scenario::from_json(&fs::read_to_string(p)?)?),
        None => None,
    };
    let seed = resolve_seed(cli.seed, None);
    let setup = ScenarioSetup::calibrated(
        args.instances,
        args.identities,
        args.dim,
        seed,
        args.target_dprime,
        args.fmr,
    )?;
    let report = match custom {
        None => run_preset(&setup, args.preset)?,
        Some(sc) => {
            let system = prepare_scenario_system(&setup)?;
            enroll_population(&system, &setup.scenario_identity_names())?;
            let mut r = impersonation_experiment(&system, &sc)?;
            r.seed = Some(seed);
            r.config_digest = Some(setup.world.digest());
            r
        }
    };
    let out = Output {
        path: cli.out.as_deref(),
    };
    out.write(&match cli.format {
        Format::Json => to_json(&report),
        Format::Csv => scenario_csv(&report),
    })?;
    out.summary(&format!(
        "attacker accepts {}/{}; legitimate accepts after {}/{}; non-interference violations {}/{}",
        report.attacker_accepts,
        report.attacker_attempts,
        report.legitimate_after_accepts,
        report.identities,
        report.non_interference_violations,
        report.non_interference_checks
    ));
    Ok(())
}

fn bootstrap_thresholds(
    args: &ServeArgs,
    world: Option<&SimWorldConfig>,
    seed: Option<u64>,
) -> Result<Vec<(ModelInstanceId, Option<ThresholdSpec>)>, Failure> {
    if let Some(cfg) = world {
        let t = calibrate_held_out(cfg, args.calibration_identities, args.fmr)?;
        return Ok(t.into_iter().map(|(id, spec)| (id, Some(spec))).collect());
    }
    if let Some(path) = &args.embeddings {
        let corpus = Corpus::read_jsonl(BufReader::new(File::open(path)?))?;
        if corpus.instances().len() < 2 {
            log::warn!("a single instance cannot be evaluated; registering it without a threshold");
            return Ok(corpus
                .instances()
                .iter()
                .map(|id| (id.clone(), None))
                .collect());
        }
        let protocol = corpus_protocol(&corpus, DEFAULT_IMPOSTOR_CAP, resolve_seed(seed, None));
        let m = relationship_matrix(&corpus, &protocol, args.fmr)?;
        return Ok(m
            .diagonal
            .into_iter()
            .map(|d| (d.instance, Some(d.fmr_threshold)))
            .collect());
    }
    Ok(Vec::new())
}

fn serve_cmd(cli: &Cli, args: &ServeArgs) -> Result<(), Failure> {
    check_fmr(args.fmr)?;
    let mut world_cfg = None;
    let extractor: Arc<dyn ExtractorPort> = if let Some(p) = &args.world {
        let cfg = SimWorldConfig::from_json(&fs::read_to_string(p)?)?;
        world_cfg = Some(cfg.clone());
        Arc::new(SimWorld::new(cfg)?)
    } else if let Some(p) = &args.embeddings {
        Arc::new(FileExtractor::from_reader(BufReader::new(File::open(p)?))?)
    } else {
        if args.dim == 0 {
            return Err(Failure::validation("--dim must be positive"));
        }
        Arc::new(VectorOnly { dim: args.dim })
    };

    // Bind before touching the store so a busy port fails fast.
    let addr = SocketAddr::new(args.bind, args.port);
    let std_listener = std::net::TcpListener::bind(addr).map_err(|e| {
        if e.kind() == io::ErrorKind::AddrInUse {
            Failure::new(
                EXIT_PORT_IN_USE,
                format!("port {} is already in use", args.port),
            )
        } else {
            Failure::from(e)
        }
    })?;
    std_listener.set_nonblocking(true)?;

    let system = open_system(&args.store, extractor, args.threshold_mode)?;
    if system.status().instances_registered == 0 {
        let thresholds = bootstrap_thresholds(args, world_cfg.as_ref(), cli.seed)?;
        for (id, spec) in thresholds {
            system.register_instance(id, spec)?;
        }
        if system.status().instances_registered > 0 {
            system.checkpoint()?;
            log::info!(
                "bootstrapped {} instances",
                system.status().instances_registered
            );
        }
    }
    let state = AppState::new(Arc::new(system), args.admin_token.clone());

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(std_listener)?;
        let local = listener.local_addr()?;
        println!("listening on http://{local}");
        println!("port {}", local.port());
        io::stdout().flush()?;
        serve(listener, state, shutdown_signal()).await
    })?;
    Ok(())
}

#[derive(Serialize)]
struct IdentityRow {
    identity: String,
    instance: ModelInstanceId,
    enrolled_at: u64,
    revocation_count: usize,
}

fn store_cmd(cli: &Cli, cmd: &StoreCommand) -> Result<(), Failure> {
    let dir = match cmd {
        StoreCommand::Snapshot { store } | StoreCommand::Inspect { store } => store,
    };
    if !dir.is_dir() {
        return Err(Failure::validation(format!(
            "no store directory at {}",
            dir.display()
        )));
    }
    let (mut store, registry) = Store::open(dir, 0, ThresholdMode::default())?;
    match cmd {
        StoreCommand::Snapshot { .. } => {
            store.checkpoint(&registry)?;
            println!(
                "snapshot written at seq {} to {}",
                registry.seq(),
                store.snapshot_path().display()
            );
        }
        StoreCommand::Inspect { .. } => {
            let rows: Vec<IdentityRow> = registry
                .identity_ids()
                .into_iter()
                .map(|id| {
                    let r = registry.lookup(id).expect("listed identity exists");
                    IdentityRow {
                        identity: id.to_owned(),
                        instance: r.active_instance.clone(),
                        enrolled_at: r.enrolled_at,
                        revocation_count: r.revocation_history.len(),
                    }
                })
                .collect();
            let text = match cli.format {
                Format::Json => to_json(&serde_json::json!({
                    "dimension": registry.dim(),
                    "threshold_mode": registry.threshold_mode(),
                    "shared_threshold": registry.shared_threshold(),
                    "seq": registry.seq(),
                    "pending_journal_entries": store.pending(),
                    "instances": registry.instances(),
                    "identities": rows,
                })),
                Format::Csv => {
                    let mut s = String::from("identity,instance,enrolled_at,revocation_count\n");
                    for r in &rows {
                        s.push_str(&format!(
                            "{},{},{},{}\n",
                            r.identity, r.instance, r.enrolled_at, r.revocation_count
                        ));
                    }
                    s
                }
            };
            Output {
                path: cli.out.as_deref(),
            }
            .write(&text)?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Calibrate(a) => calibrate(cli, a),
        Command::Matrix(a) => matrix(cli, a),
        Command::Report(a) => report(cli, a),
        Command::Scenario(a) => scenario(cli, a),
        Command::Serve(a) => serve_cmd(cli, a),
        Command::Store(c) => store_cmd(cli, c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
