//! `dgate`: run D-GATE parties on a real network, run simulated scenarios,
//! and analyse calibration data.

use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use dgate::analysis::{quartiles_by_repetitions, read_rows, rows_of, write_quartiles, write_rows, Quartiles};
use dgate::net::{
    run_processor_session, serve_provider_session, spawn_geoclient, spawn_responder, Deployment,
    TcpConnector,
};
use dgate::probe::{probe_samples, resolve, ProbeSettings, UdpTransport, DEFAULT_PROBE_PORT};
use dgate::sim::{
    bundled_scenario, calibration_min_rtts, run_scenario, OverheadKind, ScenarioConfig,
    BUNDLED_SCENARIOS,
};

#[derive(Parser)]
#[command(name = "dgate", version, about = "Geolocation and time attestation for usage control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a GeoClient from a deployment file.
    Geoclient(GeoclientArgs),
    /// Serve processor sessions as the data provider.
    Provider(ProviderArgs),
    /// Run one processor session against the provider.
    Processor(ProcessorArgs),
    /// Run a simulated scenario (bundled name or TOML file).
    Simulate(SimulateArgs),
    /// Simulate a calibration campaign and write per-run minima as CSV.
    Calibrate(CalibrateArgs),
    /// Quartiles of per-run minima grouped by repetition count.
    Analyze(AnalyzeArgs),
    /// Measure the minimum RTT to a ping responder.
    Probe(ProbeArgs),
    /// Echo pings until killed.
    Respond(RespondArgs),
}

#[derive(Args)]
struct GeoclientArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    name: String,
    /// Repetitions per neighbour in each sweep.
    #[arg(long, default_value_t = 1000)]
    repetitions: u32,
    #[arg(long, default_value_t = 250)]
    timeout_ms: u64,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the port of the configured listen address.
    #[arg(long)]
    port: Option<u16>,
    /// Sessions to serve before exiting; 0 serves forever.
    #[arg(long, default_value_t = 1)]
    sessions: u32,
}

#[derive(Args)]
struct ProcessorArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for released outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the per-sample timeout.
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Bundled scenario name or path to a scenario file.
    scenario: Option<String>,
    /// Scenario file; same as passing a path positionally.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the repetitions in the usage constraints.
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// List bundled scenarios and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// sgx-like, sev-like, none-intel, none-amd or zero.
    #[arg(long)]
    profile: String,
    #[arg(long, default_value = "zero")]
    peer: String,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
    repetitions: Vec<u32>,
    #[arg(long, default_value_t = 100)]
    runs: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV with columns repetitions, run, min_rtt_us.
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// host:port; the port defaults to 47474.
    target: String,
    #[arg(long, default_value_t = 1000)]
    repetitions: u32,
    #[arg(long, default_value_t = 250)]
    timeout_ms: u64,
}

#[derive(Args)]
struct RespondArgs {
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    #[arg(long, default_value_t = DEFAULT_PROBE_PORT)]
    port: u16,
}

/// Exit 2 for bad input, 1 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DGATE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Geoclient(a) => geoclient(a),
        Command::Provider(a) => provider(a),
        Command::Processor(a) => processor(a),
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Analyze(a) => analyze(a),
        Command::Probe(a) => probe(a),
        Command::Respond(a) => respond(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_deployment(path: &Path) -> Result<Deployment, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Deployment::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn geoclient(a: GeoclientArgs) -> Outcome {
    let d = load_deployment(&a.config)?;
    let entry = d.geoclient_entry(&a.name).ok_or_else(|| usage(format!("no GeoClient named {:?}", a.name)))?.clone();
    let gc = Arc::new(d.geoclient(&a.name).expect("entry exists"));
    let sweep = ProbeSettings::new(a.repetitions, Duration::from_millis(a.timeout_ms));
    let (responder, control) =
        spawn_geoclient(gc, &entry.probe, &entry.control, d.sweep_peers(&a.name), sweep).map_err(runtime)?;
    println!("geoclient {} probe={} control={}", a.name, responder.addr, control.addr);
    control.wait();
    responder.stop();
    Ok(())
}

fn provider(a: ProviderArgs) -> Outcome {
    let d = load_deployment(&a.config)?;
    let mut listen: SocketAddr = resolve(&d.provider.listen).map_err(usage)?;
    if let Some(p) = a.port {
        listen.set_port(p);
    }
    let mut state = d.provider_state().map_err(usage)?;
    let listener = TcpListener::bind(listen).map_err(runtime)?;
    println!("provider listening on {}", listener.local_addr().map_err(runtime)?);
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream.map_err(runtime)?;
        served += 1;
        match serve_provider_session(&mut state, stream) {
            Ok(reviews) => {
                for (i, r) in reviews.iter().enumerate() {
                    let outcome = r.outcome.map(|o| format!("{o:?}")).unwrap_or_else(|| "-".into());
                    println!(
                        "session={served} round={} outcome={outcome} area_km2={:.0} error={}",
                        i + 1,
                        r.area_km2,
                        r.error.as_deref().unwrap_or("-")
                    );
                }
            }
            Err(e) => println!("session={served} aborted={e}"),
        }
        if a.sessions != 0 && served >= a.sessions {
            break;
        }
    }
    Ok(())
}

fn processor(a: ProcessorArgs) -> Outcome {
    let mut d = load_deployment(&a.config)?;
    if let Some(t) = a.timeout_ms {
        d.processor.timeout_ms = t;
    }
    let provider_addr = resolve(&d.provider.listen).map_err(usage)?;
    let responder = spawn_responder(&d.processor.probe).map_err(runtime)?;
    let mut state = d.processor_state();
    let mut transport = UdpTransport::bind("0.0.0.0:0").map_err(runtime)?;
    let mut sink: Vec<Vec<u8>> = Vec::new();
    let result = run_processor_session(&mut state, provider_addr, &mut transport, &mut TcpConnector::default(), &mut sink);
    responder.stop();
    let decisions = result.map_err(runtime)?;
    for (i, dec) in decisions.iter().enumerate() {
        println!("round={} decision={dec}", i + 1);
    }
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(runtime)?;
        for (i, out) in sink.iter().enumerate() {
            fs::write(dir.join(format!("output-{i}.bin")), out).map_err(runtime)?;
        }
    }
    let verdict = decisions.last().map(|d| d.to_string()).unwrap_or_else(|| "Deny(NoReport)".into());
    println!("released={} verdict={verdict}", sink.len());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Outcome {
    if a.list {
        for (name, _) in BUNDLED_SCENARIOS {
            println!("{name}");
        }
        return Ok(());
    }
    let source = match (&a.config, &a.scenario) {
        (Some(p), None) => p.display().to_string(),
        (None, Some(s)) => s.clone(),
        _ => return Err(usage("give exactly one of SCENARIO or --config")),
    };
    let text = match bundled_scenario(&source) {
        Some(t) => t.to_string(),
        None => fs::read_to_string(&source).map_err(|e| usage(format!("{source}: {e}")))?,
    };
    let mut cfg = ScenarioConfig::from_toml(&text).map_err(|e| usage(format!("{source}: {e}")))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.repetitions {
        cfg.constraints.repetitions = r;
    }
    if let Some(t) = a.timeout_ms {
        cfg.probe.timeout_ms = t;
    }
    cfg.validate().map_err(usage)?;
    let result = run_scenario(&cfg).map_err(runtime)?;
    if let Some(dir) = a.out {
        result.write_outputs(&dir).map_err(runtime)?;
    }
    print!("{}", result.summary());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Outcome {
    let host: OverheadKind = a.profile.parse().map_err(usage)?;
    let peer: OverheadKind = a.peer.parse().map_err(usage)?;
    if a.runs == 0 || a.repetitions.contains(&0) {
        return Err(usage("runs and repetitions must be positive"));
    }
    let mut rows = Vec::new();
    for r in &a.repetitions {
        let set = calibration_min_rtts(host, peer, *r, a.runs, a.seed).map_err(runtime)?;
        rows.extend(rows_of(&set));
    }
    match a.out {
        Some(p) => write_rows(&rows, fs::File::create(&p).map_err(runtime)?).map_err(runtime)?,
        None => write_rows(&rows, std::io::stdout().lock()).map_err(runtime)?,
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let file = fs::File::open(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let rows = read_rows(file).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    if rows.is_empty() {
        return Err(usage(format!("{}: no rows", a.input.display())));
    }
    let q = quartiles_by_repetitions(&rows, &[]);
    match a.out {
        Some(p) => write_quartiles(&q, fs::File::create(&p).map_err(runtime)?).map_err(runtime)?,
        None => write_quartiles(&q, std::io::stdout().lock()).map_err(runtime)?,
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Outcome {
    let target = if a.target.contains(':') { a.target.clone() } else { format!("{}:{DEFAULT_PROBE_PORT}", a.target) };
    let addr = resolve(&target).map_err(usage)?;
    if a.repetitions == 0 || a.timeout_ms == 0 {
        return Err(usage("repetitions and timeout must be positive"));
    }
    let mut transport = UdpTransport::bind("0.0.0.0:0").map_err(runtime)?;
    let settings = ProbeSettings::new(a.repetitions, Duration::from_millis(a.timeout_ms));
    let mut session = [0u8; 16];
    session[..8].copy_from_slice(&(std::process::id() as u64).to_be_bytes());
    session[8..].copy_from_slice(&(transport.local_addr().map_err(runtime)?.port() as u64).to_be_bytes());
    let samples = probe_samples(&mut transport, &addr, &settings, session).map_err(runtime)?;
    let rtts: Vec<u64> = samples.rtts.iter().map(|d| d.0).collect();
    let q = Quartiles::of(&rtts).ok_or_else(|| runtime(format!("all {} samples lost", a.repetitions)))?;
    println!("min_us={:.0} median_us={:.1} max_us={:.0} samples={} lost={}", q.min, q.median, q.max, q.n, samples.lost);
    println!("target,repetitions,min_us,median_us,max_us,samples,lost");
    println!("{addr},{},{:.0},{:.1},{:.0},{},{}", a.repetitions, q.min, q.median, q.max, q.n, samples.lost);
    Ok(())
}

fn respond(a: RespondArgs) -> Outcome {
    let service = spawn_responder(&format!("{}:{}", a.bind, a.port)).map_err(runtime)?;
    println!("responding on {}", service.addr);
    service.wait();
    Ok(())
}
