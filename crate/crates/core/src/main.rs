use std::fs;
use std::net::{TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use minifed::access::SharedNamespaces;
use minifed::cache::{Cache, CacheServer};
use minifed::client::{self, great_circle_km, nearest_caches, FetchOptions, GeoPoint};
use minifed::clock;
use minifed::harness::{zipf_script, Federation};
use minifed::health::{run_suite, SuiteConfig};
use minifed::model::{FederationTopology, ObjectPath};
use minifed::monitoring::accounting::{
    aggregate, first_component_prefixes, render_csv, render_text, top_namespaces, AggregateFilter, Metric,
};
use minifed::monitoring::{Collector, CollectorServer, MonitorEmitter, Shoveler, ShovelerConfig};
use minifed::net;
use minifed::origin::{Origin, OriginServer};
use minifed::redirector::{Redirector, RedirectorServer, HEARTBEAT_INTERVAL};

#[derive(Parser)]
#[command(name = "minifed", version, about = "Desk-scale data federation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Serve an origin's namespaces from its root directory.
    Origin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
        /// Shoveler UDP address; defaults to the topology's.
        #[arg(long)]
        monitor_addr: Option<String>,
    },
    /// Run a caching proxy.
    Cache {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        monitor_addr: Option<String>,
    },
    /// Run the redirector.
    Redirector {
        #[arg(long)]
        config: PathBuf,
    },
    /// Forward monitoring datagrams to a collector.
    Shoveler {
        #[arg(long)]
        listen_udp: String,
        #[arg(long)]
        collector: String,
        #[arg(long)]
        admin: String,
        #[arg(long, default_value_t = minifed::monitoring::DEFAULT_QUEUE_BOUND)]
        queue_bound: usize,
    },
    /// Receive forwarded records and append them to a log.
    Collector {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        log: PathBuf,
    },
    /// Usage report from a collector log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Topology whose namespaces group the paths; without it each path
        /// is grouped by its first component.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        month: Option<String>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, default_value = "bytes")]
        metric: Metric,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Fetch an object through the nearest working cache.
    Get {
        path: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        token: Option<String>,
        #[arg(long, default_value = "0,0")]
        at: GeoPoint,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// List caches by distance.
    Nearest {
        #[arg(long)]
        at: GeoPoint,
        #[arg(long)]
        config: PathBuf,
    },
    /// Health checks.
    Check {
        #[command(subcommand)]
        action: CheckAction,
    },
    /// Spin up a local federation, run a workload and print its reports.
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        requests: usize,
    },
}

#[derive(Subcommand)]
enum CheckAction {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: CheckFormat,
    },
}

type CliResult = Result<ExitCode, String>;

fn load_topology(path: &Path) -> Result<FederationTopology, String> {
    FederationTopology::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn emitter(topology: &FederationTopology, monitor_addr: Option<String>) -> Result<Arc<MonitorEmitter>, String> {
    let addr = monitor_addr.or_else(|| topology.monitoring.as_ref().map(|m| m.shoveler_udp.clone()));
    match addr {
        None => Ok(Arc::new(MonitorEmitter::disabled())),
        Some(a) => {
            let target = net::resolve(&a).map_err(|e| e.to_string())?;
            MonitorEmitter::udp(target).map(Arc::new).map_err(|e| e.to_string())
        }
    }
}

fn bind(addr: &str) -> Result<TcpListener, String> {
    TcpListener::bind(addr).map_err(|e| format!("bind {addr}: {e}"))
}

fn park() -> ! {
    loop {
        thread::park();
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Origin {
            config,
            id,
            monitor_addr,
        } => {
            let topology = load_topology(&config)?;
            let spec = topology.origin(&id).ok_or(format!("no origin {id:?}"))?.clone();
            let origin = Origin::new(
                spec.clone(),
                SharedNamespaces::new(topology.namespace_table()),
                emitter(&topology, monitor_addr)?,
                clock::system(),
            )
            .map_err(|e| e.to_string())?;
            let _server = OriginServer::start(
                Arc::new(origin),
                bind(&spec.endpoint)?,
                Some(topology.redirector_endpoint.clone()),
                HEARTBEAT_INTERVAL,
            )
            .map_err(|e| e.to_string())?;
            eprintln!("origin {id} listening on {}", spec.endpoint);
            park()
        }
        Command::Cache {
            config,
            id,
            monitor_addr,
        } => {
            let topology = load_topology(&config)?;
            let spec = topology.cache(&id).ok_or(format!("no cache {id:?}"))?.clone();
            let cache = Cache::open(
                spec.clone(),
                topology.redirector_endpoint.clone(),
                SharedNamespaces::new(topology.namespace_table()),
                emitter(&topology, monitor_addr)?,
                clock::system(),
            )
            .map_err(|e| e.to_string())?;
            let _server = CacheServer::start(Arc::new(cache), bind(&spec.endpoint)?).map_err(|e| e.to_string())?;
            eprintln!("cache {id} listening on {}", spec.endpoint);
            park()
        }
        Command::Redirector { config } => {
            let topology = load_topology(&config)?;
            let redirector = Arc::new(Redirector::new(topology.origins.clone(), clock::system()));
            let _server = RedirectorServer::start(redirector, bind(&topology.redirector_endpoint)?)
                .map_err(|e| e.to_string())?;
            eprintln!("redirector listening on {}", topology.redirector_endpoint);
            park()
        }
        Command::Shoveler {
            listen_udp,
            collector,
            admin,
            queue_bound,
        } => {
            let udp = UdpSocket::bind(&listen_udp).map_err(|e| format!("bind {listen_udp}: {e}"))?;
            let config = ShovelerConfig {
                queue_bound,
                ..ShovelerConfig::new(collector)
            };
            let _shoveler = Shoveler::start(udp, bind(&admin)?, config).map_err(|e| e.to_string())?;
            eprintln!("shoveler receiving on {listen_udp}, admin on {admin}");
            park()
        }
        Command::Collector { listen, log } => {
            let collector = Collector::open(&log).map_err(|e| format!("{}: {e}", log.display()))?;
            let _server = CollectorServer::start(Arc::new(collector), bind(&listen)?).map_err(|e| e.to_string())?;
            eprintln!("collector on {listen}, appending to {}", log.display());
            park()
        }
        Command::Report {
            log,
            topology,
            month,
            top,
            metric,
            format,
        } => {
            let text = fs::read_to_string(&log).map_err(|e| format!("{}: {e}", log.display()))?;
            let prefixes: Vec<ObjectPath> = match topology {
                Some(t) => load_topology(&t)?.namespaces.into_iter().map(|n| n.prefix).collect(),
                None => first_component_prefixes(&text),
            };
            let filter = AggregateFilter {
                month,
                ..AggregateFilter::default()
            };
            let table = aggregate(&text, &prefixes, &filter);
            let rows = top_namespaces(&table, top.unwrap_or(usize::MAX), metric);
            match format {
                ReportFormat::Text => print!("{}", render_text(&rows)),
                ReportFormat::Csv => print!("{}", render_csv(&rows)),
            }
            if table.skipped_lines > 0 {
                eprintln!("skipped {} unreadable lines", table.skipped_lines);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Get {
            path,
            config,
            token,
            at,
            out,
        } => {
            let topology = load_topology(&config)?;
            let path = ObjectPath::parse(&path).map_err(|e| e.to_string())?;
            match client::fetch(&path, token.as_deref(), at, &topology, FetchOptions::default()) {
                Ok(f) => {
                    match out {
                        Some(file) => fs::write(&file, &f.bytes).map_err(|e| format!("{}: {e}", file.display()))?,
                        None => {
                            use std::io::Write;
                            std::io::stdout().write_all(&f.bytes).map_err(|e| e.to_string())?;
                        }
                    }
                    eprintln!(
                        "{} bytes from {} ({:?}) at {:.1} MB/s",
                        f.bytes.len(),
                        f.served_by,
                        f.cache_status,
                        f.rate_bytes_per_s / 1e6
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("minifed: {e}");
                    Ok(ExitCode::from(e.exit_code() as u8))
                }
            }
        }
        Command::Nearest { at, config } => {
            let topology = load_topology(&config)?;
            let order = nearest_caches(at, &topology.caches).map_err(|e| e.to_string())?;
            for id in order {
                let cache = topology.cache(&id).expect("ids come from the topology");
                let there = GeoPoint::of_cache(cache).map_err(|e| e.to_string())?;
                println!("{id}\t{:.1} km\t{}", great_circle_km(at, there), cache.endpoint);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check {
            action: CheckAction::Run {
                config,
                topology,
                format,
            },
        } => {
            let suite = fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let suite = SuiteConfig::from_json(&suite).map_err(|e| format!("{}: {e}", config.display()))?;
            let topology = load_topology(&topology)?;
            let report = run_suite(&suite, &topology);
            match format {
                CheckFormat::Text => print!("{}", report.render_text()),
                CheckFormat::Json => println!("{}", serde_json::to_string_pretty(&report).expect("serializes")),
            }
            Ok(ExitCode::from(report.exit_code() as u8))
        }
        Command::Demo { seed, requests } => demo(seed, requests),
    }
}

fn demo(seed: u64, requests: usize) -> CliResult {
    let fed = Federation::spawn_minimal(seed).map_err(|e| e.to_string())?;
    let objects: Vec<ObjectPath> = fed.catalog().iter().map(|(p, _)| p.clone()).collect();
    let clients: Vec<GeoPoint> = ["40.82,-96.70", "32.88,-117.23", "41.88,-87.63"]
        .iter()
        .map(|s| s.parse().expect("static coordinates"))
        .collect();
    let script = zipf_script(seed, requests, &objects, fed.topology(), &clients);
    let trace = fed.run_workload(&script);
    let hits = trace
        .entries
        .iter()
        .filter(|e| e.x_cache == Some(client::CacheStatus::Hit))
        .count();
    println!(
        "workload: {} requests, {} delivered, {} cache hits",
        trace.len(),
        trace.totals().transfers,
        hits
    );

    let suite = fed.default_suite();
    let report = run_suite(&suite, fed.topology());
    fed.settle(Duration::from_secs(10));

    let log = fs::read_to_string(fed.collector_log()).map_err(|e| e.to_string())?;
    let prefixes: Vec<ObjectPath> = fed.topology().namespaces.iter().map(|n| n.prefix.clone()).collect();
    let table = aggregate(&log, &prefixes, &AggregateFilter::default());
    println!("\nusage by namespace (top 3 by transfers)");
    print!("{}", render_text(&top_namespaces(&table, 3, Metric::Transfers)));
    println!("\nhealth");
    print!("{}", report.render_text());
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("minifed: {e}");
            ExitCode::from(1)
        }
    }
}
