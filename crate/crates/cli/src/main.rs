use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fedx_core::data::SiteData;
use fedx_core::inversion::{sweep, SweepManifest};
use fedx_core::synth::SynthSpec;
use fedx_service::agent::{run_agent, AgentConfig, Executor};
use fedx_service::client::{Client, ClientError};
use fedx_service::experiment::{CrossSiteMatrix, CrossSiteModel};
use fedx_service::identity::Roster;
use fedx_service::server::{spawn, ServerConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "fedx", version, about = "Federated learning server, client agent and tooling")]
struct Cli {
    /// Server base URL. FEDX_SERVER_URL takes precedence.
    #[arg(long, global = true, default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Bearer token. FEDX_TOKEN takes precedence.
    #[arg(long, global = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server.
    Server {
        #[command(subcommand)]
        action: ServerCmd,
    },
    /// Run a client agent against the server.
    Client {
        #[command(subcommand)]
        action: ClientCmd,
    },
    /// Issue a token and print it.
    Login {
        #[arg(long)]
        user: String,
        #[arg(long)]
        ttl: Option<u64>,
    },
    Experiment {
        #[command(subcommand)]
        action: ExperimentCmd,
    },
    Attack {
        #[command(subcommand)]
        action: AttackCmd,
    },
    Data {
        #[command(subcommand)]
        action: DataCmd,
    },
}

#[derive(Subcommand)]
enum ServerCmd {
    Start {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        roster: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
}

#[derive(Subcommand)]
enum ClientCmd {
    Start {
        #[arg(long)]
        endpoint_id: String,
        /// Site file written by `fedx data gen`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value_t = 20_000)]
        poll_wait_ms: u64,
        #[arg(long, default_value_t = 10_000)]
        heartbeat_ms: u64,
        /// `key=value`, repeatable.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        verbose: bool,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    Create {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `experiment_id` in the file.
        #[arg(long)]
        id: Option<String>,
    },
    Start {
        #[arg(long)]
        id: String,
    },
    Stop {
        #[arg(long)]
        id: String,
    },
    Status {
        #[arg(long)]
        id: String,
    },
    List,
    Metrics {
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 0)]
        cursor: u64,
    },
    Crosssite {
        #[arg(long)]
        id: String,
        /// JSON list of `{name, blob, fine_tune}`; evaluates these instead of
        /// fetching the stored matrix.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Print an aligned table instead of JSON.
        #[arg(long)]
        table: bool,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    Sweep {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

struct Failure {
    exit: u8,
    code: String,
    message: String,
}

impl Failure {
    fn input(message: impl Display) -> Self {
        Self { exit: 4, code: "bad_input".into(), message: message.to_string() }
    }

    fn internal(message: impl Display) -> Self {
        Self { exit: 1, code: "internal".into(), message: message.to_string() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let exit = match e.status() {
            None if matches!(e, ClientError::Connect(_)) => 2,
            Some(401 | 403) => 3,
            Some(400 | 404 | 409) => 4,
            _ => 1,
        };
        let code = match &e {
            ClientError::Connect(_) => "connectivity".to_string(),
            _ => e.code().to_string(),
        };
        Self { exit, code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).unwrap());
}

fn matrix_table(m: &CrossSiteMatrix) -> String {
    let mut header = vec!["model".to_string()];
    header.extend(m.clients.iter().cloned());
    header.push("weighted".into());
    let mut rows = vec![header];
    for r in &m.rows {
        let mut line = vec![r.model.clone()];
        for c in &r.cells {
            line.push(c.report.as_ref().map_or("error".into(), |rep| format!("{} {:.4}", rep.metric_name, rep.metric_value)));
        }
        line.push(r.weighted_average.map_or("-".into(), |w| format!("{w:.4}")));
        rows.push(line);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap()).collect();
    rows.iter()
        .map(|r| r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

fn run(cli: Cli) -> Outcome {
    let server = std::env::var("FEDX_SERVER_URL").unwrap_or(cli.server);
    let token = std::env::var("FEDX_TOKEN").ok().or(cli.token);
    let client = Client::new(&server, token);
    match cli.command {
        Command::Server { action: ServerCmd::Start { config, roster, listen } } => {
            let cfg = match config {
                Some(p) => ServerConfig::load(&p).map_err(Failure::input)?,
                None => ServerConfig::default(),
            };
            let roster = Roster::load(&roster).map_err(Failure::input)?;
            let handle = spawn(&cfg, roster, &listen).map_err(|e| Failure { exit: 2, code: "connectivity".into(), message: e.to_string() })?;
            println!("{}", json!({ "listening": handle.url() }));
            loop {
                std::thread::park();
            }
        }
        Command::Client { action: ClientCmd::Start { endpoint_id, dataset, group, poll_wait_ms, heartbeat_ms, labels, verbose } } => {
            let site = SiteData::load(&dataset).map_err(|e| Failure::input(format!("{}: {e}", dataset.display())))?;
            let labels = labels
                .iter()
                .map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| Failure::input(format!("label {l:?} is not key=value"))))
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            let cfg = AgentConfig { endpoint_id, labels, group_id: group, poll_wait_ms, heartbeat_ms, verbose };
            let mut exec = Executor::new(site);
            let stats = run_agent(&client, &cfg, &mut exec, Arc::new(AtomicBool::new(false)))?;
            print_json(&stats);
        }
        Command::Login { user, ttl } => {
            println!("{}", client.login(&user, ttl)?.token);
        }
        Command::Experiment { action } => match action {
            ExperimentCmd::Create { config, id } => {
                let mut cfg: Value = read_json(&config)?;
                if let Some(id) = id {
                    cfg["experiment_id"] = json!(id);
                }
                print_json(&client.create_experiment(&cfg)?);
            }
            ExperimentCmd::Start { id } => print_json(&client.start_experiment(&id)?),
            ExperimentCmd::Stop { id } => print_json(&client.stop_experiment(&id)?),
            ExperimentCmd::Status { id } => print_json(&client.experiment(&id)?),
            ExperimentCmd::List => print_json(&client.experiments()?),
            ExperimentCmd::Metrics { id, cursor } => print_json(&client.metrics(&id, cursor)?),
            ExperimentCmd::Crosssite { id, models, table } => {
                let m = match models {
                    Some(p) => client.run_crosssite(&id, read_json::<Vec<CrossSiteModel>>(&p)?)?,
                    None => client.crosssite(&id)?,
                };
                if table {
                    println!("{}", matrix_table(&m));
                } else {
                    print_json(&m);
                }
            }
        },
        Command::Attack { action: AttackCmd::Sweep { manifest, out } } => {
            let m: SweepManifest = match manifest {
                Some(p) => read_json(&p)?,
                None => SweepManifest::default(),
            };
            let table = sweep(&m, Some(&out)).map_err(Failure::internal)?;
            print!("{}", table.summary_csv());
        }
        Command::Data { action: DataCmd::Gen { spec, seed, out } } => {
            let spec: SynthSpec = read_json(&spec)?;
            let sites = spec.generate(seed).map_err(Failure::input)?;
            std::fs::create_dir_all(&out).map_err(Failure::internal)?;
            let mut written = Vec::new();
            for s in &sites {
                let path = out.join(format!("{}.site", s.site_id));
                s.save(&path).map_err(Failure::internal)?;
                written.push(json!({ "site_id": s.site_id, "path": path, "n_train": s.train.len(), "n_val": s.val.len(), "n_test": s.test.len() }));
            }
            print_json(&written);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "code": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(4);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "code": f.code, "message": f.message }));
            ExitCode::from(f.exit)
        }
    }
}
