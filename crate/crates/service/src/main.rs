use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use enertrade_core::ledger::Channel;
use enertrade_core::sim::{self, synth, ScenarioConfig, Simulation};
use enertrade_service::config::ServiceConfig;
use enertrade_service::Server;

#[derive(Parser)]
#[command(
    name = "enertrade",
    version,
    about = "Peer-to-peer energy market over a permissioned ledger"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP market service.
    Serve {
        #[arg(long, env = "ENERTRADE_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "ENERTRADE_LISTEN")]
        listen: Option<std::net::SocketAddr>,
        #[arg(long, env = "ENERTRADE_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, env = "ENERTRADE_TOKENS")]
        tokens: Option<PathBuf>,
        #[arg(long, env = "ENERTRADE_STATIC_DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Simulate a scenario and print its summary.
    Run {
        scenario: PathBuf,
        /// Write summary.json, community.csv and devices.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Persist the chain here instead of keeping it in memory.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Peak and cost for 0..=N helpful batteries.
    Sweep { scenario: PathBuf },
    /// Primary and overnight peaks for an EV strategy mix.
    Rebound {
        scenario: PathBuf,
        #[arg(long)]
        helpful: usize,
        #[arg(long)]
        selfish: usize,
    },
    /// Run a field-test scenario and print the PCC steps.
    FieldTest {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a persisted chain and replay it.
    Verify { chain: PathBuf },
    /// Generate synthetic load and weather profiles.
    GenProfiles {
        #[arg(long, default_value_t = 8)]
        homes: usize,
        #[arg(long, default_value_t = 7)]
        days: u32,
        #[arg(long, default_value_t = 20240501)]
        seed: u64,
        #[arg(long, default_value = "community8")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(path: &Path) -> Result<sim::Scenario> {
    ScenarioConfig::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info,tower_http=info".into()),
        )
        .with_target(false)
        .init();

    match Cli::parse().command {
        Command::Serve {
            config,
            listen,
            data_dir,
            tokens,
            static_dir,
        } => {
            let mut cfg = ServiceConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            if let Some(t) = tokens {
                cfg.tokens = t;
            }
            if static_dir.is_some() {
                cfg.static_dir = static_dir;
            }
            let server = Server::start(&cfg).await?;
            tokio::signal::ctrl_c().await?;
            tracing::info!("shutting down");
            server.stop().await;
        }
        Command::Run {
            scenario,
            out,
            chain,
        } => {
            let s = load(&scenario)?;
            let metrics = match chain {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    let channel = Channel::open(sim::channel_config(&s), &dir)?;
                    if channel.height() > 1 {
                        bail!("{} already holds a chain", dir.display());
                    }
                    Simulation::new(Arc::new(s), channel)?.run()?
                }
                None => sim::run_scenario(&s)?,
            };
            if let Some(dir) = out {
                metrics.export(&dir)?;
            }
            print_json(&metrics.summary())?;
        }
        Command::Sweep { scenario } => {
            let points = sim::sweep_helpful_bess(&load(&scenario)?)?;
            print_json(&points)?;
        }
        Command::Rebound {
            scenario,
            helpful,
            selfish,
        } => {
            let r = sim::rebound_analysis(&load(&scenario)?, helpful, selfish)?;
            print_json(&r)?;
        }
        Command::FieldTest { scenario, out } => {
            let m = sim::emulate_field_test(&load(&scenario)?)?;
            if let Some(dir) = out {
                m.export(&dir)?;
            }
            print_json(&serde_json::json!({
                "pcc_kw": m.series.iter().map(|s| s.pcc_kw).collect::<Vec<_>>(),
                "steps_kw": sim::pcc_steps(&m),
                "clearings": m.clearings,
            }))?;
        }
        Command::Verify { chain } => {
            let channel = Channel::reopen(&chain)
                .with_context(|| format!("verifying {}", chain.display()))?;
            channel.verify_stored()?;
            if !channel.peers_agree() {
                bail!("peers disagree after replay");
            }
            print_json(&serde_json::json!({
                "channel": channel.id(),
                "height": channel.height(),
                "tip": channel.tip_hash(),
                "state_digest": channel.state().digest(),
            }))?;
        }
        Command::GenProfiles {
            homes,
            days,
            seed,
            prefix,
            out,
        } => {
            let p = synth::SynthParams::community(homes, days, seed);
            synth::write_files(&p, &out, &prefix)?;
            println!(
                "wrote {0}/{prefix}_loads.csv and {0}/{prefix}_weather.csv",
                out.display()
            );
        }
    }
    Ok(())
}
