use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use slotdisc::corpus::load_dataset;
use slotdisc::{ActiveLearner, SlotCatalog};
use slotdisc_service::{LoopPhase, Service, ServiceConfig};

use crate::manifest::RunManifest;
use crate::require_file;
use crate::simulate::LearnerArgs;

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Dataset; warm-up spans are labeled from its gold labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `state.ckpt`, `board.json` and the manifest.
    #[arg(long)]
    pub state_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to bind; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Continue the run saved in the state directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Task lease length in seconds.
    #[arg(long, default_value_t = 600)]
    pub lease_secs: u64,
    #[command(flatten)]
    pub learner: LearnerArgs,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

pub fn run(a: ServeArgs) -> Result<()> {
    require_file(&a.data, "dataset")?;
    let mut config = a.learner.resolve()?;
    config.seed = a.seed;
    (|| {
        let mut m = RunManifest::new(
            "serve",
            serde_json::json!({"learner": config, "resume": a.resume, "lease_secs": a.lease_secs}),
        )
        .input(&a.data)?;
        m.seeds = vec![a.seed];
        m.outputs = vec![
            a.state_dir.join(slotdisc_service::app::STATE_FILE),
            a.state_dir.join(slotdisc_service::app::BOARD_FILE),
        ];
        m.write(&a.state_dir.join("manifest.json"))
    })()?;

    let (corpus, _) = load_dataset(&a.data, slotdisc::SCHEMA_VERSION)?;
    let mut service_config = ServiceConfig::new(&a.state_dir);
    service_config.lease_ms = a.lease_secs * 1000;

    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let service = if a.resume {
            Service::resume(corpus, service_config)?
        } else {
            let learner = ActiveLearner::new(corpus, &SlotCatalog::new(Vec::<String>::new())?, config)?;
            Service::start(learner, service_config)?
        };
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        axum::serve(listener, service.router())
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")?;

        let shared = service.shared();
        while shared.phase() == LoopPhase::Retraining {
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        shared.checkpoint()?;
        log::info!("state saved to {}", a.state_dir.display());
        Ok(())
    })
}
