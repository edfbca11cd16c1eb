use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use inrprop_service::{router, AppState, ServiceConfig};

/// Serves the annotation engine over HTTP on a local port.
#[derive(Debug, Parser)]
#[command(name = "inrprop-serve", version)]
struct Args {
    /// Listen address; keep it on loopback, there is no authentication.
    #[arg(long, default_value = "127.0.0.1:8731")]
    bind: SocketAddr,
    /// Directory for fitted fields and displacement checkpoints.
    #[arg(long, default_value = "inrprop-data")]
    data_dir: PathBuf,
    /// Flow fits allowed to run at once.
    #[arg(long, default_value_t = 2)]
    flow_workers: usize,
    /// Largest accepted request body in MiB.
    #[arg(long, default_value_t = 512)]
    max_body_mib: usize,
    /// Worker threads for the numerical kernels.
    #[arg(long, env = "INRPROP_THREADS")]
    threads: Option<usize>,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    if let Err(e) = std::fs::create_dir_all(&args.data_dir) {
        eprintln!("error: {}: {e}", args.data_dir.display());
        return ExitCode::from(2);
    }
    let cfg = ServiceConfig {
        data_dir: args.data_dir,
        flow_workers: args.flow_workers,
        max_body_bytes: args.max_body_mib << 20,
    };
    let listener = match tokio::net::TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.bind);
            return ExitCode::from(2);
        }
    };
    log::info!("listening on http://{}", args.bind);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match axum::serve(listener, router(AppState::new(cfg))).with_graceful_shutdown(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
    }
}
