use std::process::ExitCode;

use clap::Parser;

use branchsim_cli::commands::{execute, exit_code, Cli, Command};
use branchsim_cli::{open_engine, service};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve { addr, checkpoint_interval } => serve(cli.global.store.as_deref(), *addr, *checkpoint_interval),
        _ => execute(&cli, &mut std::io::stdout().lock()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn serve(store: Option<&std::path::Path>, addr: std::net::SocketAddr, interval: u64) -> branchsim::Result<u8> {
    let engine = open_engine(store, interval)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, service::router(service::AppState::new(engine)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(0)
    })
}
