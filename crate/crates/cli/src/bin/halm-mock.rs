//! Scripted generation endpoint for tests and dry runs.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use halm_core::mock_service::{MockServer, Script};

#[derive(Debug, Parser)]
#[command(name = "halm-mock", version, about = "Serve scripted generations over the halm wire protocol")]
struct Args {
    /// Line-delimited script file; unknown prompts get the default response.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let script = match &args.script {
        Some(path) => match Script::load(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => Script::new(),
    };
    match MockServer::start(script, SocketAddr::new(args.host, args.port)) {
        Ok(server) => {
            println!("listening on {}", server.url());
            server.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
