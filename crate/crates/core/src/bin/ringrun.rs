//! `ringrun -np <N> [-H host:slots,...] [--base-port P] [--timeline <dir>] -- <program> [args...]`

use std::process::ExitCode;

use ringweave::launcher::{launch, parse_args, USAGE};
use ringweave::Error;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.iter().any(|a| a == "-h" || a == "--help") && !argv.iter().any(|a| a == "--") {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let cfg = match parse_args(argv) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("ringrun: {e}");
            return ExitCode::from(2);
        }
    };
    match launch(&cfg) {
        Ok(outcome) => {
            if let Some(t) = &outcome.timeline {
                eprintln!("ringrun: merged timeline written to {}", t.display());
            }
            ExitCode::from(outcome.exit_code.clamp(0, 255) as u8)
        }
        Err(e @ Error::Usage(_)) => {
            eprintln!("ringrun: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("ringrun: {e}");
            ExitCode::FAILURE
        }
    }
}
