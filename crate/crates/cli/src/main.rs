use std::process::ExitCode;

use clap::Parser;
use latentcrf_cli::{exit, init_threads, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    let result = init_threads().and_then(|()| latentcrf_cli::execute(&cli.command));
    match result {
        Ok(report) => {
            for (k, v) in &report.metrics {
                println!("{k} = {v}");
            }
            for (k, ms) in &report.timings {
                println!("{k} = {ms:.3} ms");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
