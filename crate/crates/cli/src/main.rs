use std::process::ExitCode;

use clap::Parser;
use zerocap_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command, &mut |line| eprintln!("{line}")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error [{}]: {e}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
