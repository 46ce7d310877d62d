use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = aegis::cli::Cli::parse();
    match aegis::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("aegis: {e}");
            e.exit_code()
        }
    }
}
