use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use fldr::cli::{run, Cli};
use fldr::error::exit;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli).map_err(anyhow::Error::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.downcast_ref::<fldr::FldrError>().map_or(exit::DATA, |e| e.exit_code());
            log::error!("{err:#}");
            ExitCode::from(code as u8)
        }
    }
}
