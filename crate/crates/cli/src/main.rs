use clap::error::ErrorKind;
use clap::Parser;
use std::io::Write;

use zoomstab_cli::{run, Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => fail(CliError::Validation(e.to_string().trim_end().to_string())),
    };
    match run(&cli) {
        Ok((out, code)) => {
            let text = serde_json::to_string_pretty(&out).expect("output serializes");
            // a closed pipe downstream is not our failure
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            std::process::exit(code);
        }
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ! {
    let _ = writeln!(std::io::stderr().lock(), "{}", e.to_json());
    std::process::exit(e.exit_code());
}
