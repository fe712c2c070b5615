use clap::error::ErrorKind;
use clap::Parser;

use seqdiff::cli::{self, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("bad arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", cli::error_line("usage", first));
            std::process::exit(1);
        }
    };
    if let Err(e) = cli::run(cli) {
        eprintln!("{}", cli::error_line(e.kind(), &e.to_string()));
        std::process::exit(e.exit_code());
    }
}
