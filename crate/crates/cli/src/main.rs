use clap::Parser;
use fdseg_cli::args::Cli;
use fdseg_cli::{commands, exit_code, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
