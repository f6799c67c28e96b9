use adaptqsd_cli::{exit, run, Cli};
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => std::process::exit(exit::OK),
        Err(e) => {
            eprintln!("adaptqsd {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
