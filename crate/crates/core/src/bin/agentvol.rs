use clap::Parser;

use agentvol::cli::{run, Cli, EXIT_INVALID};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for f in &outcome.failures {
                eprintln!("warning: {f}");
            }
            std::process::exit(outcome.exit_code());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(EXIT_INVALID);
        }
    }
}
