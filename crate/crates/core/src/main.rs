use clap::Parser;

use curvadion::cli::{run_cli, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(f) = run_cli(cli) {
        eprintln!("error: {}", f.message());
        std::process::exit(f.exit_code());
    }
}
