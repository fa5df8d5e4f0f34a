use clap::Parser;
use wmd_cli::{run, Cli, RunConfig};

fn main() {
    let cli = Cli::parse();
    let cfg = match RunConfig::from_cli(cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    std::process::exit(run(&cfg));
}
