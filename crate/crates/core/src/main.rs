use clap::Parser;

use hiercl::cli::{configure_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {}: {}", e.code(), e);
        std::process::exit(1);
    }
}
