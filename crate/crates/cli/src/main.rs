use clap::Parser;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = cipvol::cli::run(cipvol::cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
