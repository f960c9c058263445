use clap::Parser;

fn main() {
    if let Err(e) = adacbm_cli::run(adacbm_cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
