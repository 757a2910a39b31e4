use clap::Parser;

fn main() {
    std::process::exit(audiolm_cli::run(audiolm_cli::Cli::parse()));
}
