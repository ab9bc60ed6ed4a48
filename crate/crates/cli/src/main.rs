use clap::Parser;

fn main() {
    let cli = dsd_cli::Cli::parse();
    std::process::exit(dsd_cli::run(&cli));
}
