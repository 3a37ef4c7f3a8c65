use clap::Parser;

fn main() {
    let cli = relfeat::cli::Cli::parse();
    std::process::exit(relfeat::cli::run(cli));
}
