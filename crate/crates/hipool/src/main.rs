use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = hipool::cli::Cli::parse();
    std::process::ExitCode::from(hipool::cli::run(cli))
}
