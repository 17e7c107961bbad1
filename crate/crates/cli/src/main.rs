use clap::Parser;

fn main() {
    let cli = lql_cli::Cli::parse();
    if let Err(e) = lql_cli::run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
