use clap::Parser as _;

fn main() {
    let cli = icaf::cli::Cli::parse();
    if let Err(e) = icaf::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
