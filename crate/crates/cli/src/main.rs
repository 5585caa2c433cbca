use clap::Parser;

fn main() {
    let cli = vastsum_cli::Cli::parse();
    if let Err(e) = vastsum_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
