use clap::Parser;

fn main() {
    let cli = divproxy::cli::Cli::parse();
    if let Err(e) = divproxy::cli::run(cli) {
        eprintln!("divproxy: {e}");
        std::process::exit(e.exit_code());
    }
}
