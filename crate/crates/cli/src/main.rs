use clap::Parser;

fn main() {
    let cli = ffb_cli::Cli::parse();
    if let Err(e) = ffb_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
