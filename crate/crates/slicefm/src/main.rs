use clap::Parser;

fn main() {
    let cli = slicefm::cli::Cli::parse();
    if let Err(e) = slicefm::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
