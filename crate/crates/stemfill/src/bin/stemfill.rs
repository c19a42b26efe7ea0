use clap::Parser;

fn main() {
    let cli = stemfill::cli::Cli::parse();
    if let Err(e) = stemfill::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
