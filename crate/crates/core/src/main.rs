use clap::Parser;

fn main() {
    let cli = exseq::cli::Cli::parse();
    if let Err(e) = exseq::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exseq::cli::exit_code(&e));
    }
}
