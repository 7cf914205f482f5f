use clap::Parser;

fn main() {
    let cli = gencert::cli::Cli::parse();
    if let Err(e) = gencert::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(gencert::cli::exit_code(&e));
    }
}
