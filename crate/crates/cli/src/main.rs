use clap::Parser;

fn main() {
    let cli = trajeglish_cli::Cli::parse();
    if let Err(e) = trajeglish_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(trajeglish_cli::exit_code(&e));
    }
}
