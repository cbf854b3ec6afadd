use clap::Parser;

fn main() {
    pnpmg_cli::configure_threads();
    let cli = pnpmg_cli::Cli::parse();
    if let Err(f) = pnpmg_cli::run(&cli) {
        eprintln!("{}", f.body);
        std::process::exit(f.code);
    }
}
