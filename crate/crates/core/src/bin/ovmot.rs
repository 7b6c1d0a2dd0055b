use clap::Parser;

fn main() {
    let cli = ovmot::cli::Cli::parse();
    if let Err(err) = ovmot::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(ovmot::cli::exit_code(&err));
    }
}
