use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = nmog::cli::configure_threads() {
        eprintln!("nmog: {e}");
        return ExitCode::from(nmog::cli::EXIT_USAGE as u8);
    }
    ExitCode::from(nmog::cli::run_cli(std::env::args_os()) as u8)
}
