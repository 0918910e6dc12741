use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(inpo_core::cli::run(std::env::args_os()))
}
