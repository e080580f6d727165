use std::process::ExitCode;

fn main() -> ExitCode {
    thermal_twin::cli::main_with_args(std::env::args_os())
}
