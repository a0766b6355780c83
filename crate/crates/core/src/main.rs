use std::process::ExitCode;

fn main() -> ExitCode {
    timer_xl::cli::main_with_args(std::env::args_os())
}
