use std::process::ExitCode;

fn main() -> ExitCode {
    f3rnet::cli::main_with_args(std::env::args_os())
}
