use std::process::ExitCode;

fn main() -> ExitCode {
    linevo::io::cli::main_with_args(std::env::args_os())
}
