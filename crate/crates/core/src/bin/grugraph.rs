use std::process::ExitCode;

fn main() -> ExitCode {
    grugraph::cli::main_with_args(std::env::args_os())
}
