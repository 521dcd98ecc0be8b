use std::process::ExitCode;

fn main() -> ExitCode {
    msm_cli::main_with_args(std::env::args_os())
}
