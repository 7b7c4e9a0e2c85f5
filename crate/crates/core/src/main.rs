use std::process::ExitCode;

fn main() -> ExitCode {
    trajdepth::cli::run()
}
