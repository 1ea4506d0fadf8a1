use std::process::ExitCode;

fn main() -> ExitCode {
    spurscan::cli::run()
}
