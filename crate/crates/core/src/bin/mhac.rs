use std::process::ExitCode;

fn main() -> ExitCode {
    mhac_core::cli::main()
}
