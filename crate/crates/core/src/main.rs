use std::process::ExitCode;

fn main() -> ExitCode {
    docwarp::cli::main()
}
