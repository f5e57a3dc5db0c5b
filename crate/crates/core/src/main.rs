use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVSEL_LOG", "warn")).init();
    evsel::cli::run(std::env::args_os())
}
