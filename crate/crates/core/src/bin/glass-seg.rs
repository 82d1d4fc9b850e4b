use clap::Parser;
use glass_seg::cli::{exit_code, run, Cli, Outcome};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = run(Cli::parse());
    match &result {
        Ok(Outcome::Warning(msg)) => eprintln!("warning: {msg}"),
        Err(e) => eprintln!("error: {e}"),
        Ok(Outcome::Done) => {}
    }
    std::process::exit(exit_code(&result));
}
