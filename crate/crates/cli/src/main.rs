use clap::Parser;
use facestyle::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(f) = run(Cli::parse()) {
        eprintln!("error: {f}");
        std::process::exit(f.code);
    }
}
