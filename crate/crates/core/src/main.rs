use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = amcen::cli::Cli::parse();
    if let Err(e) = amcen::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(amcen::cli::exit_code(&e));
    }
}
