use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = xut::cli::Cli::parse();
    let code = match xut::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            xut::cli::exit_code(&e)
        }
    };
    std::process::exit(code);
}
