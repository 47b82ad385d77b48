use clap::{CommandFactory, Parser};

fn main() {
    let cli = match gur::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                eprintln!("\n{}", gur::cli::Cli::command().render_usage());
            }
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = gur::cli::run(&cli) {
        eprintln!("{}", gur::cli::error_line(&e));
        std::process::exit(1);
    }
}
