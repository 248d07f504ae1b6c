fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let code = pageforge::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
