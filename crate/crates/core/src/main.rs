fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    fusionnet::exec::init_from_env();
    std::process::exit(fusionnet::cli::main_with_args(std::env::args_os()));
}
