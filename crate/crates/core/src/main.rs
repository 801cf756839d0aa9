fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DV_SEMIGROUP_LOG", "warn")).init();
    std::process::exit(dv_semigroup::cli::main_with(std::env::args_os()));
}
