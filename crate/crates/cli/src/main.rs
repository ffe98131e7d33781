fn main() {
    if std::env::var(depthadapt_cli::DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        // Read by the tensor backend when it sizes its thread pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(depthadapt_cli::run(std::env::args_os()));
}
