use std::io;

fn main() {
    let env = env_logger::Env::new().filter_or("DOCTOR_LOG", "warn");
    env_logger::Builder::from_env(env).init();
    let code = doctor_core::cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
