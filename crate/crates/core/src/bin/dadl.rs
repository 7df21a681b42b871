use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dadl::cli::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(dadl::cli::exit_code(&e) as u8);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = dadl::cli::run_with(std::env::args_os(), &mut out, &mut std::io::stderr());
    let _ = out.flush();
    ExitCode::from(code as u8)
}
