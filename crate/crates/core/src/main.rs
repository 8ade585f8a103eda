use std::process::ExitCode;

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("MURF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MURF_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(murf::cli::EXIT_USAGE as u8);
            }
        }
    }
    ExitCode::from(murf::cli::main_with_args(std::env::args_os()) as u8)
}
