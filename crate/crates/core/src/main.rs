fn main() {
    if let Err(e) = cbpredict::cli::run(std::env::args_os()) {
        eprintln!("{e:#}");
        eprintln!("error: {}", e.machine_line());
        std::process::exit(e.exit_code());
    }
}
