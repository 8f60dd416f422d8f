fn main() {
    let stdin = std::io::stdin();
    let code = flywheel::cli::run(
        std::env::args_os(),
        &mut stdin.lock(),
        &mut std::io::stdout(),
    );
    std::process::exit(code);
}
