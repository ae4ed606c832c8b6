fn main() {
    let code = fedprompt::cli::dispatch(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
