fn main() {
    let mut stdout = std::io::stdout();
    match avey::cli::run(std::env::args_os(), &mut stdout) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
