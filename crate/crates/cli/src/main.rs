fn main() {
    std::process::exit(dbg_cli::run(std::env::args_os()));
}
