fn main() {
    std::process::exit(ota_pfl::cli::main_with_args(std::env::args_os()));
}
