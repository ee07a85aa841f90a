fn main() {
    std::process::exit(weak_spde_cli::main_with_args(std::env::args_os()));
}
