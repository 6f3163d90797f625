fn main() {
    std::process::exit(geoprog::cli::main_exit_code());
}
