fn main() {
    std::process::exit(jgrsc::cli::main_with_args(std::env::args_os()));
}
