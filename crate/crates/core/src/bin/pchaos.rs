fn main() {
    std::process::exit(poisson_chaos::cli::main_with(std::env::args_os()));
}
