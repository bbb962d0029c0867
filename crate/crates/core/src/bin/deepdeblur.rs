fn main() {
    std::process::exit(deepdeblur::cli::run(std::env::args_os()));
}
