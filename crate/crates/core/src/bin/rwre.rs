fn main() {
    std::process::exit(rwre::cli::run(std::env::args_os()));
}
