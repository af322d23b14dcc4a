fn main() {
    std::process::exit(matcorr::cli::run(std::env::args_os()));
}
