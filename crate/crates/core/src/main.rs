fn main() {
    std::process::exit(coop_edl::cli::run(std::env::args_os()));
}
