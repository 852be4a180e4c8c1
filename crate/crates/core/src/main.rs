fn main() {
    std::process::exit(bidecoder::cli::run(std::env::args_os()));
}
