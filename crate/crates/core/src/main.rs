fn main() {
    std::process::exit(patchsynth::cli::run(std::env::args_os()));
}
