fn main() {
    std::process::exit(mono_bench::run(std::env::args_os()));
}
