fn main() {
    std::process::exit(mdc_core::cli::main());
}
