fn main() {
    std::process::exit(truebrief::cli::main_entry());
}
