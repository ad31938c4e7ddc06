fn main() {
    let code = mseunet::cli::main_with(std::env::args_os());
    mseunet::cli::flush();
    std::process::exit(code);
}
