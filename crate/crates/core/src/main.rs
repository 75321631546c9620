#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let code = ddfe::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
