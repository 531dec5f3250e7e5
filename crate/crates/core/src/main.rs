use std::io::Write;

fn main() {
    if let Err(e) = ddgcn::cli::init_threads_from_env() {
        eprintln!("{}", ddgcn::cli::Failure::Lib(e).line());
        std::process::exit(1);
    }
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = ddgcn::cli::run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    std::process::exit(code);
}
