use std::io;

fn main() {
    let env = std::env::var(enscgp_cli::RANK_TOL_ENV).ok();
    let code = enscgp_cli::main_with(
        std::env::args_os(),
        env.as_deref(),
        &mut io::stdout(),
        &mut io::stderr(),
    );
    std::process::exit(code);
}
