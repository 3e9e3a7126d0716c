fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let env_out = std::env::var("KAKU_OUT").ok();
    std::process::exit(kakurenbo::cli::run(&args, env_out.as_deref()));
}
