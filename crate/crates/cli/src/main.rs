use clap::Parser;
use rvsb_cli::{run, Cli};

fn main() {
    if let Some(n) = std::env::var("RVSB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("rvsb: {e}");
        std::process::exit(e.exit_code());
    }
}
