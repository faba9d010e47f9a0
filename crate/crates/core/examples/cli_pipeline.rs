//! Drives the command-line pipeline in-process on the quick config:
//! train, eval-sweep, quantize, attribute and report into one run directory.
//!
//! Usage: `cli_pipeline [run_dir]`

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/cli_pipeline".into());
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml");
    for cmd in ["train", "eval-sweep", "quantize", "attribute"] {
        let code = featjnd::cli::run(["featjnd", cmd, "--config", config, "--out", &dir]);
        println!("{cmd}: exit {code}");
        if code != 0 {
            std::process::exit(code);
        }
    }
    let code = featjnd::cli::run(["featjnd", "report", &dir]);
    println!("report: exit {code}, see {dir}/report.md");
    std::process::exit(code);
}
