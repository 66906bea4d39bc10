//! Resolves an experiment config with overrides and runs a subcommand
//! through the library entry point.

use softmoe::cli;
use softmoe::config::ExperimentConfig;

fn main() -> softmoe::Result<()> {
    let text = "# a small sweep\nseed = 3\nsweep.experts = 8,32\nsweep.samples = 10\n";
    let mut cfg = ExperimentConfig::parse(text)?;
    cfg.apply([("sweep.bpr", "true")])?;
    cfg.validate()?;
    println!("resolved sweep keys:");
    for line in cfg.to_text().lines().filter(|l| l.starts_with("sweep.")) {
        println!("  {line}");
    }

    if let Err(e) = ExperimentConfig::parse("moe.experts = 8") {
        println!("rejected: {e}");
    }

    let dir = tempfile::tempdir().map_err(|e| softmoe::Error::usage(e.to_string()))?;
    let out = dir.path().join("flops");
    let code = cli::run([
        "softmoe",
        "flops",
        "--model",
        "softmoe-b16-128e",
        "--out",
        out.to_str().expect("utf-8 temp path"),
    ]);
    println!("exit status {code}; wrote {:?}", std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0));
    Ok(())
}
