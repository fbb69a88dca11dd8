//! The command chain behind the `mdpad` binary, driven from a config:
//! synth, train-dr, train-md, eval and export-features, each leaving a
//! manifest with content hashes of what it read and wrote.
//!
//! ```bash
//! cargo run -p mdpad --example cli_pipeline -- /tmp/mdpad-run
//! ```

use mdpad::cli::{self, Command, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("mdpad-run").display().to_string());
    let mut cfg = RunConfig::desk(3, 0, std::path::Path::new(&out));
    cfg.dr.epochs = 10;
    cfg.md.epochs = 20;
    std::fs::create_dir_all(&out)?;
    std::fs::write(std::path::Path::new(&out).join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;

    for cmd in [
        Command::Synth,
        Command::TrainDr,
        Command::TrainMd,
        Command::Eval,
        Command::ExportFeatures,
    ] {
        let m = cli::run(cmd, &cfg)?;
        println!("{cmd}: {} inputs, {} outputs", m.inputs.len(), m.outputs.len());
    }
    let summary: cli::EvalSummary = serde_json::from_slice(&std::fs::read(std::path::Path::new(&out).join("eval/report.json"))?)?;
    println!(
        "{}: HTER {:.2}%, AUC {:.2}%",
        summary.spec.label(),
        summary.report.hter_percent,
        summary.report.auc_percent
    );
    println!("same run from the binary: mdpad eval --config {out}/config.json");
    Ok(())
}
