//! Trains on two synthetic domains and tests on the third, with the full
//! method and with the plain-classifier baseline.
//!
//! ```bash
//! cargo run -p mdpad --example cross_domain -- 3   # seed
//! ```

use mdpad::datakit::{generate_synthetic_domains, SyntheticSpec};
use mdpad::evalkit::{enumerate_protocols, Protocol};
use mdpad::history::NoAudit;
use mdpad::pipeline::{run_protocol, Ablation, PipelineConfig};

fn main() -> mdpad::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SyntheticSpec::desk(3, seed);
    let datasets = generate_synthetic_domains(&spec)?;
    let ids: Vec<String> = datasets.iter().map(|d| d.domain_id.clone()).collect();
    let target = enumerate_protocols(&ids, Protocol::I)?.pop().unwrap();
    let cfg = PipelineConfig::default();

    println!("{}", target.label());
    for ablation in [Ablation::baseline(), Ablation::default()] {
        let t = std::time::Instant::now();
        let o = run_protocol(&target, &datasets, &cfg, &ablation, seed, false, &NoAudit)?;
        println!(
            "{:>10}: HTER {:5.2}%  AUC {:6.2}%  ({:.0}s)",
            o.method,
            o.report.hter_percent,
            o.report.auc_percent,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
