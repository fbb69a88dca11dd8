//! Every ablation of the two-stage method on one cross-domain spec.
//!
//! ```bash
//! cargo run -p mdpad --example ablations -- 1   # seed
//! ```

use mdpad::datakit::{generate_synthetic_domains, SyntheticSpec};
use mdpad::evalkit::{enumerate_protocols, Protocol, ResultsTable};
use mdpad::history::NoAudit;
use mdpad::pipeline::{run_protocol, Ablation, PipelineConfig};

fn main() -> mdpad::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let datasets = generate_synthetic_domains(&SyntheticSpec::desk(3, seed))?;
    let ids: Vec<String> = datasets.iter().map(|d| d.domain_id.clone()).collect();
    let spec = enumerate_protocols(&ids, Protocol::I)?.pop().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.md.epochs = 40;

    let ablations = [
        Ablation::default(),
        Ablation {
            no_ce: true,
            ..Default::default()
        },
        Ablation {
            no_rec: true,
            ..Default::default()
        },
        Ablation {
            no_md: true,
            ..Default::default()
        },
        Ablation {
            no_dr: true,
            ..Default::default()
        },
        Ablation::baseline(),
    ];
    let mut table = ResultsTable::new(vec![spec.label()]);
    for a in ablations {
        let o = run_protocol(&spec, &datasets, &cfg, &a, seed, false, &NoAudit)?;
        eprintln!("{:>12}: AUC {:.2}%", o.method, o.report.auc_percent);
        table.push(o.method, vec![o.report])?;
    }
    print!("{}", String::from_utf8(table.to_csv()?).unwrap());
    Ok(())
}
