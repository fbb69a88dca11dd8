//! Linear probes on the unseen domain's PAD features: how much subject
//! identity and liveness each method's features carry.
//!
//! ```bash
//! cargo run -p mdpad --example disentanglement_probe
//! ```

use mdpad::datakit::{generate_synthetic_domains, SyntheticSpec};
use mdpad::evalkit::{enumerate_protocols, Protocol};
use mdpad::history::NoAudit;
use mdpad::pipeline::{run_protocol, Ablation, PipelineConfig};

fn main() -> mdpad::Result<()> {
    let seed = 0;
    let datasets = generate_synthetic_domains(&SyntheticSpec::desk(3, seed))?;
    let ids: Vec<String> = datasets.iter().map(|d| d.domain_id.clone()).collect();
    let spec = enumerate_protocols(&ids, Protocol::I)?.pop().unwrap();
    let cfg = PipelineConfig::default();
    // chance level for the subject probe
    println!("subjects: {}", datasets[2].subject_index().len());
    for a in [Ablation::baseline(), Ablation::default()] {
        let o = run_protocol(&spec, &datasets, &cfg, &a, seed, true, &NoAudit)?;
        let p = o.probe.unwrap();
        println!(
            "{:>10}: subject probe {:.3}, liveness probe {:.3}",
            o.method, p.subject_probe_acc, p.liveness_probe_acc
        );
    }
    Ok(())
}
