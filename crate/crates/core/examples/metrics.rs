//! HTER, AUC and the EER threshold on a hand-made score set.
//!
//! ```bash
//! cargo run -p mdpad --example metrics
//! ```

use mdpad::evalkit::{auc, eer_threshold, hter, EvalReport, ScoreSet};

fn main() -> mdpad::Result<()> {
    // live scores should be high, spoof scores low; two spoofs overlap
    let validation = ScoreSet::from_classes(&[0.9, 0.8, 0.75, 0.6, 0.55], &[0.1, 0.2, 0.3, 0.65, 0.7], "validation")?;
    let test = ScoreSet::from_classes(&[0.95, 0.7, 0.5, 0.4], &[0.05, 0.35, 0.45, 0.6], "test")?;

    let tau = eer_threshold(&validation)?;
    let v = hter(&validation, tau)?;
    println!(
        "validation: AUC {:.2}%, EER threshold {tau:.3} (FAR {:.2}, FRR {:.2})",
        auc(&validation)?,
        v.far,
        v.frr
    );

    for t in [0.3, tau, 0.8] {
        let h = hter(&test, t)?;
        println!("test @ {t:.3}: FAR {:.2} FRR {:.2} HTER {:.2}%", h.far, h.frr, h.hter_percent);
    }
    println!("{}", serde_json::to_string_pretty(&EvalReport::evaluate(&test, tau)?).unwrap());
    Ok(())
}
