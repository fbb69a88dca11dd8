//! Stage 1 on one domain: trains the liveness GAN and the identity GAN and
//! reports how well each discriminator's class head does on its own task
//! and on the other one.
//!
//! ```bash
//! cargo run -p mdpad --example train_pad_gan
//! ```

use mdpad::datakit::{generate_synthetic_domains, SyntheticSpec};
use mdpad::drnet::{head_accuracy, train_id_gan, train_pad_gan, DRConfig, Target};
use mdpad::history::NoAudit;
use mdpad::nets::NetConfig;

fn main() -> mdpad::Result<()> {
    let domain = &generate_synthetic_domains(&SyntheticSpec::desk(2, 0))?[0];
    let net = NetConfig::desk();
    let cfg = DRConfig {
        epochs: 15,
        ..Default::default()
    };

    let pad = train_pad_gan(domain, &net, &cfg, &NoAudit)?;
    for r in pad.history.iter().step_by(5).chain(pad.history.last()) {
        let losses: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
        println!("pad-gan epoch {:2}: {}", r.epoch, losses.join(", "));
    }
    let id = train_id_gan(domain, &net, &cfg, &NoAudit)?;

    println!(
        "liveness head on liveness: {:.3}",
        head_accuracy(&pad.discriminator, domain, Target::Liveness)?
    );
    println!(
        "subject head on subjects:  {:.3}",
        head_accuracy(&id.discriminator, domain, Target::Subject)?
    );
    Ok(())
}
