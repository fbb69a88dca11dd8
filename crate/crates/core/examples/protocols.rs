//! Lists the cross-domain evaluation protocols over four domains.
//!
//! ```bash
//! cargo run -p mdpad --example protocols
//! ```

use mdpad::evalkit::{enumerate_protocols, Protocol};

fn main() -> mdpad::Result<()> {
    let ids: Vec<String> = ["O", "C", "I", "M"].iter().map(|s| s.to_string()).collect();
    for p in [Protocol::I, Protocol::II, Protocol::III] {
        let specs = enumerate_protocols(&ids, p)?;
        let labels: Vec<String> = specs.iter().map(|s| s.label()).collect();
        println!("protocol {p:?} ({} specs): {}", specs.len(), labels.join("  "));
    }
    Ok(())
}
