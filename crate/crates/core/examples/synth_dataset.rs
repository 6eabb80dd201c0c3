//! Generate a small synthetic dataset, write it to disk and read it back.
//!
//!     cargo run --example synth_dataset -- /tmp/synth

use colonnet::dataset::load_dataset;
use colonnet::synthgen::{generate_with_blobs, write_dataset, SynthConfig};

fn main() -> colonnet::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "synth_data".into());
    let cfg = SynthConfig::new(20, 7);
    let samples = generate_with_blobs(&cfg)?;
    for s in samples.iter().take(4) {
        println!("{} label={} bbox={:?} blob={:?}", s.sample.id, s.sample.label.as_u8(), s.sample.bbox, s.blob);
    }
    let plain: Vec<_> = samples.into_iter().map(|s| s.sample).collect();
    write_dataset(&plain, root.as_ref())?;
    let loaded = load_dataset(root.as_ref())?;
    let bleeding = loaded.iter().filter(|s| s.label.is_bleeding()).count();
    println!("wrote and reloaded {} samples ({bleeding} bleeding) under {root}", loaded.len());
    Ok(())
}
