//! Regenerates the bundled corpora: `cargo run --example make_data -- data`.

use elmo_core::synth::{generate, BundleSizes, DEFAULT_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".to_string());
    generate(DEFAULT_SEED, &BundleSizes::default()).write(&dir)?;
    println!("wrote corpora to {dir}");
    Ok(())
}
