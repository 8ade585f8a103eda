//! Writes the synthetic anomaly and segmentation datasets to a directory so
//! the `murf` CLI can be tried end to end.
//!
//! cargo run --release --example synth_dataset -- /tmp/murf-demo

use std::path::PathBuf;

use murf::synth::{self, SegParams, TextureParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "murf-demo".into()));
    let ad = synth::write_ad_dataset(&root.join("ad"), &synth::ad_suite(0, 4, 12, &TextureParams::default()))?;
    let seg = synth::write_seg_dataset(&root.join("seg"), &synth::seg_suite(0, 12, &SegParams::default()), 6)?;
    println!("anomaly manifest:      {}", ad.display());
    println!("segmentation manifest: {}", seg.display());
    Ok(())
}
