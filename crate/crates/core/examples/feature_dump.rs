//! Dump the per-scale branch responses of every inception module for one
//! image, one tiled PNG per scale.
//!
//!     cargo run --release --example feature_dump -- [out_dir]

use std::path::PathBuf;

use deepdeblur::imaging::synthetic_face;
use deepdeblur::model::{dump_feature_maps, DeepDeblurNet, NetworkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("deepdeblur-features"));
    let cfg = NetworkConfig {
        num_modules: 2,
        base_channels: 16,
        scales: vec![1, 3, 5, 7, 14],
        ..NetworkConfig::default()
    };
    let net = DeepDeblurNet::new(cfg, 0)?;
    let face = synthetic_face(112, 96, 1)?;
    for m in 0..net.config().num_modules {
        for p in dump_feature_maps(&net, &face, m, &out)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}
