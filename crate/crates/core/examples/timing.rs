//! Forward-pass latency of the default network on a 112x96 image.
//!
//!     cargo run --release --example timing -- [reps]

use deepdeblur::evalbench::time_inference;
use deepdeblur::imaging::synthetic_face;
use deepdeblur::model::{DeepDeblurNet, NetworkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let net = DeepDeblurNet::new(NetworkConfig::default(), 0)?;
    let face = synthetic_face(112, 96, 0)?;
    let t = time_inference(&net, &face, 1, reps)?;
    println!(
        "default network ({} parameters), 112x96: {:.4} s ± {:.4} s over {} runs",
        net.param_count(),
        t.mean,
        t.std,
        t.n
    );
    Ok(())
}
