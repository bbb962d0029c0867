//! Finite-difference check of the end-to-end gradient: a small network under
//! the full loss, differentiated with respect to its input pixels and to a
//! sample of its weights.

use deepdeblur::losses::{proxy_extractor, total_loss, LossWeights};
use deepdeblur::model::{DeepDeblurNet, NetworkConfig};
use deepdeblur::tensor::{finite_diff_check, finite_diff_check_coords, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = NetworkConfig {
        num_modules: 1,
        base_channels: 4,
        scales: vec![1, 3],
        ..NetworkConfig::default()
    };
    let net = DeepDeblurNet::new(cfg, 1)?;
    let phi = proxy_extractor(2, 8)?;
    let w = LossWeights { alpha: 1e-2, beta: 1e-2 };
    let x = Tensor::from_fn(&[1, 3, 10, 9], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
    let target = Tensor::from_fn(&[1, 3, 10, 9], |i| (i as f64 * 0.11).cos() * 0.5 + 0.5);

    let err = finite_diff_check(
        |xv| {
            let tape = xv.tape();
            let params: Vec<_> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
            let y = net.forward_with(&params, xv)?;
            Ok(total_loss(y, tape.constant(target.clone()), w, &phi)?.total)
        },
        &x,
        1e-5,
    )?;
    println!("input gradient: max relative error {err:.2e}");

    let idx = net.module_param_indices()[0];
    let weights = net.params()[idx].clone();
    let coords: Vec<usize> = (0..weights.len()).step_by(3).collect();
    let err = finite_diff_check_coords(
        |wv| {
            let tape = wv.tape();
            let mut params: Vec<_> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
            params[idx] = wv;
            let y = net.forward_with(&params, tape.constant(x.clone()))?;
            Ok(total_loss(y, tape.constant(target.clone()), w, &phi)?.total)
        },
        &weights,
        1e-5,
        &coords,
    )?;
    println!("weights of {}: max relative error {err:.2e}", net.param_names()[idx]);
    Ok(())
}
