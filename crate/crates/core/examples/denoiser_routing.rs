//! Gate weights of the expert mixture under each behavior condition and
//! under the null condition, which only reaches the shared experts.
//!
//! `cargo run --release --example denoiser_routing`

use mbdiff::denoiser::{Denoiser, DenoiserConfig};
use mbdiff::diffusion::Cond;
use mbdiff::rng::stream;

fn main() -> mbdiff::Result<()> {
    let cfg = DenoiserConfig { hidden: 16, shared_experts: 2, private_experts: 1, ..DenoiserConfig::default() };
    let mut den = Denoiser::new(cfg, 8, 4, &mut stream(1, "example", 0))?;
    let za = vec![0.3; 8];
    let zt = vec![-0.1; 8];
    println!("at init the predicted noise is {:?}", den.denoise(&zt, 50, &za, Cond::Behavior(1)));

    den.randomize(0.3, &mut stream(1, "example", 1));
    println!("{} parameters", den.num_parameters());
    let x: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
    for cond in [Cond::Behavior(0), Cond::Behavior(3), Cond::Null] {
        let w = den.gate_weights(0, &x, cond)?;
        println!("{cond:?}: gate {:?}", w.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
    }
    let m = den.modulation(0, 50, Cond::Behavior(2))?;
    println!("block 0 expert-branch gate at t=50: {:.4?}", &m.shift_scale_gate_experts[2][..4]);
    Ok(())
}
