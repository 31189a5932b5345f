//! Noise schedule, forward noising and deterministic strided sampling with
//! an exact noise predictor.
//!
//! `cargo run --release --example diffusion_schedule`

use mbdiff::diffusion::{
    forward_sample, make_schedule, sample, timestep_grid, Cond, GuidanceConfig, NoisePredictor, NoiseSchedule,
    ScheduleKind,
};
use mbdiff::tensor::Tensor;

/// Knows the clean latent, so it returns the exact noise at every step.
struct Oracle<'a> {
    z0: &'a Tensor,
    s: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict(&self, z_t: &Tensor, t: usize, _z_agnostic: &Tensor, _cond: Cond) -> Tensor {
        let ab = self.s.alpha_bar(t);
        let eps = z_t.data().iter().zip(self.z0.data()).map(|(z, x0)| (z - ab.sqrt() * x0) / (1.0 - ab).sqrt());
        Tensor::new(z_t.shape().to_vec(), eps.collect())
    }
}

fn main() -> mbdiff::Result<()> {
    let s = make_schedule(200, 1e-4, 0.02, ScheduleKind::Linear)?;
    let grid = timestep_grid(200, 20)?;
    println!("{:>5} {:>10} {:>10}", "t", "beta", "alpha_bar");
    for &t in grid.iter().filter(|&&t| t > 0) {
        println!("{t:>5} {:>10.6} {:>10.6}", s.beta(t), s.alpha_bar(t));
    }

    let z0 = Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.25]);
    let eps = [1.0, 1.0, -1.0, 0.0];
    let z_t = Tensor::matrix(1, 4, forward_sample(z0.data(), 200, &eps, &s)?);
    let guidance = GuidanceConfig { omega: 2.0, ..GuidanceConfig::default() };
    let back = sample(z_t.clone(), &z0, 0, &Oracle { z0: &z0, s: &s }, &s, &guidance)?;
    println!("z_T  {:?}\nz_0  {:?}\nback {:?}", z_t.data(), z0.data(), back.data());
    println!("max recovery error {:.2e}", back.max_abs_diff(&z0));
    Ok(())
}
