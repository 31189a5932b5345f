//! Noise schedules, the closed-form forward process, ancestral and
//! deterministic reverse steps, and classifier-free guided sampling.
//!
//! Timesteps run `1..=T`; `alpha_bar(0) = 1` denotes the clean state.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear).map(|_| ())
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Guidance strength `ω ≥ 0`.
    pub omega: f64,
    /// Probability of replacing the behavior condition by null in training.
    pub null_prob: f64,
    /// Sampling stride `Δt`; must divide `T`.
    pub stride: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            null_prob: 0.2,
            stride: 20,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.null_prob) {
            return Err(Error::Config(format!("null_prob must lie in [0, 1], got {}", self.null_prob)));
        }
        timestep_grid(steps, self.stride).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// Index `t` in `0..=T`.
    alpha_bar: Vec<f64>,
    /// Index `t` in `1..=T` (slot 0 unused).
    sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for (t, a) in alpha.iter().enumerate() {
            alpha_bar.push(alpha_bar[t] * a);
        }
        let mut sigma = vec![0.0; beta.len() + 1];
        for t in 2..=beta.len() {
            sigma[t] = (beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior standard deviation of the ancestral step; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_sample(z0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    assert_eq!(z0.len(), eps.len());
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One ancestral reverse step from `t` to `t - 1` with fresh noise `noise`.
pub fn ddpm_step(z_t: &[f64], t: usize, eps_hat: &[f64], s: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    s.check_t(t)?;
    let a = s.alpha(t);
    let c = (1.0 - a) / (1.0 - s.alpha_bar(t)).sqrt();
    let sig = s.sigma(t);
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((z, e), n)| (z - c * e) / a.sqrt() + sig * n)
        .collect())
}

/// Deterministic jump from `t` to `t_prev < t`.
pub fn ddim_step(z_t: &[f64], t: usize, t_prev: usize, eps_hat: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Usage(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let r = (ab_prev / ab).sqrt();
    let (n, n_prev) = ((1.0 - ab).sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| r * (z - n * e) + n_prev * e)
        .collect())
}

/// `(1 + ω) ε_cond - ω ε_uncond`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], omega: f64) -> Vec<f64> {
    assert_eq!(cond.len(), uncond.len());
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 + omega) * c - omega * u)
        .collect()
}

/// `[T, T - Δt, …, Δt, 0]`.
pub fn timestep_grid(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > steps || steps % stride != 0 {
        return Err(Error::Config(format!("stride {stride} must divide T = {steps}")));
    }
    Ok((0..=steps / stride).rev().map(|k| k * stride).collect())
}

/// Denoiser condition: a real behavior or the learned null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Behavior(u32),
    Null,
}

/// Batched noise prediction: every row shares `t` and `cond`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize, z_agnostic: &Tensor, cond: Cond) -> Tensor;
}

/// Standard normal `[rows, d]`.
pub fn standard_normal(rows: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, d, (0..rows * d).map(|_| StandardNormal.sample(rng)).collect())
}

/// Guided DDIM sampling from `z_T` (rows are independent examples sharing
/// one target behavior). The unconditional branch is skipped at `ω = 0`.
pub fn sample(
    z_t: Tensor,
    z_agnostic: &Tensor,
    behavior: u32,
    model: &impl NoisePredictor,
    s: &NoiseSchedule,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    assert_eq!(z_t.shape(), z_agnostic.shape());
    let grid = timestep_grid(s.steps(), guidance.stride)?;
    let mut z = z_t;
    for w in grid.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let cond = model.predict(&z, t, z_agnostic, Cond::Behavior(behavior));
        let eps = if guidance.omega == 0.0 {
            cond
        } else {
            let uncond = model.predict(&z, t, z_agnostic, Cond::Null);
            Tensor::new(cond.shape().to_vec(), cfg_combine(cond.data(), uncond.data(), guidance.omega))
        };
        let next = ddim_step(z.data(), t, t_prev, eps.data(), s)?;
        z = Tensor::new(z.shape().to_vec(), next);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sched() -> NoiseSchedule {
        make_schedule(200, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1), 0.01);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
    }

    #[test]
    fn cumulative_product_is_exact_and_decreasing() {
        let s = sched();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=200 {
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(200), 0.02);
    }

    #[test]
    fn invalid_endpoints_rejected() {
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.01, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(0, 0.01, 0.02, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_sample_closed_form() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
        let z = forward_sample(&[1.0, 0.0], 2, &[0.0, 1.0], &s).unwrap();
        assert_eq!(z[0], 0.5);
        assert!((z[1] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(forward_sample(&[1.0], 3, &[0.0], &s).is_err());
        assert!(forward_sample(&[1.0], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = sched();
        let t = 120;
        let mut rng = stream(3, "t", 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                forward_sample(&[0.0], t, &[e], &s).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(t);
        // Standard error of a Gaussian sample variance.
        let se = expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() <= 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn ddpm_step_limits() {
        let s = NoiseSchedule::from_betas(vec![0.1, 1e-12]).unwrap();
        let z = ddpm_step(&[0.7, -0.2], 2, &[0.3, 0.1], &s, &[0.0, 0.0]).unwrap();
        assert!((z[0] - 0.7).abs() < 1e-9 && (z[1] + 0.2).abs() < 1e-9);
        let s = sched();
        let z = ddpm_step(&[0.7], 50, &[0.0], &s, &[0.0]).unwrap();
        assert_eq!(z[0], 0.7 / s.alpha(50).sqrt());
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn deterministic_part_of_forward_chain() {
        let s = sched();
        let mut z = 1.3f64;
        for t in 1..=200 {
            z *= s.alpha(t).sqrt();
            let direct = s.alpha_bar(t).sqrt() * 1.3;
            assert!((z - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn ddim_inverts_forward_with_oracle_noise() {
        let s = sched();
        let z0 = [0.4, -1.1, 2.5];
        let eps = [0.3, 0.9, -1.4];
        for t in [1, 20, 100, 200] {
            let zt = forward_sample(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, t, 0, &eps, &s).unwrap();
            for (a, b) in back.iter().zip(z0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zt = [0.5, 0.1];
        let back = ddim_step(&zt, 40, 0, &[0.0, 0.0], &s).unwrap();
        assert_eq!(back[0], 0.5 / s.alpha_bar(40).sqrt());
        assert!(ddim_step(&zt, 40, 40, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn guidance_identities() {
        assert_eq!(cfg_combine(&[0.3, -2.0], &[9.0, 1.0], 0.0), vec![0.3, -2.0]);
        assert_eq!(cfg_combine(&[2.0], &[1.0], 1.0), vec![3.0]);
        assert_eq!(cfg_combine(&[0.25], &[0.25], 5.0), vec![0.25]);
    }

    #[test]
    fn grid_ends_at_zero() {
        assert_eq!(timestep_grid(200, 20).unwrap().len(), 11);
        assert_eq!(timestep_grid(10, 5).unwrap(), vec![10, 5, 0]);
        assert_eq!(timestep_grid(10, 10).unwrap(), vec![10, 0]);
        assert!(timestep_grid(10, 3).is_err());
        assert!(timestep_grid(10, 0).is_err());
    }

    /// Predicts the exact noise that maps a fixed `z_0` to the current state.
    struct Oracle<'a> {
        z0: &'a Tensor,
        s: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, z_t: &Tensor, t: usize, _: &Tensor, _: Cond) -> Tensor {
            let ab = self.s.alpha_bar(t);
            let d = z_t
                .data()
                .iter()
                .zip(self.z0.data())
                .map(|(z, z0)| (z - ab.sqrt() * z0) / (1.0 - ab).sqrt())
                .collect();
            Tensor::new(z_t.shape().to_vec(), d)
        }
    }

    #[test]
    fn oracle_sampling_recovers_clean_latent() {
        let s = sched();
        let z0 = Tensor::matrix(2, 3, vec![0.4, -1.1, 2.5, 0.0, 0.3, -0.7]);
        let zt = standard_normal(2, 3, &mut stream(1, "t", 0));
        for stride in [200, 20, 1] {
            let g = GuidanceConfig {
                omega: 1.0,
                null_prob: 0.2,
                stride,
            };
            let out = sample(zt.clone(), &zt, 0, &Oracle { z0: &z0, s: &s }, &s, &g).unwrap();
            assert!(out.max_abs_diff(&z0) < 1e-6, "stride {stride}");
        }
    }
}
