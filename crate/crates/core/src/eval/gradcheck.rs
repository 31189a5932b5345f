//! Central finite-difference checks of the analytic gradients.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::data::{MaskedBatch, Sequence, Vocab};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserKind};
use crate::diffusion::{standard_normal, Cond};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mbae::{Mbae, ModelConfig, PositionMode};
use crate::nn::{Init, Linear};
use crate::params::{normal, ParamStore};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries probed per tensor; smaller tensors are probed in full.
const PROBES_PER_TENSOR: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// A single affine map under a fixed linear readout.
    Linear,
    /// Embeddings plus one behavior-rotary attention sublayer.
    BaropeAttention,
    /// Decoder cross-entropy over the full catalog.
    DecoderCe,
    /// One denoiser block, conditioned on a behavior.
    McglnBlock,
    /// The complete masked reconstruction loss of a two-token sequence.
    Mbae,
    /// The complete noise-prediction loss, behavior and null conditions.
    Denoiser,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        Self::Linear,
        Self::BaropeAttention,
        Self::DecoderCe,
        Self::McglnBlock,
        Self::Mbae,
        Self::Denoiser,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown gradient-check target {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::BaropeAttention => "barope-attention",
            Self::DecoderCe => "decoder-ce",
            Self::McglnBlock => "mcgln-block",
            Self::Mbae => "mbae",
            Self::Denoiser => "denoiser",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub probed: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub target: GradTarget,
    pub tolerance: f64,
    pub tensors: Vec<TensorError>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() <= self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# target={} tolerance={:e} step={FD_STEP:e}\n", self.target.name(), self.tolerance);
        for t in &self.tensors {
            let _ = writeln!(s, "{:<28} {:>4} {:.3e}", t.name, t.probed, t.max_rel);
        }
        let _ = writeln!(s, "max_rel={:.3e} passed={}", self.max_rel(), self.passed());
        s
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A scalar loss over the parameters of one store.
trait Probe {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, g: &mut Graph) -> Var;
}

fn loss_value(p: &dyn Probe) -> f64 {
    let mut g = Graph::new();
    let l = p.loss(&mut g);
    g.value(l).data()[0]
}

fn check(p: &mut dyn Probe, rng: &mut Rng) -> Vec<TensorError> {
    let mut g = Graph::new();
    let l = p.loss(&mut g);
    let grads = g.backward(l);
    let ids: Vec<_> = p.store().ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = p.store().get(id).numel();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let picks: Vec<usize> = if numel <= PROBES_PER_TENSOR {
            (0..numel).collect()
        } else {
            let mut v = sample(rng, numel, PROBES_PER_TENSOR).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel: f64 = 0.0;
        for &i in &picks {
            let orig = p.store().get(id).data()[i];
            p.store_mut().get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_value(p);
            p.store_mut().get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_value(p);
            p.store_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
        }
        out.push(TensorError {
            name: p.store().name(id).to_string(),
            probed: picks.len(),
            max_rel,
        });
    }
    out
}

struct LinearProbe {
    store: ParamStore,
    layer: Linear,
    x: Tensor,
    readout: Rc<Vec<f64>>,
}

impl Probe for LinearProbe {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, g: &mut Graph) -> Var {
        let x = g.constant(self.x.clone());
        let y = self.layer.forward(g, &self.store, x);
        let y = g.mul_const(y, self.readout.clone());
        g.sum(y)
    }
}

enum MbaeLoss {
    Attention(Rc<Vec<f64>>),
    Decoder(Tensor, Vec<usize>),
    Cloze(MaskedBatch),
}

struct MbaeProbe {
    model: Mbae,
    seqs: Vec<Sequence>,
    kind: MbaeLoss,
}

impl Probe for MbaeProbe {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn loss(&self, g: &mut Graph) -> Var {
        match &self.kind {
            MbaeLoss::Attention(readout) => {
                let out = self.model.attention_probe(g, &self.seqs);
                let out = g.mul_const(out, readout.clone());
                g.sum(out)
            }
            MbaeLoss::Decoder(z, targets) => {
                let z = g.constant(z.clone());
                let logits = self.model.decode_var(g, z);
                g.cross_entropy(logits, targets.clone())
            }
            MbaeLoss::Cloze(batch) => self.model.cloze_loss(g, batch, None).0,
        }
    }
}

struct DenoiserProbe {
    model: Denoiser,
    z_t: Tensor,
    z_agn: Tensor,
    ts: Vec<usize>,
    eps: Rc<Tensor>,
    /// Readout of block 0's output when set; the full loss otherwise.
    block_readout: Option<Rc<Vec<f64>>>,
}

impl Probe for DenoiserProbe {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn loss(&self, g: &mut Graph) -> Var {
        if let Some(readout) = &self.block_readout {
            let cond = Cond::Behavior(1);
            let x = g.constant(self.z_t.clone());
            let za = g.constant(self.z_agn.clone());
            let c = self.model.condition_var(g, &self.ts, cond);
            let out = self.model.block_var(g, &self.model.ids.blocks[0], x, za, c, cond);
            let out = g.mul_const(out, readout.clone());
            return g.sum(out);
        }
        let a = self
            .model
            .loss_var(g, &self.z_t, &self.ts, &self.z_agn, Cond::Behavior(1), self.eps.clone());
        let b = self.model.loss_var(g, &self.z_t, &self.ts, &self.z_agn, Cond::Null, self.eps.clone());
        g.add(a, b)
    }
}

const D: usize = 8;

fn readout(n: usize, rng: &mut Rng) -> Rc<Vec<f64>> {
    Rc::new(normal(&[n], 1.0, rng).into_data())
}

fn small_mbae(rng: &mut Rng) -> Result<(Mbae, Vec<Sequence>)> {
    let cfg = ModelConfig {
        d: D,
        heads: 2,
        layers: 2,
        ffn_dim: 16,
        dropout: 0.0,
        position: PositionMode::BehaviorRotary,
        behavior_in_input: true,
        rope_base: 10000.0,
    };
    let vocab = Vocab::new(6, 3);
    let mut m = Mbae::new(cfg, vocab, 2, rng)?;
    m.randomize_heads(0.3, rng);
    let seqs = vec![Sequence::from_pairs(0, &[(2, 1), (4, 0)], 2, &vocab)];
    Ok((m, seqs))
}

fn small_denoiser(rng: &mut Rng, block_only: bool) -> Result<DenoiserProbe> {
    let cfg = DenoiserConfig {
        kind: DenoiserKind::Mcgln,
        depth: 2,
        shared_experts: 1,
        private_experts: 1,
        hidden: 12,
    };
    let mut model = Denoiser::new(cfg, D, 3, rng)?;
    model.randomize(0.3, rng);
    let n = 3;
    Ok(DenoiserProbe {
        z_t: standard_normal(n, D, rng),
        z_agn: standard_normal(n, D, rng),
        eps: Rc::new(standard_normal(n, D, rng)),
        ts: vec![7, 50, 120],
        block_readout: block_only.then(|| readout(n * D, rng)),
        model,
    })
}

/// Runs the check for `target` at width 8 and compares against `tolerance`.
pub fn grad_check(target: GradTarget, tolerance: f64, seed: u64) -> Result<GradReport> {
    let mut rng = stream(seed, "grad-check", 0);
    let mut probe: Box<dyn Probe> = match target {
        GradTarget::Linear => {
            let mut store = ParamStore::new();
            // Zero weights and dyadic inputs keep every forward value exact,
            // so the central difference carries no cancellation error.
            let layer = Linear::new(&mut store, "lin", 5, 3, Init::Zero, &mut rng);
            let mut dyadic = |n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(rng.random_range(-8i32..=8)) / 8.0).collect() };
            let x = Tensor::matrix(4, 5, dyadic(20));
            let r = Rc::new(dyadic(12));
            Box::new(LinearProbe {
                store,
                layer,
                x,
                readout: r,
            })
        }
        GradTarget::BaropeAttention => {
            let (model, seqs) = small_mbae(&mut rng)?;
            let r = readout(2 * D, &mut rng);
            Box::new(MbaeProbe {
                model,
                seqs,
                kind: MbaeLoss::Attention(r),
            })
        }
        GradTarget::DecoderCe => {
            let (model, seqs) = small_mbae(&mut rng)?;
            let z = standard_normal(3, D, &mut rng);
            Box::new(MbaeProbe {
                model,
                seqs,
                kind: MbaeLoss::Decoder(z, vec![0, 3, 5]),
            })
        }
        GradTarget::Mbae => {
            let (model, seqs) = small_mbae(&mut rng)?;
            let mask = model.vocab.mask_token();
            // The second token is masked with its behavior hidden.
            let mut masked = seqs[0].clone();
            masked.items[1] = mask;
            masked.behaviors[1] = mask;
            let batch = MaskedBatch {
                sequences: vec![masked],
                masked_positions: vec![vec![1]],
                target_items: vec![vec![4]],
                behavior_masked: vec![vec![true]],
            };
            Box::new(MbaeProbe {
                model,
                seqs,
                kind: MbaeLoss::Cloze(batch),
            })
        }
        GradTarget::McglnBlock => Box::new(small_denoiser(&mut rng, true)?),
        GradTarget::Denoiser => Box::new(small_denoiser(&mut rng, false)?),
    };
    let tensors = check(probe.as_mut(), &mut rng);
    Ok(GradReport {
        target,
        tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let r = grad_check(GradTarget::Linear, 1e-10, 0).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn target_names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(GradTarget::parse(t.name()).unwrap(), t);
        }
        assert!(GradTarget::parse("everything").is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn autoencoder_gradients_match() {
        let r = grad_check(GradTarget::Mbae, 1e-4, 1).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.tensors.iter().any(|t| t.name.starts_with("barope.")));
        assert!(r.tensors.iter().any(|t| t.name.starts_with("dec.")));
    }

    #[test]
    fn full_denoiser_gradients_match() {
        let r = grad_check(GradTarget::Denoiser, 1e-4, 2).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }
}
