//! Noise predictors for the latent diffusion model.
//!
//! The default predictor stacks blocks that (1) inject the behavior-agnostic
//! latent through a normalized concatenation and (2) route through a mixture
//! of shared experts and behavior-private experts, both branches scaled,
//! shifted (as `x (1 + scale) + shift`) and gated by vectors predicted from the timestep and behavior
//! embeddings. Two simpler predictors share the interface for comparison.

use std::rc::Rc;

use crate::diffusion::{Cond, NoisePredictor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{FeedForward, Init, Linear};
use crate::params::{normal, uniform_fan_in, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserKind {
    /// Condition injection plus hard-routed shared/private experts.
    Mcgln,
    /// Same modulated blocks with one feed-forward network instead of experts.
    AdaLn,
    /// A residual MLP over the concatenated inputs.
    Mlp,
}

impl DenoiserKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcgln" => Ok(Self::Mcgln),
            "adaln" => Ok(Self::AdaLn),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Config(format!("unknown denoiser kind {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mcgln => "mcgln",
            Self::AdaLn => "adaln",
            Self::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub depth: usize,
    pub shared_experts: usize,
    /// Private experts per behavior.
    pub private_experts: usize,
    /// Hidden width of every expert and feed-forward map.
    pub hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Mcgln,
            depth: 2,
            shared_experts: 1,
            private_experts: 1,
            hidden: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 {
            return Err(Error::Config("denoiser.depth and denoiser.hidden must be positive".into()));
        }
        if self.kind == DenoiserKind::Mcgln && self.shared_experts == 0 {
            return Err(Error::Config("null routing needs at least one shared expert".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockIds {
    pub modulation: Linear,
    pub cond_in: Linear,
    pub cond_mlp: FeedForward,
    pub gate: Option<ParamId>,
    pub shared: Vec<FeedForward>,
    /// `private[b]` holds the experts of behavior `b`.
    pub private: Vec<Vec<FeedForward>>,
    pub ffn: Option<FeedForward>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct MlpIds {
    pub input: Linear,
    pub blocks: Vec<FeedForward>,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct DenoiserIds {
    pub time: FeedForward,
    /// `num_behaviors + 1` rows; the last is the null condition.
    pub behavior_table: ParamId,
    pub blocks: Vec<BlockIds>,
    pub head: Option<Linear>,
    pub mlp: Option<MlpIds>,
}

/// The six modulation vectors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub shift_scale_gate_cond: [Vec<f64>; 3],
    pub shift_scale_gate_experts: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub d: usize,
    pub num_behaviors: usize,
    pub store: ParamStore,
    pub(crate) ids: DenoiserIds,
}

/// Interleaved `(sin, cos)` features of `t` at geometric frequencies.
pub fn timestep_features(t: usize, d: usize) -> Vec<f64> {
    assert!(d % 2 == 0);
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for k in 0..half {
        let f = 10000f64.powf(-(k as f64) / half as f64);
        let (s, c) = (t as f64 * f).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// `softmax(x · W_g)` with `W_g: [d, m]`.
pub fn gate(x: &[f64], w_g: &Tensor) -> Vec<f64> {
    let logits = Tensor::matrix(1, x.len(), x.to_vec()).matmul(w_g);
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, d: usize, num_behaviors: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if d % 2 != 0 || d == 0 {
            return Err(Error::Config("denoiser width must be even".into()));
        }
        let h = cfg.hidden;
        let mut store = ParamStore::new();
        let time = FeedForward::new(&mut store, "den.time", d, d, d, Init::FanIn, rng);
        let behavior_table = store.add("den.behavior", normal(&[num_behaviors + 1, d], 0.1, rng));
        let mut blocks = Vec::new();
        let mut head = None;
        let mut mlp = None;
        if cfg.kind == DenoiserKind::Mlp {
            let input = Linear::new(&mut store, "den.mlp.in", 4 * d, h, Init::FanIn, rng);
            let inner = (0..cfg.depth)
                .map(|i| FeedForward::new(&mut store, &format!("den.mlp.b{i}"), h, h, h, Init::FanIn, rng))
                .collect();
            let out = Linear::new(&mut store, "den.mlp.head", h, d, Init::Zero, rng);
            mlp = Some(MlpIds {
                input,
                blocks: inner,
                head: out,
            });
        } else {
            for i in 0..cfg.depth {
                let p = format!("den.b{i}");
                let modulation = Linear::new(&mut store, &format!("{p}.mod"), d, 6 * d, Init::Zero, rng);
                let cond_in = Linear::new(&mut store, &format!("{p}.cond_in"), 2 * d, d, Init::FanIn, rng);
                let cond_mlp = FeedForward::new(&mut store, &format!("{p}.cond_mlp"), d, h, d, Init::FanIn, rng);
                let mut block = BlockIds {
                    modulation,
                    cond_in,
                    cond_mlp,
                    gate: None,
                    shared: Vec::new(),
                    private: Vec::new(),
                    ffn: None,
                };
                if cfg.kind == DenoiserKind::Mcgln {
                    let m = cfg.shared_experts + cfg.private_experts;
                    block.gate = Some(store.add(format!("{p}.gate"), uniform_fan_in(&[d, m], d, rng)));
                    block.shared = (0..cfg.shared_experts)
                        .map(|j| FeedForward::new(&mut store, &format!("{p}.shared{j}"), d, h, d, Init::FanIn, rng))
                        .collect();
                    block.private = (0..num_behaviors)
                        .map(|b| {
                            (0..cfg.private_experts)
                                .map(|j| {
                                    let name = format!("{p}.private{b}.{j}");
                                    FeedForward::new(&mut store, &name, d, h, d, Init::FanIn, rng)
                                })
                                .collect()
                        })
                        .collect();
                } else {
                    block.ffn = Some(FeedForward::new(&mut store, &format!("{p}.ffn"), d, h, d, Init::FanIn, rng));
                }
                blocks.push(block);
            }
            head = Some(Linear::new(&mut store, "den.head", d, d, Init::Zero, rng));
        }
        Ok(Self {
            cfg,
            d,
            num_behaviors,
            store,
            ids: DenoiserIds {
                time,
                behavior_table,
                blocks,
                head,
                mlp,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter-name prefix of the private experts of behavior `b`.
    pub fn private_prefix(block: usize, behavior: usize) -> String {
        format!("den.b{block}.private{behavior}.")
    }

    /// Adds Gaussian noise to every parameter, including the zero-initialized
    /// modulation and output maps, so tests can probe a generic point.
    pub fn randomize(&mut self, std: f64, rng: &mut Rng) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            let noise = normal(&shape, std, rng);
            self.store.get_mut(id).add_assign(&noise);
        }
    }

    fn check_cond(&self, cond: Cond) {
        if let Cond::Behavior(b) = cond {
            assert!((b as usize) < self.num_behaviors, "behavior {b} out of range");
        }
    }

    fn cond_row(&self, cond: Cond) -> usize {
        match cond {
            Cond::Behavior(b) => b as usize,
            Cond::Null => self.num_behaviors,
        }
    }

    /// `[N, d]` timestep embeddings.
    fn time_var(&self, g: &mut Graph, ts: &[usize]) -> Var {
        let feats: Vec<f64> = ts.iter().flat_map(|&t| timestep_features(t, self.d)).collect();
        let x = g.constant(Tensor::matrix(ts.len(), self.d, feats));
        self.ids.time.forward(g, &self.store, x)
    }

    /// `e_t + e_b` for every row.
    pub(crate) fn condition_var(&self, g: &mut Graph, ts: &[usize], cond: Cond) -> Var {
        let et = self.time_var(g, ts);
        let table = g.param(&self.store, self.ids.behavior_table);
        let eb = g.gather(table, vec![Some(self.cond_row(cond)); ts.len()]);
        g.add(et, eb)
    }

    fn modulation_var(&self, g: &mut Graph, block: &BlockIds, c: Var) -> [Var; 6] {
        let a = g.silu(c);
        let m = block.modulation.forward(g, &self.store, a);
        let d = self.d;
        std::array::from_fn(|k| g.slice_cols(m, k * d, d))
    }

    fn experts_var(&self, g: &mut Graph, block: &BlockIds, x: Var, cond: Cond) -> Var {
        if let Some(ffn) = &block.ffn {
            return ffn.forward(g, &self.store, x);
        }
        let w_g = g.param(&self.store, block.gate.expect("expert block has a gate"));
        let logits = g.matmul(x, w_g);
        let ms = self.cfg.shared_experts;
        let mut experts: Vec<&FeedForward> = block.shared.iter().collect();
        let weights = match cond {
            Cond::Behavior(b) => {
                experts.extend(block.private[b as usize].iter());
                g.softmax(logits)
            }
            Cond::Null => {
                let shared = g.slice_cols(logits, 0, ms);
                g.softmax(shared)
            }
        };
        let mut out: Option<Var> = None;
        for (j, e) in experts.into_iter().enumerate() {
            let y = e.forward(g, &self.store, x);
            let w = g.slice_cols(weights, j, 1);
            let y = g.mul_col(y, w);
            out = Some(match out {
                None => y,
                Some(acc) => g.add(acc, y),
            });
        }
        out.expect("at least one expert")
    }

    pub(crate) fn block_var(&self, g: &mut Graph, block: &BlockIds, x: Var, z_agn: Var, c: Var, cond: Cond) -> Var {
        let [shift_s, scale_s, gate_s, shift_e, scale_e, gate_e] = self.modulation_var(g, block, c);
        let u = g.concat_cols(x, z_agn);
        let u = g.layer_norm(u);
        let p = block.cond_in.forward(g, &self.store, u);
        let ps = g.mul(p, scale_s);
        let p = g.add(p, ps);
        let p = g.add(p, shift_s);
        let p = block.cond_mlp.forward(g, &self.store, p);
        let p = g.mul(gate_s, p);
        let x_hat = g.add(x, p);
        let v = g.layer_norm(x_hat);
        let vs = g.mul(v, scale_e);
        let v = g.add(v, vs);
        let v = g.add(v, shift_e);
        let e = self.experts_var(g, block, v, cond);
        let e = g.mul(gate_e, e);
        g.add(x_hat, e)
    }

    /// Predicted noise `[N, d]` for rows sharing one condition.
    pub(crate) fn forward(&self, g: &mut Graph, z_t: Var, ts: &[usize], z_agn: Var, cond: Cond) -> Var {
        self.check_cond(cond);
        if let Some(mlp) = &self.ids.mlp {
            let et = self.time_var(g, ts);
            let table = g.param(&self.store, self.ids.behavior_table);
            let eb = g.gather(table, vec![Some(self.cond_row(cond)); ts.len()]);
            let x = g.concat_cols(z_t, z_agn);
            let x = g.concat_cols(x, et);
            let x = g.concat_cols(x, eb);
            let mut h = mlp.input.forward(g, &self.store, x);
            h = g.gelu(h);
            for b in &mlp.blocks {
                let f = b.forward(g, &self.store, h);
                h = g.add(h, f);
            }
            return mlp.head.forward(g, &self.store, h);
        }
        let c = self.condition_var(g, ts, cond);
        let mut x = z_t;
        for block in &self.ids.blocks {
            x = self.block_var(g, block, x, z_agn, c, cond);
        }
        self.ids.head.as_ref().expect("block denoiser has a head").forward(g, &self.store, x)
    }

    /// Mean squared error between predicted and true noise.
    pub(crate) fn loss_var(&self, g: &mut Graph, z_t: &Tensor, ts: &[usize], z_agn: &Tensor, cond: Cond, eps: Rc<Tensor>) -> Var {
        let zt = g.constant(z_t.clone());
        let za = g.constant(z_agn.clone());
        let out = self.forward(g, zt, ts, za, cond);
        g.mse(out, eps)
    }

    fn row_graph<R>(&self, f: impl FnOnce(&mut Graph) -> (Var, R)) -> (Vec<f64>, R) {
        let mut g = Graph::new();
        let (v, r) = f(&mut g);
        (g.value(v).data().to_vec(), r)
    }

    /// Timestep embedding of one step.
    pub fn timestep_embed(&self, t: usize) -> Vec<f64> {
        self.row_graph(|g| (self.time_var(g, &[t]), ())).0
    }

    /// Modulation vectors of `block` for one `(t, cond)`.
    pub fn modulation(&self, block: usize, t: usize, cond: Cond) -> Result<Modulation> {
        let ids = self.block_ids(block)?;
        self.check_cond(cond);
        let mut g = Graph::new();
        let c = self.condition_var(&mut g, &[t], cond);
        let m = self.modulation_var(&mut g, ids, c);
        let v = |k: usize| g.value(m[k]).data().to_vec();
        Ok(Modulation {
            shift_scale_gate_cond: [v(0), v(1), v(2)],
            shift_scale_gate_experts: [v(3), v(4), v(5)],
        })
    }

    fn block_ids(&self, block: usize) -> Result<&BlockIds> {
        self.ids
            .blocks
            .get(block)
            .ok_or_else(|| Error::Usage(format!("denoiser has no block {block}")))
    }

    /// Gate weights of `block` at input `x` (shared-only for the null condition).
    pub fn gate_weights(&self, block: usize, x: &[f64], cond: Cond) -> Result<Vec<f64>> {
        let ids = self.block_ids(block)?;
        let w = self.store.get(ids.gate.ok_or_else(|| Error::Usage("block has no gate".into()))?);
        let full = match cond {
            Cond::Behavior(_) => return Ok(gate(x, w)),
            Cond::Null => w,
        };
        let ms = self.cfg.shared_experts;
        let mut shared = Vec::with_capacity(self.d * ms);
        for r in 0..self.d {
            shared.extend_from_slice(&full.row(r)[..ms]);
        }
        Ok(gate(x, &Tensor::matrix(self.d, ms, shared)))
    }

    /// Expert mixture of `block` at input `x`.
    pub fn moe(&self, block: usize, x: &[f64], cond: Cond) -> Result<Vec<f64>> {
        let ids = self.block_ids(block)?;
        self.check_cond(cond);
        Ok(self
            .row_graph(|g| {
                let xv = g.constant(Tensor::matrix(1, self.d, x.to_vec()));
                (self.experts_var(g, ids, xv, cond), ())
            })
            .0)
    }

    /// One block applied to a single hidden vector.
    pub fn block(&self, block: usize, x: &[f64], z_agnostic: &[f64], t: usize, cond: Cond) -> Result<Vec<f64>> {
        let ids = self.block_ids(block)?;
        self.check_cond(cond);
        Ok(self
            .row_graph(|g| {
                let xv = g.constant(Tensor::matrix(1, self.d, x.to_vec()));
                let za = g.constant(Tensor::matrix(1, self.d, z_agnostic.to_vec()));
                let c = self.condition_var(g, &[t], cond);
                (self.block_var(g, ids, xv, za, c, cond), ())
            })
            .0)
    }

    /// Predicted noise for a single latent.
    pub fn denoise(&self, z_t: &[f64], t: usize, z_agnostic: &[f64], cond: Cond) -> Vec<f64> {
        let zt = Tensor::matrix(1, self.d, z_t.to_vec());
        let za = Tensor::matrix(1, self.d, z_agnostic.to_vec());
        self.predict(&zt, t, &za, cond).into_data()
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize, z_agnostic: &Tensor, cond: Cond) -> Tensor {
        let mut g = Graph::new();
        let zt = g.constant(z_t.clone());
        let za = g.constant(z_agnostic.clone());
        let ts = vec![t; z_t.rows()];
        let out = self.forward(&mut g, zt, &ts, za, cond);
        g.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn build(kind: DenoiserKind, ms: usize, mp: usize) -> Denoiser {
        let cfg = DenoiserConfig {
            kind,
            depth: 2,
            shared_experts: ms,
            private_experts: mp,
            hidden: 16,
        };
        Denoiser::new(cfg, 8, 3, &mut stream(3, "den-test", 0)).unwrap()
    }

    fn randomized(kind: DenoiserKind, ms: usize, mp: usize) -> Denoiser {
        let mut den = build(kind, ms, mp);
        den.randomize(0.3, &mut stream(3, "den-rand", 0));
        den
    }

    fn perturb_prefix(den: &mut Denoiser, prefix: &str) -> usize {
        let ids: Vec<ParamId> = den.store.ids().filter(|&id| den.store.name(id).starts_with(prefix)).collect();
        for &id in &ids {
            den.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.7);
        }
        ids.len()
    }

    fn inputs() -> (Vec<f64>, Vec<f64>) {
        let zt: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let za: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        (zt, za)
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [DenoiserKind::Mcgln, DenoiserKind::AdaLn, DenoiserKind::Mlp] {
            assert_eq!(DenoiserKind::parse(k.name()).unwrap(), k);
        }
        assert!(DenoiserKind::parse("unet").is_err());
    }

    #[test]
    fn raw_time_features_at_zero_alternate() {
        let f = timestep_features(0, 8);
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let den = build(DenoiserKind::Mcgln, 1, 1);
        assert_eq!(den.timestep_embed(17), den.timestep_embed(17));
        assert_eq!(den.timestep_embed(17).len(), 8);
    }

    #[test]
    fn gate_is_a_softmax() {
        let uniform = gate(&[1.0, -2.0], &Tensor::zeros(&[2, 4]));
        assert!(uniform.iter().all(|w| (w - 0.25).abs() < 1e-15));
        let w = gate(&[1.0], &Tensor::matrix(1, 2, vec![2f64.ln(), 0.0]));
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-9 && (w[1] - 1.0 / 3.0).abs() < 1e-9);
        let den = randomized(DenoiserKind::Mcgln, 2, 3);
        let (x, _) = inputs();
        for cond in [Cond::Behavior(1), Cond::Null] {
            let w = den.gate_weights(0, &x, cond).unwrap();
            assert_eq!(w.len(), if cond == Cond::Null { 2 } else { 5 });
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_map_at_initialization() {
        let den = build(DenoiserKind::Mcgln, 1, 1);
        let (zt, za) = inputs();
        for cond in [Cond::Behavior(0), Cond::Behavior(2), Cond::Null] {
            assert!(den.denoise(&zt, 50, &za, cond).iter().all(|&e| e == 0.0));
            assert_eq!(den.block(1, &zt, &za, 50, cond).unwrap(), zt);
            let m = den.modulation(0, 50, cond).unwrap();
            for v in m.shift_scale_gate_cond.iter().chain(&m.shift_scale_gate_experts) {
                assert!(v.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn null_routing_with_one_shared_expert_is_that_expert() {
        let den = randomized(DenoiserKind::Mcgln, 1, 2);
        let (x, _) = inputs();
        let got = den.moe(0, &x, Cond::Null).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, 8, x.clone()));
        let y = den.ids.blocks[0].shared[0].forward(&mut g, &den.store, xv);
        assert_eq!(got, g.value(y).data());
    }

    #[test]
    fn hard_routing_isolates_private_experts() {
        let base = randomized(DenoiserKind::Mcgln, 1, 2);
        let (zt, za) = inputs();
        for b in 0..3u32 {
            let mut other = base.clone();
            for b2 in (0..3).filter(|&b2| b2 != b as usize) {
                for blk in 0..2 {
                    assert!(perturb_prefix(&mut other, &Denoiser::private_prefix(blk, b2)) > 0);
                }
            }
            let cond = Cond::Behavior(b);
            assert_eq!(base.denoise(&zt, 80, &za, cond), other.denoise(&zt, 80, &za, cond));
        }
        let mut all = base.clone();
        for b in 0..3 {
            for blk in 0..2 {
                perturb_prefix(&mut all, &Denoiser::private_prefix(blk, b));
            }
        }
        assert_eq!(base.denoise(&zt, 80, &za, Cond::Null), all.denoise(&zt, 80, &za, Cond::Null));
        assert_ne!(
            base.denoise(&zt, 80, &za, Cond::Behavior(0)),
            all.denoise(&zt, 80, &za, Cond::Behavior(0))
        );
    }

    #[test]
    fn null_path_reads_only_the_null_row() {
        let base = randomized(DenoiserKind::Mcgln, 1, 1);
        let mut other = base.clone();
        let table = other.ids.behavior_table;
        for b in 0..3 {
            other.store.get_mut(table).row_mut(b).iter_mut().for_each(|x| *x -= 1.3);
        }
        assert_eq!(base.modulation(1, 9, Cond::Null).unwrap(), other.modulation(1, 9, Cond::Null).unwrap());
        assert_ne!(base.modulation(1, 9, Cond::Behavior(2)).unwrap(), other.modulation(1, 9, Cond::Behavior(2)).unwrap());
        let (zt, za) = inputs();
        assert_eq!(base.denoise(&zt, 9, &za, Cond::Null), other.denoise(&zt, 9, &za, Cond::Null));
    }

    #[test]
    fn agnostic_latent_enters_once_gates_open() {
        let den = randomized(DenoiserKind::Mcgln, 1, 1);
        let (zt, za) = inputs();
        let za2: Vec<f64> = za.iter().map(|v| v + 0.5).collect();
        let a = den.block(0, &zt, &za, 30, Cond::Behavior(1)).unwrap();
        let b = den.block(0, &zt, &za2, 30, Cond::Behavior(1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ablations_share_the_interface() {
        let (zt, za) = inputs();
        for kind in [DenoiserKind::AdaLn, DenoiserKind::Mlp] {
            let den = randomized(kind, 1, 1);
            for cond in [Cond::Behavior(1), Cond::Null] {
                let e = den.denoise(&zt, 10, &za, cond);
                assert_eq!(e.len(), 8);
                assert!(e.iter().all(|v| v.is_finite()));
            }
            assert_eq!(den.moe(0, &zt, Cond::Null).is_ok(), kind == DenoiserKind::AdaLn);
        }
        assert!(build(DenoiserKind::Mlp, 1, 1).denoise(&zt, 3, &za, Cond::Null).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn adaln_and_single_shared_expert_have_comparable_size() {
        let adaln = build(DenoiserKind::AdaLn, 1, 0).num_parameters() as f64;
        let moe = build(DenoiserKind::Mcgln, 1, 0).num_parameters() as f64;
        assert!((moe - adaln).abs() / adaln < 0.05, "{moe} vs {adaln}");
    }

    #[test]
    fn batched_prediction_matches_rows() {
        let den = randomized(DenoiserKind::Mcgln, 1, 1);
        let (zt, za) = inputs();
        let zt2: Vec<f64> = zt.iter().map(|v| -v).collect();
        let batch = den.predict(
            &Tensor::from_rows(&[zt.clone(), zt2.clone()]),
            40,
            &Tensor::from_rows(&[za.clone(), za.clone()]),
            Cond::Behavior(2),
        );
        let r0 = den.denoise(&zt, 40, &za, Cond::Behavior(2));
        let r1 = den.denoise(&zt2, 40, &za, Cond::Behavior(2));
        for (a, b) in batch.row(0).iter().zip(&r0).chain(batch.row(1).iter().zip(&r1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = DenoiserConfig::default();
        cfg.shared_experts = 0;
        assert!(cfg.validate().is_err());
        cfg.kind = DenoiserKind::AdaLn;
        assert!(cfg.validate().is_ok());
        assert!(Denoiser::new(DenoiserConfig::default(), 7, 2, &mut stream(0, "x", 0)).is_err());
    }
}
