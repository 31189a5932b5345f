//! Masked multi-behavior autoencoder: a bidirectional transformer encoder
//! over `(item, behavior)` tokens and a decoder that scores latent vectors
//! against the item embedding table.

mod dump;
mod encoder;
mod rotary;

pub use dump::{attention_legend, parse_attention_grid, write_attention_dump, write_attention_grid};
pub use encoder::mbae_loss;
pub use rotary::{barope_transform, dot, rope_frequencies, rope_transform, rotate_with};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, Linear, Norm};
use crate::params::{normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How token positions enter the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Learned absolute position embeddings added to the input.
    Absolute,
    /// Rotary encoding of attention queries and keys.
    Rotary,
    /// Rotary encoding with per-pair positive scales predicted from each
    /// token's behavior.
    BehaviorRotary,
}

impl PositionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ape" | "absolute" => Ok(Self::Absolute),
            "rope" | "rotary" => Ok(Self::Rotary),
            "barope" | "behavior-rotary" => Ok(Self::BehaviorRotary),
            _ => Err(Error::Config(format!("unknown position mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Absolute => "ape",
            Self::Rotary => "rope",
            Self::BehaviorRotary => "barope",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub position: PositionMode,
    /// Add the behavior embedding to the input in the rotary modes.
    pub behavior_in_input: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            layers: 2,
            ffn_dim: 256,
            dropout: 0.1,
            position: PositionMode::BehaviorRotary,
            behavior_in_input: true,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d={} must be a positive multiple of model.heads={}",
                self.d, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("per-head dimension must be even".into()));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model.layers and model.ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("model.rope_base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Whether a latent was read with its behavior visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    Specific(u32),
    Agnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPreference {
    pub z: Vec<f64>,
    pub context: Context,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerIds {
    pub norm1: Norm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Linear,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct MbaeIds {
    pub item_table: ParamId,
    pub behavior_table: ParamId,
    pub position_table: Option<ParamId>,
    pub layers: Vec<LayerIds>,
    pub final_norm: Norm,
    pub behavior_net: Option<FeedForward>,
    pub decoder: FeedForward,
}

/// Encoder parameter names start with one of these.
pub const ENCODER_PREFIXES: [&str; 3] = ["emb.", "enc.", "barope."];
/// Decoder parameter names start with this.
pub const DECODER_PREFIX: &str = "dec.";

/// Initial bias of the behavior-scale head: `softplus(ln(e - 1)) = 1`.
const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug, PartialEq)]
pub struct Mbae {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub seq_len: usize,
    pub store: ParamStore,
    pub(crate) ids: MbaeIds,
    /// Replaces every behavior scale with this constant when set.
    pub modulation_override: Option<f64>,
}

impl Mbae {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let d = cfg.d;
        let mut store = ParamStore::new();
        let table = |store: &mut ParamStore, name: &str, real: usize, rng: &mut Rng| {
            let mut t = normal(&[real + 2, d], 0.1, rng);
            t.row_mut(real).iter_mut().for_each(|x| *x = 0.0);
            store.add(name, t)
        };
        let item_table = table(&mut store, "emb.item", vocab.num_items, rng);
        let behavior_table = table(&mut store, "emb.behavior", vocab.num_behaviors, rng);
        let position_table = (cfg.position == PositionMode::Absolute)
            .then(|| store.add("emb.position", normal(&[seq_len, d], 0.1, rng)));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("enc.l{l}");
            let mut square = |store: &mut ParamStore, n: &str| {
                store.add(format!("{p}.{n}"), crate::params::uniform_fan_in(&[d, d], d, rng))
            };
            let wq = square(&mut store, "wq");
            let wk = square(&mut store, "wk");
            let wv = square(&mut store, "wv");
            layers.push(LayerIds {
                norm1: Norm::new(&mut store, &format!("{p}.norm1"), d),
                wq,
                wk,
                wv,
                wo: Linear::new(&mut store, &format!("{p}.wo"), d, d, Init::FanIn, rng),
                norm2: Norm::new(&mut store, &format!("{p}.norm2"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, cfg.ffn_dim, d, Init::FanIn, rng),
            });
        }
        let final_norm = Norm::new(&mut store, "enc.norm", d);
        let behavior_net = (cfg.position == PositionMode::BehaviorRotary).then(|| {
            let net = FeedForward::new(&mut store, "barope.net", d, d, d / 2, Init::Zero, rng);
            store
                .get_mut(net.l2.b)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = UNIT_SOFTPLUS_BIAS);
            net
        });
        let decoder = FeedForward::new(&mut store, "dec.ffn", d, d, d, Init::Zero, rng);
        Ok(Self {
            cfg,
            vocab,
            seq_len,
            store,
            ids: MbaeIds {
                item_table,
                behavior_table,
                position_table,
                layers,
                final_norm,
                behavior_net,
                decoder,
            },
            modulation_override: None,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn item_table(&self) -> &Tensor {
        self.store.get(self.ids.item_table)
    }

    pub fn behavior_table(&self) -> &Tensor {
        self.store.get(self.ids.behavior_table)
    }

    /// Trains only the decoder from now on.
    pub fn freeze_all_but_decoder(&mut self) {
        self.store.set_all_trainable(false);
        self.store.set_trainable_prefix(DECODER_PREFIX, true);
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.store.set_all_trainable(on);
    }

    /// Randomizes the zero-initialized heads so that tests exercise a
    /// generic parameter point.
    pub fn randomize_heads(&mut self, std: f64, rng: &mut Rng) {
        let mut ids = vec![self.ids.decoder.l2.w, self.ids.decoder.l2.b];
        if let Some(net) = self.ids.behavior_net {
            ids.extend([net.l2.w, net.l2.b]);
        }
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            let noise = normal(&shape, std, rng);
            self.store.get_mut(id).add_assign(&noise);
        }
    }

    /// Checks that every token of `seq` has a table row and the length is `L`.
    pub fn check_sequence(&self, seq: &crate::data::Sequence) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::Usage(format!(
                "sequence length {} differs from model length {}",
                seq.len(),
                self.seq_len
            )));
        }
        if seq.length_real == 0 || seq.length_real > seq.len() {
            return Err(Error::Usage("sequence has no real tokens".into()));
        }
        for pos in seq.first_real()..seq.len() {
            if self.vocab.item_row(seq.items[pos]).is_none()
                || self.vocab.behavior_row(seq.behaviors[pos]).is_none()
            {
                return Err(Error::Internal(format!(
                    "token ({}, {}) at position {pos} is outside the embedding tables",
                    seq.items[pos], seq.behaviors[pos]
                )));
            }
        }
        Ok(())
    }
}
