use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Init, LayerNorm, Linear, Mlp3};
use super::{check_input, ModelError};
use crate::tensorcore::{Graph, MhaWeights, NormMode, ParamId, ParamStore, Real, Tensor, TensorError, Var};

/// Time steps per token; a token holds both channels of one patch.
pub const PATCH_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsrmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: (usize, usize),
    pub n_classes: usize,
}

impl LsrmConfig {
    pub fn new(n_classes: usize) -> Self {
        Self { d_model: 64, n_heads: 4, ffn_hidden: 128, head_hidden: (128, 64), n_classes }
    }

    pub fn validate(&self, input_len: usize) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(format!("lsrm: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.ffn_hidden == 0 || self.n_classes == 0 || self.head_hidden.0 == 0 || self.head_hidden.1 == 0 {
            return fail("classes and hidden widths must be positive".into());
        }
        if input_len == 0 || !input_len.is_multiple_of(PATCH_LEN) {
            return fail(format!("input length {input_len} is not a multiple of the patch length {PATCH_LEN}"));
        }
        Ok(())
    }
}

/// Post-norm transformer encoder block:
/// `h = LN(x + MHA(x))`, `out = LN(h + FFN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub n_heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Query, value and output projection biases.
    pub biases: [ParamId; 3],
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self, TensorError> {
        let bound = Init::Xavier.bound(d, d);
        let mut proj = |p: &str| store.add(&format!("{name}.attn.{p}"), super::layers::uniform(rng, &[d, d], bound));
        let (wq, wk, wv, wo) = (proj("wq")?, proj("wk")?, proj("wv")?, proj("wo")?);
        let biases = [
            store.add(&format!("{name}.attn.bq"), Tensor::zeros([d]))?,
            store.add(&format!("{name}.attn.bv"), Tensor::zeros([d]))?,
            store.add(&format!("{name}.attn.bo"), Tensor::zeros([d]))?,
        ];
        Ok(Self {
            n_heads,
            wq,
            wk,
            wv,
            wo,
            biases,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, ffn_hidden, Init::He)?,
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), ffn_hidden, d, Init::Xavier)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut p = |id| g.param(store, id);
        let w = MhaWeights {
            wq: p(self.wq)?,
            wk: p(self.wk)?,
            wv: p(self.wv)?,
            wo: p(self.wo)?,
            biases: Some([p(self.biases[0])?, p(self.biases[1])?, p(self.biases[2])?]),
        };
        let a = g.multi_head_attention(x, &w, self.n_heads)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ffn1.forward(g, store, h)?;
        let f = g.relu(f)?;
        let f = self.ffn2.forward(g, store, f)?;
        let out = g.add(h, f)?;
        self.norm2.forward(g, store, out)
    }
}

/// Attention expert: patch embedding, one encoder block, mean pooling over
/// tokens and a three-layer classifier head with a zero-initialized output
/// layer. There is no positional
/// encoding, so the encoder is equivariant to token order.
#[derive(Clone, Debug)]
pub struct Lsrm {
    pub config: LsrmConfig,
    pub input_len: usize,
    pub embed: Linear,
    pub encoder: EncoderBlock,
    pub head: Mlp3,
}

impl Lsrm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: &LsrmConfig, input_len: usize) -> Result<Self, ModelError> {
        config.validate(input_len)?;
        let d = config.d_model;
        let embed = Linear::new(store, rng, &format!("{prefix}.embed"), 2 * PATCH_LEN, d, Init::Xavier)?;
        let encoder = EncoderBlock::new(store, rng, &format!("{prefix}.encoder"), d, config.n_heads, config.ffn_hidden)?;
        let (h1, h2) = config.head_hidden;
        let head = Mlp3::new(store, rng, &format!("{prefix}.head"), [d, h1, h2, config.n_classes], Init::Zero)?;
        Ok(Self { config: config.clone(), input_len, embed, encoder, head })
    }

    pub fn n_tokens(&self) -> usize {
        self.input_len / PATCH_LEN
    }

    /// `[B, 2, L]` frames to `[B, T, 2·PATCH_LEN]` tokens; token `t` is the
    /// I patch followed by the Q patch of time steps `8t .. 8t+8`.
    pub fn tokens<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, ModelError> {
        let b = check_input(g, x, self.input_len)?;
        let t = self.n_tokens();
        let p = g.reshape(x, &[b, 2, t, PATCH_LEN])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        Ok(g.reshape(p, &[b, t, 2 * PATCH_LEN])?)
    }

    /// `[B, 2, L]` frames to `[B, K]` class probabilities. Layer norm has no
    /// batch state, so `mode` does not change the result.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var, _mode: NormMode) -> Result<Var, ModelError> {
        let tokens = self.tokens(g, x)?;
        let e = self.embed.forward(g, store, tokens)?;
        let h = self.encoder.forward(g, store, e)?;
        let pooled = g.global_avg_pool(h)?;
        let logits = self.head.forward(g, store, pooled)?;
        Ok(g.softmax(logits, 1)?)
    }
}
