//! Pre-norm Transformer encoder layer without positional encoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Real, Tensor, LAYER_NORM_EPS};

/// Hidden width of the feedforward block, as a multiple of the layer width.
pub const FF_MULTIPLIER: usize = 2;

#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub width: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ff_in: ParamId,
    pub ff_out: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl TransformerLayerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{prefix}: width {width} is not divisible by {heads} heads"
            )));
        }
        let ff = width * FF_MULTIPLIER;
        Ok(Self {
            width,
            heads,
            w_q: store.register_uniform(format!("{prefix}.attn.W_q"), width, width, rng)?,
            w_k: store.register_uniform(format!("{prefix}.attn.W_k"), width, width, rng)?,
            w_v: store.register_uniform(format!("{prefix}.attn.W_v"), width, width, rng)?,
            w_o: store.register_uniform(format!("{prefix}.attn.W_o"), width, width, rng)?,
            ff_in: store.register_uniform(format!("{prefix}.ff.W_in"), width, ff, rng)?,
            ff_out: store.register_uniform(format!("{prefix}.ff.W_out"), ff, width, rng)?,
            ln1_gain: store.register(
                format!("{prefix}.ln1.gain"),
                Tensor::full(&[width], T::one()),
            )?,
            ln1_bias: store.register(format!("{prefix}.ln1.bias"), Tensor::zeros(&[width]))?,
            ln2_gain: store.register(
                format!("{prefix}.ln2.gain"),
                Tensor::full(&[width], T::one()),
            )?,
            ln2_bias: store.register(format!("{prefix}.ln2.bias"), Tensor::zeros(&[width]))?,
        })
    }

    /// `x + MHA(LN1(x))`, then `h + FF(LN2(h))`; `x` is `rows x width`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let (gain, bias) = (g.param(store, self.ln1_gain), g.param(store, self.ln1_bias));
        let normed = g.layer_norm(x, gain, bias, eps)?;
        let attended = self.attention(g, store, normed)?;
        let h = g.add(x, attended)?;

        let (gain, bias) = (g.param(store, self.ln2_gain), g.param(store, self.ln2_bias));
        let normed = g.layer_norm(h, gain, bias, eps)?;
        let w_in = g.param(store, self.ff_in);
        let w_out = g.param(store, self.ff_out);
        let hidden = g.matmul(normed, w_in)?;
        let hidden = g.relu(hidden);
        let ff = g.matmul(hidden, w_out)?;
        g.add(h, ff)
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (w_q, w_k, w_v, w_o) = (
            g.param(store, self.w_q),
            g.param(store, self.w_k),
            g.param(store, self.w_v),
            g.param(store, self.w_o),
        );
        let q = g.matmul(x, w_q)?;
        let k = g.matmul(x, w_k)?;
        let v = g.matmul(x, w_v)?;
        let head_dim = self.width / self.heads;
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();

        let mut merged: Option<NodeId> = None;
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = g.slice_cols(q, start, head_dim)?;
            let kh = g.slice_cols(k, start, head_dim)?;
            let vh = g.slice_cols(v, start, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.row_softmax(scores)?;
            let out = g.matmul(weights, vh)?;
            merged = Some(match merged {
                None => out,
                Some(acc) => g.concat_cols(acc, out)?,
            });
        }
        let merged = merged.expect("at least one head");
        g.matmul(merged, w_o)
    }
}
