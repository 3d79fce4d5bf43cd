//! Word embeddings refined by one residual graph convolution over a dense
//! affinity graph.
//!
//! All weights act on row vectors from the right, so with `S` the `n x D`
//! embedded words:
//!
//! ```text
//! R = (S W_phi)(S W_psi)^T
//! T = ((M S) W_g) W_r + S,   M = softmax_rows(R) or R
//! ```

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub d_word: usize,
    pub embed_dim: usize,
    /// `d_word x D`.
    pub embed: ParamId,
    pub w_phi: ParamId,
    pub w_psi: ParamId,
    /// GCN node transform.
    pub gcn_w_g: ParamId,
    /// GCN output transform.
    pub gcn_w_r: ParamId,
}

impl TextEncoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d_word: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_word,
            embed_dim,
            embed: store.register_uniform("text.embed.W", d_word, embed_dim, rng)?,
            w_phi: store.register_uniform("text.affinity.W_phi", embed_dim, embed_dim, rng)?,
            w_psi: store.register_uniform("text.affinity.W_psi", embed_dim, embed_dim, rng)?,
            gcn_w_g: store.register_uniform("text.gcn.W_g", embed_dim, embed_dim, rng)?,
            gcn_w_r: store.register_uniform("text.gcn.W_r", embed_dim, embed_dim, rng)?,
        })
    }
}

pub fn embed_words<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TextEncoderParams,
    words: NodeId,
) -> Result<NodeId> {
    let w = g.param(store, params.embed);
    g.matmul(words, w)
}

/// Pairwise affinity `R[i][j] = (W_phi s_i) . (W_psi s_j)`, `n x n`.
pub fn affinity_matrix<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TextEncoderParams,
    embedded: NodeId,
) -> Result<NodeId> {
    let (w_phi, w_psi) = (g.param(store, params.w_phi), g.param(store, params.w_psi));
    let phi = g.matmul(embedded, w_phi)?;
    let psi = g.matmul(embedded, w_psi)?;
    let psi_t = g.transpose(psi)?;
    g.matmul(phi, psi_t)
}

/// `((M S) W_g) W_r + S` with `M` the row-softmax of `affinity` when
/// `normalize`, else `affinity` itself.
pub fn gcn_residual<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TextEncoderParams,
    embedded: NodeId,
    affinity: NodeId,
    normalize: bool,
) -> Result<NodeId> {
    let mixing = if normalize {
        g.row_softmax(affinity)?
    } else {
        affinity
    };
    let (w_g, w_r) = (
        g.param(store, params.gcn_w_g),
        g.param(store, params.gcn_w_r),
    );
    let mixed = g.matmul(mixing, embedded)?;
    let h = g.matmul(mixed, w_g)?;
    let h = g.matmul(h, w_r)?;
    g.add(h, embedded)
}

/// Word embeddings `T`, `n x D`. With `ablate_tgr` the graph step is skipped
/// and the embedded words are returned directly.
pub fn encode_text<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TextEncoderParams,
    words: &Tensor<f32>,
    ablate_tgr: bool,
    normalize: bool,
) -> Result<NodeId> {
    let words = g.input(words.cast());
    let embedded = embed_words(g, store, params, words)?;
    if ablate_tgr {
        return Ok(embedded);
    }
    let affinity = affinity_matrix(g, store, params, embedded)?;
    gcn_residual(g, store, params, embedded, affinity, normalize)
}
