//! Prominent-fragment fusion and caption-image similarity.
//!
//! For every region the closest word (by cosine) is its prominent fragment.
//! A gate blends the region with that word into `V*`. A word scores an image
//! by its best cosine against `V` plus its best cosine against `V*`, and a
//! caption scores an image by summing over its words.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    self, max_over_axis, Axis, Graph, NodeId, ParamId, ParamStore, Real, Tensor, COSINE_EPS,
};

#[derive(Debug, Clone)]
pub struct FusionParams {
    /// Gate weights, `2D x D`, applied to `[v_i, t_k]`.
    pub w_g: ParamId,
    /// Candidate weights, `2D x D`.
    pub w_h: ParamId,
}

impl FusionParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_g: store.register_uniform("gate.W_g", 2 * embed_dim, embed_dim, rng)?,
            w_h: store.register_uniform("gate.W_h", 2 * embed_dim, embed_dim, rng)?,
        })
    }
}

/// Index and cosine of the candidate row closest to `query`; ties go to
/// the lowest index.
pub fn prominent_fragment<T: Real>(query: &[T], candidates: &Tensor<T>) -> Result<(usize, T)> {
    let (q, d) = candidates.dims2()?;
    if q == 0 {
        return Err(Error::shape("prominent_fragment", "no candidates"));
    }
    if d != query.len() {
        return Err(Error::shape(
            "prominent_fragment",
            format!("query width {} vs candidate width {d}", query.len()),
        ));
    }
    let eps = T::from_f64_lossy(COSINE_EPS);
    let qn = numerics::norm(query);
    let cos = Tensor::new(
        vec![1, q],
        (0..q)
            .map(|j| {
                let row = candidates.row(j);
                numerics::dot(query, row) / (qn * numerics::norm(row)).max(eps)
            })
            .collect(),
    )?;
    let (values, idx) = max_over_axis(&cos, Axis::Cols)?;
    Ok((idx[0], values.data()[0]))
}

/// Output of [`gated_fusion`].
pub struct Fusion {
    pub fused: NodeId,
    /// Per region, the index of the word it was fused with.
    pub prominent: Vec<usize>,
    pub gate: NodeId,
}

/// `V*` with `v*_i = g_i * v_i + (1 - g_i) * tanh(W_h [v_i, t_k])` and
/// `g_i = sigmoid(W_g [v_i, t_k])`, `t_k` the prominent word of `v_i`.
pub fn gated_fusion<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &FusionParams,
    regions: NodeId,
    words: NodeId,
) -> Result<Fusion> {
    let eps = T::from_f64_lossy(COSINE_EPS);
    let cos = g.cosine_similarity_matrix(regions, words, eps)?;
    let (_, prominent) = g.max_over_axis(cos, Axis::Cols)?;
    let picked = g.gather_rows(words, &prominent)?;
    let joint = g.concat_cols(regions, picked)?;
    let (w_g, w_h) = (g.param(store, params.w_g), g.param(store, params.w_h));
    let gate = g.matmul(joint, w_g)?;
    let gate = g.sigmoid(gate);
    let candidate = g.matmul(joint, w_h)?;
    let candidate = g.tanh(candidate);
    // candidate + gate * (v - candidate)
    let diff = g.sub(regions, candidate)?;
    let gated = g.mul(gate, diff)?;
    let fused = g.add(candidate, gated)?;
    Ok(Fusion {
        fused,
        prominent,
        gate,
    })
}

/// Per-word score against an image: `max_j cos(t, v_j) + max_j cos(t, v*_j)`,
/// one value per row of `words`.
pub fn word_image_similarity<T: Real>(
    g: &mut Graph<T>,
    words: NodeId,
    regions: NodeId,
    fused: NodeId,
) -> Result<NodeId> {
    let eps = T::from_f64_lossy(COSINE_EPS);
    let plain = g.cosine_similarity_matrix(words, regions, eps)?;
    let (best_plain, _) = g.max_over_axis(plain, Axis::Cols)?;
    let enhanced = g.cosine_similarity_matrix(words, fused, eps)?;
    let (best_fused, _) = g.max_over_axis(enhanced, Axis::Cols)?;
    g.add(best_plain, best_fused)
}

/// Caption-image similarity from already encoded words `T` and regions `V`.
///
/// With `ablate_csf` no fusion happens and each word scores
/// `2 * max_j cos(t, v_j)`.
pub fn text_image_similarity<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &FusionParams,
    words: NodeId,
    regions: NodeId,
    ablate_csf: bool,
) -> Result<NodeId> {
    let per_word = if ablate_csf {
        let eps = T::from_f64_lossy(COSINE_EPS);
        let plain = g.cosine_similarity_matrix(words, regions, eps)?;
        let (best, _) = g.max_over_axis(plain, Axis::Cols)?;
        g.scale(best, T::from_f64_lossy(2.0))
    } else {
        let fusion = gated_fusion(g, store, params, regions, words)?;
        word_image_similarity(g, words, regions, fusion.fused)?
    };
    Ok(g.sum(per_word))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAlignment {
    pub region: usize,
    /// Word fused into this region, `None` when below the similarity floor.
    pub fused_word: Option<usize>,
    pub fused_token: Option<String>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: usize,
    pub token: String,
    /// Best region in `V`.
    pub region: usize,
    pub similarity: f64,
    /// Best region in `V*`.
    pub fused_region: usize,
    pub fused_similarity: f64,
}

/// Which fragments were matched for one caption-image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub caption_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub regions: Vec<RegionAlignment>,
    pub words: Vec<WordAlignment>,
    pub score: f64,
}

/// Builds an [`AlignmentReport`] from encoded words and regions.
///
/// `floor`, when set, marks regions whose best word cosine is below it as
/// fused with no word. Fusion itself is unaffected.
#[allow(clippy::too_many_arguments)]
pub fn alignment_report<T: Real>(
    store: &ParamStore<T>,
    params: &FusionParams,
    caption_id: &str,
    image_id: &str,
    tokens: &[String],
    words: &Tensor<T>,
    regions: &Tensor<T>,
    floor: Option<f64>,
) -> Result<AlignmentReport> {
    let mut g = Graph::new();
    let (t, v) = (g.input(words.clone()), g.input(regions.clone()));
    let fusion = gated_fusion(&mut g, store, params, v, t)?;
    let eps = T::from_f64_lossy(COSINE_EPS);
    let region_word = g.cosine_similarity_matrix(v, t, eps)?;
    let plain = g.cosine_similarity_matrix(t, v, eps)?;
    let enhanced = g.cosine_similarity_matrix(t, fusion.fused, eps)?;
    let score = text_image_similarity(&mut g, store, params, t, v, false)?;

    let token = |k: usize| tokens.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
    let rw = g.value(region_word);
    let regions_out = fusion
        .prominent
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let s = rw.at(i, k).to_f64_lossy();
            let keep = floor.is_none_or(|f| s >= f);
            RegionAlignment {
                region: i,
                fused_word: keep.then_some(k),
                fused_token: keep.then(|| token(k)),
                similarity: s,
            }
        })
        .collect();
    let (best_plain, idx_plain) = max_over_axis(g.value(plain), Axis::Cols)?;
    let (best_fused, idx_fused) = max_over_axis(g.value(enhanced), Axis::Cols)?;
    let words_out = (0..idx_plain.len())
        .map(|w| WordAlignment {
            word: w,
            token: token(w),
            region: idx_plain[w],
            similarity: best_plain.data()[w].to_f64_lossy(),
            fused_region: idx_fused[w],
            fused_similarity: best_fused.data()[w].to_f64_lossy(),
        })
        .collect();
    Ok(AlignmentReport {
        caption_id: caption_id.to_string(),
        image_id: image_id.to_string(),
        tokens: tokens.to_vec(),
        regions: regions_out,
        words: words_out,
        score: g.value(score).data()[0].to_f64_lossy(),
    })
}
