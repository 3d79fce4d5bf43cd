//! Region embeddings from detector features, box geometry and label words.
//!
//! Each region's feature, its six spatial ratios and the max-pooled vector
//! of its label words are concatenated and passed through FC-ReLU-FC. The
//! resulting rows go through Transformer layers, a linear projection to the
//! joint width `D`, and more Transformer layers.

mod transformer;

use rand::Rng;

pub use transformer::{TransformerLayerParams, FF_MULTIPLIER};

use crate::dataio::{BoundingBox, ImageFeatures};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};

/// Number of spatial features per region.
pub const SPATIAL_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageEncoderDims {
    pub d_region: usize,
    pub d_word: usize,
    pub d_hidden: usize,
    pub embed_dim: usize,
    pub pre_layers: usize,
    pub post_layers: usize,
    pub heads: usize,
}

impl ImageEncoderDims {
    pub fn input_width(&self) -> usize {
        self.d_region + SPATIAL_DIM + self.d_word
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoderParams {
    pub dims: ImageEncoderDims,
    /// First FC, `(d_region + 6 + d_word) x d_hidden`.
    pub w_r: ParamId,
    /// Second FC, `d_hidden x d_hidden`.
    pub w_v: ParamId,
    pub pre: Vec<TransformerLayerParams>,
    /// `d_hidden x D`.
    pub projection: ParamId,
    pub post: Vec<TransformerLayerParams>,
}

impl ImageEncoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dims: ImageEncoderDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_r =
            store.register_uniform("image.proj.W_r", dims.input_width(), dims.d_hidden, rng)?;
        let w_v = store.register_uniform("image.proj.W_v", dims.d_hidden, dims.d_hidden, rng)?;
        let pre = (0..dims.pre_layers)
            .map(|l| {
                TransformerLayerParams::new(
                    store,
                    &format!("image.pre.{l}"),
                    dims.d_hidden,
                    dims.heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let projection =
            store.register_uniform("image.linear.W", dims.d_hidden, dims.embed_dim, rng)?;
        let post = (0..dims.post_layers)
            .map(|l| {
                TransformerLayerParams::new(
                    store,
                    &format!("image.post.{l}"),
                    dims.embed_dim,
                    dims.heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            w_r,
            w_v,
            pre,
            projection,
            post,
        })
    }
}

/// `[x1/w, y1/h, x2/w, y2/h, (x2-x1)/w, (y2-y1)/h]`.
pub fn spatial_features(b: &BoundingBox, image_size: (f32, f32)) -> Result<[f32; SPATIAL_DIM]> {
    let (w, h) = image_size;
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::shape(
            "spatial_features",
            format!("image size ({w}, {h}) must be positive"),
        ));
    }
    Ok([
        b.x1 / w,
        b.y1 / h,
        b.x2 / w,
        b.y2 / h,
        (b.x2 - b.x1) / w,
        (b.y2 - b.y1) / h,
    ])
}

/// Elementwise max over the rows of `label_words` (`k x d_word`); zeros
/// when `k = 0`.
pub fn label_semantic_feature(label_words: &Tensor<f32>) -> Vec<f32> {
    let d = label_words.shape()[1];
    let k = label_words.shape()[0];
    if k == 0 {
        return vec![0.0; d];
    }
    let mut out = label_words.row(0).to_vec();
    for r in 1..k {
        for (o, &v) in out.iter_mut().zip(label_words.row(r)) {
            *o = o.max(v);
        }
    }
    out
}

/// Rows `{r_i, rs_i, rt_i}` for every region, as an `m x (d_region + 6 + d_word)`
/// input tensor. `ablate_labels` replaces every `rt_i` with zeros.
pub fn region_inputs<T: Real>(img: &ImageFeatures, ablate_labels: bool) -> Result<Tensor<T>> {
    let (m, d_region) = img.regions.dims2()?;
    let d_word = img.label_words.first().map_or(0, |t| t.shape()[1]);
    let width = d_region + SPATIAL_DIM + d_word;
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend(
            img.regions
                .row(i)
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64)),
        );
        let rs = spatial_features(&img.boxes[i], img.image_size)?;
        data.extend(rs.iter().map(|&v| T::from_f64_lossy(v as f64)));
        if ablate_labels {
            data.extend(std::iter::repeat_n(T::zero(), d_word));
        } else {
            let rt = label_semantic_feature(&img.label_words[i]);
            data.extend(rt.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    Tensor::new(vec![m, width], data)
}

/// `W_v(ReLU(W_r x))` applied to every row of `inputs`.
pub fn region_projection<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ImageEncoderParams,
    inputs: NodeId,
) -> Result<NodeId> {
    let w_r = g.param(store, params.w_r);
    let w_v = g.param(store, params.w_v);
    let h = g.matmul(inputs, w_r)?;
    let h = g.relu(h);
    g.matmul(h, w_v)
}

/// Region embeddings `V`, `m x D`.
pub fn encode_image<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ImageEncoderParams,
    img: &ImageFeatures,
    ablate_pti: bool,
) -> Result<NodeId> {
    let inputs = region_inputs::<T>(img, ablate_pti)?;
    if inputs.shape()[1] != params.dims.input_width() {
        return Err(Error::shape(
            "encode_image",
            format!(
                "image {} gives region inputs of width {}, encoder expects {}",
                img.id,
                inputs.shape()[1],
                params.dims.input_width()
            ),
        ));
    }
    let x = g.input(inputs);
    let mut h = region_projection(g, store, params, x)?;
    for layer in &params.pre {
        h = layer.forward(g, store, h)?;
    }
    let proj = g.param(store, params.projection);
    h = g.matmul(h, proj)?;
    for layer in &params.post {
        h = layer.forward(g, store, h)?;
    }
    Ok(h)
}
