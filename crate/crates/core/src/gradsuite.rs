//! Finite-difference gradient suite over every differentiable operation,
//! each model component and the full batch loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{gated_fusion, text_image_similarity, FusionParams};
use crate::dataio::{generate, Batch, SyntheticSpec};
use crate::error::Result;
use crate::image_encoder::{encode_image, ImageEncoderDims, ImageEncoderParams};
use crate::numerics::{
    finite_difference_check, Axis, Graph, NodeId, ParamStore, Tensor, COSINE_EPS, LAYER_NORM_EPS,
};
use crate::text_encoder::{encode_text, TextEncoderParams};
use crate::training::{batch_similarity, triplet_loss_hard, Ablation, ModelConfig, ModelParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates drawn per instance for model components; operations check
/// every coordinate.
pub const COMPONENT_SAMPLES: usize = 64;

/// Worst relative error of one case over all its instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates whose `± h` passes crossed a branch.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(instance seed, parameter, index)` of the worst coordinate.
    pub worst: Option<(u64, String, usize)>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build = dyn Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<NodeId>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches")
}

fn run_case(
    name: &str,
    instances: usize,
    seed: u64,
    samples: Option<usize>,
    setup: impl Fn(&mut ChaCha8Rng) -> Result<(ParamStore<f64>, Box<Build>)>,
) -> Result<CaseResult> {
    let mut out = CaseResult {
        name: name.to_string(),
        instances,
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for i in 0..instances as u64 {
        let instance_seed = seed.wrapping_mul(1_000_003).wrapping_add(i);
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let (mut store, build) = setup(&mut rng)?;
        let report = finite_difference_check(&mut store, build, STEP, samples, instance_seed)?;
        out.coordinates += report.checked;
        out.skipped += report.skipped;
        if out.worst.is_none() || report.max_rel_error > out.max_rel_error {
            out.max_rel_error = report.max_rel_error;
            out.worst = report.worst.map(|(p, k, _, _)| (instance_seed, p, k));
        }
    }
    Ok(out)
}

/// `sum(op(x...) * w)` for random inputs `x` registered as parameters and a
/// fixed random weighting `w`.
fn op_case(
    name: &str,
    shapes: Vec<Vec<usize>>,
    op: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Copy + 'static,
    instances: usize,
    seed: u64,
) -> Result<CaseResult> {
    run_case(name, instances, seed, None, |rng| {
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.register(format!("x{i}"), random(rng, s))?;
        }
        let mut g = Graph::new();
        let ids: Vec<_> = store.ids().map(|id| g.param(&store, id)).collect();
        let out = op(&mut g, &ids)?;
        let weights = random(rng, g.value(out).shape());
        let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
            let ids: Vec<_> = p.ids().map(|id| g.param(p, id)).collect();
            let out = op(g, &ids)?;
            let w = g.input(weights.clone());
            let weighted = g.mul(out, w)?;
            Ok(g.sum(weighted))
        };
        Ok((store, Box::new(build) as Box<Build>))
    })
}

fn weighted_sum(g: &mut Graph<f64>, x: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let w = g.input(weights.clone());
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

const SUITE_DIMS: ImageEncoderDims = ImageEncoderDims {
    d_region: 6,
    d_word: 6,
    d_hidden: 8,
    embed_dim: 8,
    pre_layers: 1,
    post_layers: 1,
    heads: 2,
};

fn suite_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_images: 3,
        captions_per_image: 1,
        m: 4,
        n: 3,
        d_region: SUITE_DIMS.d_region,
        d_word: SUITE_DIMS.d_word,
        concepts: 2,
        noise: 0.1,
        seed,
    }
}

/// Runs every case with `instances` seeded random instances each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut results = vec![
        op_case(
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            |g, x| g.matmul(x[0], x[1]),
            instances,
            seed,
        )?,
        op_case(
            "add",
            vec![vec![2, 3], vec![2, 3]],
            |g, x| g.add(x[0], x[1]),
            instances,
            seed,
        )?,
        op_case(
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            |g, x| g.sub(x[0], x[1]),
            instances,
            seed,
        )?,
        op_case(
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            |g, x| g.mul(x[0], x[1]),
            instances,
            seed,
        )?,
        op_case(
            "affine",
            vec![vec![5]],
            |g, x| Ok(g.affine(x[0], -1.7, 0.3)),
            instances,
            seed,
        )?,
        op_case(
            "relu",
            vec![vec![3, 3]],
            |g, x| Ok(g.relu(x[0])),
            instances,
            seed,
        )?,
        op_case(
            "tanh",
            vec![vec![3, 3]],
            |g, x| Ok(g.tanh(x[0])),
            instances,
            seed,
        )?,
        op_case(
            "sigmoid",
            vec![vec![3, 3]],
            |g, x| Ok(g.sigmoid(x[0])),
            instances,
            seed,
        )?,
        op_case(
            "row_softmax",
            vec![vec![3, 4]],
            |g, x| g.row_softmax(x[0]),
            instances,
            seed,
        )?,
        op_case(
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            |g, x| g.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS),
            instances,
            seed,
        )?,
        op_case(
            "max_over_cols",
            vec![vec![3, 4]],
            |g, x| Ok(g.max_over_axis(x[0], Axis::Cols)?.0),
            instances,
            seed,
        )?,
        op_case(
            "max_over_rows",
            vec![vec![3, 4]],
            |g, x| Ok(g.max_over_axis(x[0], Axis::Rows)?.0),
            instances,
            seed,
        )?,
        op_case(
            "cosine_similarity",
            vec![vec![3, 4], vec![2, 4]],
            |g, x| g.cosine_similarity_matrix(x[0], x[1], COSINE_EPS),
            instances,
            seed,
        )?,
        op_case(
            "concat_cols",
            vec![vec![2, 3], vec![2, 2]],
            |g, x| g.concat_cols(x[0], x[1]),
            instances,
            seed,
        )?,
        op_case(
            "slice_cols",
            vec![vec![2, 5]],
            |g, x| g.slice_cols(x[0], 1, 3),
            instances,
            seed,
        )?,
        op_case(
            "gather_rows",
            vec![vec![3, 2]],
            |g, x| g.gather_rows(x[0], &[2, 0, 2]),
            instances,
            seed,
        )?,
        op_case(
            "transpose",
            vec![vec![2, 3]],
            |g, x| g.transpose(x[0]),
            instances,
            seed,
        )?,
        op_case(
            "sum",
            vec![vec![2, 3]],
            |g, x| Ok(g.sum(x[0])),
            instances,
            seed,
        )?,
        op_case(
            "diagonal",
            vec![vec![3, 3]],
            |g, x| g.diagonal(x[0]),
            instances,
            seed,
        )?,
        op_case(
            "stack",
            vec![vec![1], vec![1], vec![1], vec![1]],
            |g, x| g.stack(x, &[2, 2]),
            instances,
            seed,
        )?,
        op_case(
            "triplet_loss_hard",
            vec![vec![4, 4]],
            |g, x| triplet_loss_hard(g, x[0], 0.2),
            instances,
            seed,
        )?,
    ];

    results.push(run_case(
        "image_encoder",
        instances,
        seed,
        Some(COMPONENT_SAMPLES),
        |rng| {
            let data = generate(&suite_spec(rng.random()))?.dataset;
            let mut store = ParamStore::new();
            let params = ImageEncoderParams::new(&mut store, SUITE_DIMS, rng)?;
            let img = data.images[0].clone();
            let weights = random(rng, &[img.num_regions(), SUITE_DIMS.embed_dim]);
            let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
                let v = encode_image(g, p, &params, &img, false)?;
                weighted_sum(g, v, &weights)
            };
            Ok((store, Box::new(build) as Box<Build>))
        },
    )?);

    for (name, normalize) in [("text_encoder", true), ("text_encoder_literal", false)] {
        results.push(run_case(
            name,
            instances,
            seed,
            Some(COMPONENT_SAMPLES),
            |rng| {
                let words = random(rng, &[4, SUITE_DIMS.d_word]).cast::<f32>();
                let mut store = ParamStore::new();
                let params = TextEncoderParams::new(
                    &mut store,
                    SUITE_DIMS.d_word,
                    SUITE_DIMS.embed_dim,
                    rng,
                )?;
                let weights = random(rng, &[4, SUITE_DIMS.embed_dim]);
                let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
                    let t = encode_text(g, p, &params, &words, false, normalize)?;
                    weighted_sum(g, t, &weights)
                };
                Ok((store, Box::new(build) as Box<Build>))
            },
        )?);
    }

    results.push(run_case(
        "gated_fusion",
        instances,
        seed,
        Some(COMPONENT_SAMPLES),
        |rng| {
            let d = 4;
            let mut store = ParamStore::new();
            let params = FusionParams::new(&mut store, d, rng)?;
            let regions = store.register("V", random(rng, &[3, d]))?;
            let words = store.register("T", random(rng, &[2, d]))?;
            let weights = random(rng, &[3, d]);
            let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
                let (v, t) = (g.param(p, regions), g.param(p, words));
                let fusion = gated_fusion(g, p, &params, v, t)?;
                weighted_sum(g, fusion.fused, &weights)
            };
            Ok((store, Box::new(build) as Box<Build>))
        },
    )?);

    results.push(run_case(
        "text_image_similarity",
        instances,
        seed,
        Some(COMPONENT_SAMPLES),
        |rng| {
            let d = 4;
            let mut store = ParamStore::new();
            let params = FusionParams::new(&mut store, d, rng)?;
            let regions = store.register("V", random(rng, &[3, d]))?;
            let words = store.register("T", random(rng, &[3, d]))?;
            let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
                let (v, t) = (g.param(p, regions), g.param(p, words));
                text_image_similarity(g, p, &params, t, v, false)
            };
            Ok((store, Box::new(build) as Box<Build>))
        },
    )?);

    results.push(run_case(
        "full_loss",
        instances,
        seed,
        Some(COMPONENT_SAMPLES),
        |rng| {
            let data = generate(&suite_spec(rng.random()))?.dataset;
            let config = ModelConfig {
                d_region: SUITE_DIMS.d_region,
                d_word: SUITE_DIMS.d_word,
                hidden_dim: SUITE_DIMS.d_hidden,
                embed_dim: SUITE_DIMS.embed_dim,
                pre_layers: 1,
                post_layers: 1,
                heads: 2,
                normalize_affinity: true,
            };
            let model = ModelParams::<f64>::new(config, rng.random())?;
            let store = model.store.clone();
            let batch =
                Batch::from_captions((0..data.num_captions()).collect(), data.caption_images());
            let build = move |p: &ParamStore<f64>, g: &mut Graph<f64>| {
                let mut m = model.clone();
                m.store.copy_values_from(p)?;
                let s = batch_similarity(g, &m, &data, &batch, Ablation::default())?;
                triplet_loss_hard(g, s, 0.2)
            };
            Ok((store, Box::new(build) as Box<Build>))
        },
    )?);

    Ok(results)
}
