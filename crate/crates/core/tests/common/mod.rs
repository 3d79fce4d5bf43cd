//! Loop-based reference implementations shared by the integration tests.
//! Nothing here calls into the crate's numeric code.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn unflatten(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(|c| c.to_vec()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    let den = na.sqrt() * nb.sqrt();
    dot / if den > 1e-8 { den } else { 1e-8 }
}

/// Index of the first maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Caption-image similarity with the gated fusion written out as loops.
/// `w_g`, `w_h` are `2D x D`.
pub fn oracle_similarity(
    words: &Mat,
    regions: &Mat,
    w_g: &Mat,
    w_h: &Mat,
    ablate_csf: bool,
) -> f64 {
    let d = regions[0].len();
    let mut fused: Mat = Vec::new();
    for v in regions {
        let cos: Vec<f64> = words.iter().map(|t| cosine(v, t)).collect();
        let k = argmax(&cos);
        let joint: Vec<f64> = v.iter().chain(words[k].iter()).copied().collect();
        let mut row = vec![0.0; d];
        for c in 0..d {
            let mut zg = 0.0;
            let mut zh = 0.0;
            for e in 0..2 * d {
                zg += joint[e] * w_g[e][c];
                zh += joint[e] * w_h[e][c];
            }
            let gate = 1.0 / (1.0 + (-zg).exp());
            let cand = zh.tanh();
            row[c] = gate * v[c] + (1.0 - gate) * cand;
        }
        fused.push(row);
    }
    let mut total = 0.0;
    for t in words {
        let plain = regions
            .iter()
            .map(|v| cosine(t, v))
            .fold(f64::NEG_INFINITY, f64::max);
        if ablate_csf {
            total += 2.0 * plain;
        } else {
            let enhanced = fused
                .iter()
                .map(|v| cosine(t, v))
                .fold(f64::NEG_INFINITY, f64::max);
            total += plain + enhanced;
        }
    }
    total
}

/// Hardest-negative triplet loss by enumerating every negative.
pub fn oracle_triplet(s: &Mat, margin: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut hardest_image = f64::NEG_INFINITY;
        let mut hardest_caption = f64::NEG_INFINITY;
        for o in 0..b {
            if o != a {
                hardest_image = hardest_image.max(s[a][o]);
                hardest_caption = hardest_caption.max(s[o][a]);
            }
        }
        if b > 1 {
            total += (margin - s[a][a] + hardest_image).max(0.0);
            total += (margin - s[a][a] + hardest_caption).max(0.0);
        }
    }
    total
}

/// Recall@K by fully sorting every query's candidates (score descending,
/// index ascending on ties).
pub fn oracle_recall(scores: &Mat, caption_image: &[usize], text_retrieval: bool, k: usize) -> f64 {
    let captions = scores.len();
    let images = scores[0].len();
    let ranked = |mut idx: Vec<usize>, key: &dyn Fn(usize) -> f64| {
        idx.sort_by(|&x, &y| key(y).partial_cmp(&key(x)).unwrap().then(x.cmp(&y)));
        idx
    };
    let mut hits = 0;
    if text_retrieval {
        for i in 0..images {
            let order = ranked((0..captions).collect(), &|c| scores[c][i]);
            if order[..k].iter().any(|&c| caption_image[c] == i) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / images as f64
    } else {
        for c in 0..captions {
            let order = ranked((0..images).collect(), &|i| scores[c][i]);
            if order[..k].contains(&caption_image[c]) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / captions as f64
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + 1e-6).sqrt();
    (0..x.len())
        .map(|j| gain[j] * (x[j] - mean) / s + bias[j])
        .collect()
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|c| (0..x.len()).map(|r| x[r] * w[r][c]).sum())
        .collect()
}

/// One pre-norm Transformer layer; `p(name)` returns `{prefix}.{name}` as
/// a matrix (vectors come back as a single row).
pub fn oracle_transformer(x: &Mat, heads: usize, p: &dyn Fn(&str) -> Mat) -> Mat {
    let (m, d) = (x.len(), x[0].len());
    let hd = d / heads;
    let ln1: Mat = x
        .iter()
        .map(|r| layer_norm(r, &p("ln1.gain")[0], &p("ln1.bias")[0]))
        .collect();
    let q: Mat = ln1.iter().map(|r| vec_mat(r, &p("attn.W_q"))).collect();
    let k: Mat = ln1.iter().map(|r| vec_mat(r, &p("attn.W_k"))).collect();
    let v: Mat = ln1.iter().map(|r| vec_mat(r, &p("attn.W_v"))).collect();
    let mut merged = vec![vec![0.0; d]; m];
    for h in 0..heads {
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    (0..hd)
                        .map(|c| q[i][h * hd + c] * k[j][h * hd + c])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                merged[i][h * hd + c] = (0..m).map(|j| e[j] / z * v[j][h * hd + c]).sum();
            }
        }
    }
    let w_o = p("attn.W_o");
    let h1: Mat = (0..m)
        .map(|i| {
            let a = vec_mat(&merged[i], &w_o);
            (0..d).map(|c| x[i][c] + a[c]).collect()
        })
        .collect();
    h1.iter()
        .map(|r| {
            let n = layer_norm(r, &p("ln2.gain")[0], &p("ln2.bias")[0]);
            let hidden: Vec<f64> = vec_mat(&n, &p("ff.W_in"))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let f = vec_mat(&hidden, &p("ff.W_out"));
            (0..d).map(|c| r[c] + f[c]).collect()
        })
        .collect()
}

/// Image encoder from its per-region inputs `[r, rs, rt]`.
pub fn oracle_image_encoder(
    inputs: &Mat,
    heads: usize,
    pre: usize,
    post: usize,
    p: &dyn Fn(&str) -> Mat,
) -> Mat {
    let w_r = p("image.proj.W_r");
    let w_v = p("image.proj.W_v");
    let mut x: Mat = inputs
        .iter()
        .map(|r| {
            let h: Vec<f64> = vec_mat(r, &w_r).into_iter().map(|v| v.max(0.0)).collect();
            vec_mat(&h, &w_v)
        })
        .collect();
    for l in 0..pre {
        x = oracle_transformer(&x, heads, &|n| p(&format!("image.pre.{l}.{n}")));
    }
    let proj = p("image.linear.W");
    x = x.iter().map(|r| vec_mat(r, &proj)).collect();
    for l in 0..post {
        x = oracle_transformer(&x, heads, &|n| p(&format!("image.post.{l}.{n}")));
    }
    x
}
