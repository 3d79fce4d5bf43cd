//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs single-threaded.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    flatten, oracle_recall, oracle_similarity, oracle_triplet, random_mat, unflatten, Mat,
};
use cpfean::alignment::{gated_fusion, text_image_similarity, FusionParams};
use cpfean::dataio::{generate, CaptionFeatures, Dataset, SyntheticSpec};
use cpfean::eval::{recall_at_k, rsum, similarity_matrix, Direction, SimilarityMatrix};
use cpfean::gradsuite::run_suite;
use cpfean::numerics::{Graph, ParamStore, Tensor, COSINE_EPS};
use cpfean::training::{
    fit, triplet_loss_value, Ablation, EpochLog, ModelConfig, ModelParams, TrainConfig,
    FINAL_CHECKPOINT,
};
use cpfean::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], flatten(m)).unwrap()
}

fn overfit_config(ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig::new("in-memory");
    c.embed_dim = 32;
    c.hidden_dim = 32;
    c.lr = 1e-3;
    c.epochs = 60;
    c.seed = 7;
    c.ablation = ablation;
    c
}

fn perfect(log: &EpochLog) -> bool {
    log.validation.text_r1 == Some(100.0) && log.validation.image_r1 == Some(100.0)
}

/// Trains on the overfit set; returns the model and the first epoch at
/// which R@1 is 100% both ways, provided it still is at the end.
fn overfit(
    data: &Dataset,
    ablation: Ablation,
) -> cpfean::Result<(ModelParams<f32>, Option<usize>, Duration)> {
    let start = Instant::now();
    let (model, logs) = fit::<f32>(data, data, &overfit_config(ablation))?;
    let first = logs.iter().find(|l| perfect(l)).map(|l| l.epoch);
    let converged = logs.last().is_some_and(perfect);
    Ok((model, first.filter(|_| converged), start.elapsed()))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = run_suite(1, 20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    check(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} cases x 20 instances, worst rel err {worst:.2e}, {:.1}s, failing {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(data: &Dataset) -> (Outcome, Option<ModelParams<f32>>) {
    match overfit(data, Ablation::default()) {
        Ok((model, first, elapsed)) => {
            let ok = first.is_some() && elapsed < Duration::from_secs(300);
            let detail = format!(
                "R@1 100% both ways from epoch {first:?}, {:.1}s",
                elapsed.as_secs_f64()
            );
            (check(ok, detail), Some(model))
        }
        Err(e) => (Err(e.to_string()), None),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m, d) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=8),
        );
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&mut store, d, &mut rng).unwrap();
        let (words, regions) = (
            random_mat(&mut rng, n, d, 1.0),
            random_mat(&mut rng, m, d, 1.0),
        );
        let w_g = unflatten(store.value(params.w_g).data(), d);
        let w_h = unflatten(store.value(params.w_h).data(), d);
        for ablate in [false, true] {
            let mut g = Graph::new();
            let (t, v) = (g.input(tensor(&words)), g.input(tensor(&regions)));
            let s = text_image_similarity(&mut g, &store, &params, t, v, ablate).unwrap();
            let want = oracle_similarity(&words, &regions, &w_g, &w_h, ablate);
            worst = worst.max((g.value(s).data()[0] - want).abs());
        }
    }
    for _ in 0..100 {
        let b = rng.random_range(1..=8);
        let s = random_mat(&mut rng, b, b, 2.0);
        let got = triplet_loss_value(&tensor(&s), 0.2).unwrap();
        worst = worst.max((got - oracle_triplet(&s, 0.2)).abs());
    }
    for _ in 0..100 {
        let images = rng.random_range(1..=20);
        let captions = images * rng.random_range(1..=2);
        let mut map: Vec<usize> = (0..captions).map(|c| c % images).collect();
        map.shuffle(&mut rng);
        let scores: Mat = (0..captions)
            .map(|_| {
                (0..images)
                    .map(|_| rng.random_range(0..5) as f64 / 4.0)
                    .collect()
            })
            .collect();
        let sim = SimilarityMatrix::new(tensor(&scores), map.clone()).unwrap();
        for (dir, text, n) in [
            (Direction::TextRetrieval, true, captions),
            (Direction::ImageRetrieval, false, images),
        ] {
            for k in 1..=n.min(10) {
                let got = recall_at_k(&sim, dir, k).unwrap();
                worst = worst.max((got - oracle_recall(&scores, &map, text, k)).abs());
            }
        }
    }
    check(
        worst < 1e-6,
        format!("max abs deviation {worst:.2e} over 3 x 100 instances"),
    )
}

fn criterion_4(data: &Dataset) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let (mut perm_dev, mut gate_ok, mut cos_dev, mut monotone) = (0.0f64, true, 0.0f64, true);
    for _ in 0..100 {
        let (n, m, d) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=8),
        );
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&mut store, d, &mut rng).unwrap();
        let (words, regions) = (
            random_mat(&mut rng, n, d, 1.0),
            random_mat(&mut rng, m, d, 1.0),
        );
        let score = |w: &Mat, r: &Mat| {
            let mut g = Graph::new();
            let (t, v) = (g.input(tensor(w)), g.input(tensor(r)));
            let s = text_image_similarity(&mut g, &store, &params, t, v, false).unwrap();
            g.value(s).data()[0]
        };
        let base = score(&words, &regions);
        let (mut pw, mut pr) = (words.clone(), regions.clone());
        pw.shuffle(&mut rng);
        pr.shuffle(&mut rng);
        perm_dev = perm_dev
            .max((score(&pw, &regions) - base).abs())
            .max((score(&words, &pr) - base).abs());

        let mut g = Graph::new();
        let (t, v) = (g.input(tensor(&words)), g.input(tensor(&regions)));
        let fusion = gated_fusion(&mut g, &store, &params, v, t).unwrap();
        gate_ok &= g
            .value(fusion.gate)
            .data()
            .iter()
            .all(|&x| x > 0.0 && x < 1.0);
        let c = g.cosine_similarity_matrix(t, v, COSINE_EPS).unwrap();
        for &x in g.value(c).data() {
            cos_dev = cos_dev.max(x.abs() - 1.0);
        }

        let scores = random_mat(&mut rng, 2 * m, m, 1.0);
        let sim =
            SimilarityMatrix::new(tensor(&scores), (0..2 * m).map(|c| c % m).collect()).unwrap();
        for (dir, n) in [
            (Direction::TextRetrieval, 2 * m),
            (Direction::ImageRetrieval, m),
        ] {
            let r: Vec<f64> = (1..=n)
                .map(|k| recall_at_k(&sim, dir, k).unwrap())
                .collect();
            monotone &= r.windows(2).all(|w| w[0] <= w[1]);
        }
    }
    if perm_dev >= 1e-5 {
        failures.push(format!("permutation deviation {perm_dev:.2e}"));
    }
    if !gate_ok {
        failures.push("gate outside (0,1)".into());
    }
    if cos_dev > 1e-6 {
        failures.push(format!("cosine exceeds 1 by {cos_dev:.2e}"));
    }
    if !monotone {
        failures.push("R@K not monotone".into());
    }

    // Encoder equivariance on the synthetic set with a random small model.
    let config = ModelConfig {
        d_region: data.manifest.d_region,
        d_word: data.manifest.d_word,
        hidden_dim: 16,
        embed_dim: 16,
        pre_layers: 1,
        post_layers: 1,
        heads: 2,
        normalize_affinity: true,
    };
    let model = ModelParams::<f64>::new(config, 4).unwrap();
    let mut enc_dev = 0.0f64;
    for img in &data.images {
        let mut perm: Vec<usize> = (0..img.num_regions()).collect();
        perm.shuffle(&mut rng);
        let mut g = Graph::new();
        let a = model
            .encode_image(&mut g, img, Ablation::default())
            .unwrap();
        let b = model
            .encode_image(&mut g, &img.permuted(&perm), Ablation::default())
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in g.value(b).row(i).iter().zip(g.value(a).row(p)) {
                enc_dev = enc_dev.max((x - y).abs());
            }
        }
    }
    for cap in &data.captions {
        let n = cap.num_words();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let cols = cap.words.shape()[1];
        let words = Tensor::new(
            vec![n, cols],
            perm.iter()
                .flat_map(|&p| cap.words.row(p).to_vec())
                .collect(),
        )
        .unwrap();
        let shuffled = CaptionFeatures {
            words,
            tokens: perm.iter().map(|&p| cap.tokens[p].clone()).collect(),
            ..cap.clone()
        };
        let mut g = Graph::new();
        let a = model.encode_text(&mut g, cap, Ablation::default()).unwrap();
        let b = model
            .encode_text(&mut g, &shuffled, Ablation::default())
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in g.value(b).row(i).iter().zip(g.value(a).row(p)) {
                enc_dev = enc_dev.max((x - y).abs());
            }
        }
    }
    if enc_dev >= 1e-5 {
        failures.push(format!("encoder equivariance deviation {enc_dev:.2e}"));
    }
    let detail = format!(
        "score perm dev {perm_dev:.1e}, cosine overshoot {:.1e}, encoder perm dev {enc_dev:.1e}",
        cos_dev.max(0.0)
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join(", ")))
    }
}

fn criterion_5(data: &Dataset, model: Option<&ModelParams<f32>>) -> Outcome {
    let model = model.ok_or("no overfit checkpoint")?;
    let full = similarity_matrix(data, model, Ablation::default()).map_err(|e| e.to_string())?;
    let variants = [
        (
            "no-csf",
            Ablation {
                csf: true,
                ..Default::default()
            },
        ),
        (
            "no-pti",
            Ablation {
                pti: true,
                ..Default::default()
            },
        ),
        (
            "no-tgr",
            Ablation {
                tgr: true,
                ..Default::default()
            },
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, ablation) in variants {
        let ablated = similarity_matrix(data, model, ablation).map_err(|e| e.to_string())?;
        let diff = full.scores.max_abs_diff(&ablated.scores);
        let (_, first, _) = overfit(data, ablation).map_err(|e| e.to_string())?;
        ok &= diff > 1e-6 && first.is_some();
        parts.push(format!("{name}: |dS| {diff:.2e}, converged at {first:?}"));
    }
    check(ok, parts.join("; "))
}

fn criterion_6(data: &Dataset) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut models = Vec::new();
    for dir in &dirs {
        let mut config = overfit_config(Ablation::default());
        config.epochs = 3;
        config.output_dir = Some(dir.path().to_path_buf());
        models.push(
            fit::<f32>(data, data, &config)
                .map_err(|e| e.to_string())?
                .0,
        );
    }
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join(FINAL_CHECKPOINT)).unwrap())
        .collect();
    let identical = bytes[0] == bytes[1];

    let path = dirs[0].path().join(FINAL_CHECKPOINT);
    let loaded = ModelParams::<f32>::load(models[0].config, &path).map_err(|e| e.to_string())?;
    let exact = models[0].store.ids().all(|id| {
        let (a, b) = (models[0].store.value(id), loaded.store.value(id));
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let resaved = dirs[1].path().join("resaved.ckpt");
    loaded.save(&resaved).map_err(|e| e.to_string())?;
    let same_bytes = std::fs::read(&resaved).unwrap() == bytes[0];

    let mut corrupt = bytes[0].clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let bad = dirs[1].path().join("corrupt.ckpt");
    std::fs::write(&bad, corrupt).unwrap();
    let rejected = matches!(
        ModelParams::<f32>::load(models[0].config, &bad),
        Err(Error::Checksum { .. })
    );

    check(
        identical && exact && same_bytes && rejected,
        format!(
            "identical checkpoints {identical}, exact round-trip {exact}, re-save identical {same_bytes}, CRC rejects corruption {rejected}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let total = rsum([83.2, 97.1, 98.9, 69.4, 91.0, 95.1]);
    check(total == 534.7, format!("rsum = {total}"))
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .expect("rayon pool");
    let data = generate(&SyntheticSpec::overfit())
        .expect("overfit set")
        .dataset;

    let mut outcomes: Vec<(&str, Outcome)> = Vec::new();
    outcomes.push(("gradient suite", criterion_1()));
    let (c2, model) = criterion_2(&data);
    outcomes.push(("overfit", c2));
    outcomes.push(("oracle equivalence", criterion_3()));
    outcomes.push(("invariances", criterion_4(&data)));
    outcomes.push(("ablation sanity", criterion_5(&data, model.as_ref())));
    outcomes.push(("determinism and persistence", criterion_6(&data)));
    outcomes.push(("rsum spot check", criterion_7()));

    let mut failed = 0;
    for (i, (name, outcome)) in outcomes.iter().enumerate() {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {status} ({detail})", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
