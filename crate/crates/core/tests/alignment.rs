mod common;

use common::{flatten, oracle_similarity, random_mat, Mat};
use cpfean::alignment::{
    alignment_report, gated_fusion, prominent_fragment, text_image_similarity, FusionParams,
};
use cpfean::dataio::{generate, SyntheticSpec};
use cpfean::numerics::{Axis, Graph, ParamStore, Tensor, COSINE_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], flatten(m)).unwrap()
}

struct Instance {
    store: ParamStore<f64>,
    params: FusionParams,
    words: Mat,
    regions: Mat,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=6);
    let d = rng.random_range(1..=8);
    let mut store = ParamStore::new();
    let params = FusionParams::new(&mut store, d, rng).unwrap();
    Instance {
        store,
        params,
        words: random_mat(rng, n, d, 1.0),
        regions: random_mat(rng, m, d, 1.0),
    }
}

fn similarity(inst: &Instance, words: &Mat, regions: &Mat, ablate: bool) -> f64 {
    let mut g = Graph::new();
    let t = g.input(tensor(words));
    let v = g.input(tensor(regions));
    let s = text_image_similarity(&mut g, &inst.store, &inst.params, t, v, ablate).unwrap();
    g.value(s).data()[0]
}

fn weights(inst: &Instance) -> (Mat, Mat) {
    let d = inst.regions[0].len();
    let m = |id| common::unflatten(inst.store.value(id).data(), d);
    (m(inst.params.w_g), m(inst.params.w_h))
}

#[test]
fn similarity_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (w_g, w_h) = weights(&inst);
        for ablate in [false, true] {
            let got = similarity(&inst, &inst.words, &inst.regions, ablate);
            let want = oracle_similarity(&inst.words, &inst.regions, &w_g, &w_h, ablate);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn similarity_invariant_to_region_and_word_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let base = similarity(&inst, &inst.words, &inst.regions, false);
        let mut regions = inst.regions.clone();
        regions.shuffle(&mut rng);
        assert!((similarity(&inst, &inst.words, &regions, false) - base).abs() < 1e-5);
        let mut words = inst.words.clone();
        words.shuffle(&mut rng);
        assert!((similarity(&inst, &words, &inst.regions, false) - base).abs() < 1e-5);
    }
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let mut g = Graph::new();
        let t = g.input(tensor(&inst.words));
        let v = g.input(tensor(&inst.regions));
        let fusion = gated_fusion(&mut g, &inst.store, &inst.params, v, t).unwrap();
        assert!(g
            .value(fusion.gate)
            .data()
            .iter()
            .all(|&x| x > 0.0 && x < 1.0));
        assert!(fusion.prominent.iter().all(|&k| k < inst.words.len()));
    }
}

#[test]
fn cosines_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let scale = 10f64.powi(rng.random_range(-6..6));
        let words: Mat = inst
            .words
            .iter()
            .map(|r| r.iter().map(|x| x * scale).collect())
            .collect();
        let mut g = Graph::new();
        let t = g.input(tensor(&words));
        let v = g.input(tensor(&inst.regions));
        let c = g.cosine_similarity_matrix(t, v, COSINE_EPS).unwrap();
        assert!(g
            .value(c)
            .data()
            .iter()
            .all(|&x| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&x)));
    }
}

#[test]
fn rescaling_a_region_keeps_argmaxes_but_not_the_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut score_changed = false;
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let j = rng.random_range(0..inst.regions.len());
        let alpha = rng.random_range(0.1..5.0);
        let mut scaled = inst.regions.clone();
        for x in &mut scaled[j] {
            *x *= alpha;
        }
        // Prominent word of every region.
        let pick = |regions: &Mat| -> Vec<usize> {
            regions
                .iter()
                .map(|v| prominent_fragment(v, &tensor(&inst.words)).unwrap().0)
                .collect()
        };
        assert_eq!(pick(&inst.regions), pick(&scaled));
        // Best region of every word over V and its cosine.
        let best = |regions: &Mat| {
            let mut g = Graph::new();
            let t = g.input(tensor(&inst.words));
            let v = g.input(tensor(regions));
            let c = g.cosine_similarity_matrix(t, v, COSINE_EPS).unwrap();
            let (vals, idx) = g.max_over_axis(c, Axis::Cols).unwrap();
            (g.value(vals).data().to_vec(), idx)
        };
        let ((a_val, a_idx), (b_val, b_idx)) = (best(&inst.regions), best(&scaled));
        assert_eq!(a_idx, b_idx);
        for w in 0..a_val.len() {
            assert!((a_val[w] - b_val[w]).abs() < 1e-12);
        }
        let before = similarity(&inst, &inst.words, &inst.regions, false);
        let after = similarity(&inst, &inst.words, &scaled, false);
        score_changed |= (before - after).abs() > 1e-9;
    }
    assert!(
        score_changed,
        "fusion consumes raw regions, so some score must move"
    );
}

#[test]
fn report_is_deterministic_and_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let inst = instance(&mut rng);
        let tokens: Vec<String> = (0..inst.words.len()).map(|i| format!("w{i}")).collect();
        let make = || {
            alignment_report(
                &inst.store,
                &inst.params,
                "c",
                "i",
                &tokens,
                &tensor(&inst.words),
                &tensor(&inst.regions),
                None,
            )
            .unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a, b);
        let m = inst.regions.len();
        assert!(a.words.iter().all(|w| w.region < m && w.fused_region < m));
        assert!(a
            .regions
            .iter()
            .all(|r| r.fused_word.is_some_and(|k| k < tokens.len())));
        assert!((a.score - similarity(&inst, &inst.words, &inst.regions, false)).abs() < 1e-12);
    }
}

#[test]
fn similarity_floor_only_changes_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = instance(&mut rng);
    let tokens: Vec<String> = (0..inst.words.len()).map(|i| format!("w{i}")).collect();
    let report = |floor| {
        alignment_report(
            &inst.store,
            &inst.params,
            "c",
            "i",
            &tokens,
            &tensor(&inst.words),
            &tensor(&inst.regions),
            floor,
        )
        .unwrap()
    };
    let (open, closed) = (report(None), report(Some(2.0)));
    assert!(closed
        .regions
        .iter()
        .all(|r| r.fused_word.is_none() && r.fused_token.is_none()));
    assert_eq!(open.score, closed.score);
    assert_eq!(open.words, closed.words);
}

#[test]
fn planted_concepts_align_with_their_regions() {
    // Words mapped through the generator's own pairing land in region space,
    // where each noiseless concept word must pick its planted region.
    let spec = SyntheticSpec {
        num_images: 4,
        captions_per_image: 2,
        m: 6,
        n: 5,
        d_region: 12,
        d_word: 8,
        concepts: 3,
        noise: 0.0,
        seed: 21,
    };
    let synth = generate(&spec).unwrap();
    let ds = &synth.dataset;
    let pairing = Tensor::new(
        vec![spec.d_region, spec.d_word],
        synth.planted.pairing.iter().map(|&v| v as f64).collect(),
    )
    .unwrap();
    let pairing_t = pairing.transpose().unwrap();
    let mut store = ParamStore::<f64>::new();
    let params =
        FusionParams::new(&mut store, spec.d_region, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (c, cap) in ds.captions.iter().enumerate() {
        let i = ds.caption_image(c);
        let words = cap.words.cast::<f64>().matmul(&pairing_t).unwrap();
        let regions = ds.images[i].regions.cast::<f64>();
        let report = alignment_report(
            &store,
            &params,
            &cap.id,
            &ds.images[i].id,
            &cap.tokens,
            &words,
            &regions,
            None,
        )
        .unwrap();
        for (k, &w) in synth.planted.word_slots[c].iter().enumerate() {
            assert_eq!(
                report.words[w].region, synth.planted.region_slots[i][k],
                "caption {}",
                cap.id
            );
            assert!((report.words[w].similarity - 1.0).abs() < 1e-5);
        }
    }
}
