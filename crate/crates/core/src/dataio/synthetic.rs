//! Synthetic feature sets with planted region-word correspondences.
//!
//! A fixed random linear map pairs word space with region space. Each image
//! gets `concepts` fresh unit word vectors; their images under the map
//! (renormalised) are written into distinct region rows, and every caption
//! of that image carries the word vectors themselves. All other regions and
//! words are noise, so a matcher has to find the planted pairs among
//! distractors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{
    save_dataset, BoundingBox, CaptionFeatures, CaptionRecord, Dataset, DatasetManifest,
    ImageFeatures, ImageRecord, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PLANTED_FILE: &str = "planted.json";
const IMAGE_SIZE: (f32, f32) = (640.0, 480.0);

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub captions_per_image: usize,
    /// Regions per image.
    pub m: usize,
    /// Words per caption.
    pub n: usize,
    pub d_region: usize,
    pub d_word: usize,
    /// Planted concepts per image.
    pub concepts: usize,
    /// Standard deviation of per-entry Gaussian noise on planted vectors.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The 8-image set used by the end-to-end overfit check.
    pub fn overfit() -> Self {
        Self {
            num_images: 8,
            captions_per_image: 2,
            m: 6,
            n: 5,
            d_region: 48,
            d_word: 32,
            concepts: 3,
            noise: 0.05,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.num_images >= 1, "num_images must be at least 1"),
            (
                self.captions_per_image >= 1,
                "captions_per_image must be at least 1",
            ),
            (self.m >= 1 && self.n >= 1, "m and n must be at least 1"),
            (
                self.d_region >= 1 && self.d_word >= 1,
                "dimensions must be at least 1",
            ),
            (
                self.concepts <= self.m.min(self.n),
                "concepts must not exceed min(m, n)",
            ),
            (
                self.noise.is_finite() && self.noise >= 0.0,
                "noise must be finite and non-negative",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("synthetic spec: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Ground truth of a generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    /// `d_region x d_word` map, row-major.
    pub pairing: Vec<f32>,
    /// Per image, the region row holding concept `c` at position `c`.
    pub region_slots: Vec<Vec<usize>>,
    /// Per caption, the word row holding concept `c` at position `c`.
    pub word_slots: Vec<Vec<usize>>,
}

pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub planted: Planted,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn noisy(base: &[f64], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return base.iter().map(|&x| x as f32).collect();
    }
    base.iter()
        .zip(gaussian(rng, base.len(), sigma))
        .map(|(&x, e)| (x + e) as f32)
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = IMAGE_SIZE;
    let (a, b) = (rng.random_range(0.0..w), rng.random_range(0.0..w));
    let (c, d) = (rng.random_range(0.0..h), rng.random_range(0.0..h));
    BoundingBox {
        x1: a.min(b).floor(),
        y1: c.min(d).floor(),
        x2: a.max(b).ceil().min(w),
        y2: c.max(d).ceil().min(h),
    }
}

/// Builds the dataset in memory; deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairing: Vec<f64> = gaussian(&mut rng, spec.d_region * spec.d_word, 1.0);
    let map = |u: &[f64]| -> Vec<f64> {
        (0..spec.d_region)
            .map(|r| {
                (0..spec.d_word)
                    .map(|k| pairing[r * spec.d_word + k] * u[k])
                    .sum()
            })
            .collect()
    };
    let region_noise_std = 1.0 / (spec.d_region as f64).sqrt();
    let word_noise_std = 1.0 / (spec.d_word as f64).sqrt();

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut image_records = Vec::new();
    let mut caption_records = Vec::new();
    let mut region_slots = Vec::new();
    let mut word_slots = Vec::new();

    for i in 0..spec.num_images {
        let image_id = format!("img{i:04}");
        let word_concepts: Vec<Vec<f64>> = (0..spec.concepts)
            .map(|_| unit(gaussian(&mut rng, spec.d_word, 1.0)))
            .collect();
        let region_concepts: Vec<Vec<f64>> = word_concepts.iter().map(|u| unit(map(u))).collect();

        let mut slots: Vec<usize> = (0..spec.m).collect();
        slots.shuffle(&mut rng);
        let slots = slots[..spec.concepts].to_vec();

        let mut regions = Vec::with_capacity(spec.m * spec.d_region);
        let mut label_words = Vec::with_capacity(spec.m);
        for r in 0..spec.m {
            match slots.iter().position(|&s| s == r) {
                Some(c) => {
                    regions.extend(noisy(&region_concepts[c], &mut rng, spec.noise));
                    let label = noisy(&word_concepts[c], &mut rng, spec.noise);
                    label_words.push(Tensor::new(vec![1, spec.d_word], label)?);
                }
                None => {
                    regions.extend(
                        gaussian(&mut rng, spec.d_region, region_noise_std)
                            .iter()
                            .map(|&x| x as f32),
                    );
                    let label = unit(gaussian(&mut rng, spec.d_word, 1.0));
                    label_words.push(Tensor::new(
                        vec![1, spec.d_word],
                        label.iter().map(|&x| x as f32).collect(),
                    )?);
                }
            }
        }
        let boxes = (0..spec.m).map(|_| random_box(&mut rng)).collect();
        images.push(ImageFeatures {
            id: image_id.clone(),
            regions: Tensor::new(vec![spec.m, spec.d_region], regions)?,
            boxes,
            image_size: IMAGE_SIZE,
            label_words,
        });
        image_records.push(ImageRecord {
            id: image_id.clone(),
            file: format!("images/{image_id}.bin"),
        });
        region_slots.push(slots);

        for j in 0..spec.captions_per_image {
            let caption_id = format!("cap{i:04}_{j}");
            let mut positions: Vec<usize> = (0..spec.n).collect();
            positions.shuffle(&mut rng);
            let positions = positions[..spec.concepts].to_vec();
            let mut words = Vec::with_capacity(spec.n * spec.d_word);
            let mut tokens = Vec::with_capacity(spec.n);
            for w in 0..spec.n {
                match positions.iter().position(|&p| p == w) {
                    Some(c) => {
                        words.extend(noisy(&word_concepts[c], &mut rng, spec.noise));
                        tokens.push(format!("concept{i}_{c}"));
                    }
                    None => {
                        words.extend(
                            gaussian(&mut rng, spec.d_word, word_noise_std)
                                .iter()
                                .map(|&x| x as f32),
                        );
                        tokens.push(format!("filler{w}"));
                    }
                }
            }
            captions.push(CaptionFeatures {
                id: caption_id.clone(),
                image_id: image_id.clone(),
                words: Tensor::new(vec![spec.n, spec.d_word], words)?,
                tokens: tokens.clone(),
            });
            caption_records.push(CaptionRecord {
                id: caption_id.clone(),
                image_id: image_id.clone(),
                file: format!("captions/{caption_id}.bin"),
                tokens,
            });
            word_slots.push(positions);
        }
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        d_region: spec.d_region,
        d_word: spec.d_word,
        captions_per_image: spec.captions_per_image,
        images: image_records,
        captions: caption_records,
    };
    let dataset = Dataset::new(manifest, images, captions, Path::new("<generated>"))?;
    Ok(SyntheticDataset {
        dataset,
        planted: Planted {
            pairing: pairing.iter().map(|&x| x as f32).collect(),
            region_slots,
            word_slots,
        },
    })
}

/// Generates a dataset and writes it, with `planted.json`, under `root`.
pub fn gen_synthetic(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let root = root.as_ref();
    let generated = generate(spec)?;
    save_dataset(root, &generated.dataset)?;
    let path = root.join(PLANTED_FILE);
    let json = serde_json::to_string_pretty(&generated.planted).expect("planted serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(generated)
}

pub fn read_planted(root: impl AsRef<Path>) -> Result<Planted> {
    let path = root.as_ref().join(PLANTED_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(&path, "planted", e.to_string()))
}
