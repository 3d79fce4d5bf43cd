//! Retrieval metrics and dataset-level evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::text_image_similarity;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor};
use crate::training::{Ablation, ModelParams};

/// Caption-by-image scores with the ground-truth image of every caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `num_captions x num_images`.
    pub scores: Tensor<f64>,
    pub caption_image: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor<f64>, caption_image: Vec<usize>) -> Result<Self> {
        let (captions, images) = scores.dims2()?;
        if caption_image.len() != captions {
            return Err(Error::shape(
                "SimilarityMatrix",
                format!(
                    "{captions} score rows but {} ground-truth entries",
                    caption_image.len()
                ),
            ));
        }
        if let Some((c, &i)) = caption_image.iter().enumerate().find(|(_, &i)| i >= images) {
            return Err(Error::shape(
                "SimilarityMatrix",
                format!("caption {c} maps to image {i}, only {images} columns"),
            ));
        }
        Ok(Self {
            scores,
            caption_image,
        })
    }

    pub fn num_captions(&self) -> usize {
        self.caption_image.len()
    }

    pub fn num_images(&self) -> usize {
        self.scores.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image query, captions ranked.
    TextRetrieval,
    /// Caption query, images ranked.
    ImageRetrieval,
}

/// Zero-based rank of `target` among `scores`: candidates scoring higher,
/// plus equal-scoring candidates at lower indices.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(j, v)| v > s || (v == s && j < target))
        .count()
}

/// Percentage of queries whose ground truth is among the top `k` candidates.
pub fn recall_at_k(sim: &SimilarityMatrix, direction: Direction, k: usize) -> Result<f64> {
    let (captions, images) = (sim.num_captions(), sim.num_images());
    let candidates = match direction {
        Direction::TextRetrieval => captions,
        Direction::ImageRetrieval => images,
    };
    if k == 0 || k > candidates {
        return Err(Error::Config(format!(
            "K = {k} outside 1..={candidates} candidates"
        )));
    }
    let s = &sim.scores;
    let (hits, queries) = match direction {
        Direction::ImageRetrieval => {
            let hits = (0..captions)
                .filter(|&c| rank_of(s.row(c).iter().copied(), sim.caption_image[c]) < k)
                .count();
            (hits, captions)
        }
        Direction::TextRetrieval => {
            let hits = (0..images)
                .filter(|&i| {
                    let column = (0..captions).map(|c| s.at(c, i));
                    (0..captions)
                        .filter(|&c| sim.caption_image[c] == i)
                        .any(|c| rank_of(column.clone(), c) < k)
                })
                .count();
            (hits, images)
        }
    };
    if queries == 0 {
        return Err(Error::Config(format!("no queries for {direction:?}")));
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

/// Sum of the six recalls.
pub fn rsum(recalls: [f64; 6]) -> f64 {
    recalls.iter().sum()
}

/// Recall percentages in both directions. A recall is `None` when `K`
/// exceeds the candidate count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub text_r1: Option<f64>,
    pub text_r5: Option<f64>,
    pub text_r10: Option<f64>,
    pub image_r1: Option<f64>,
    pub image_r5: Option<f64>,
    pub image_r10: Option<f64>,
    /// Sum of the six recalls, when all six exist.
    pub rsum: Option<f64>,
    /// `1.5 x (R@1 + R@5)` over both directions, on the same 0..600 scale as
    /// `rsum`; used when the split is too small for R@10.
    pub desk_rsum: Option<f64>,
}

impl MetricsReport {
    pub fn from_matrix(sim: &SimilarityMatrix) -> Self {
        let r = |d, k| recall_at_k(sim, d, k).ok();
        let (t1, t5, t10) = (
            r(Direction::TextRetrieval, 1),
            r(Direction::TextRetrieval, 5),
            r(Direction::TextRetrieval, 10),
        );
        let (i1, i5, i10) = (
            r(Direction::ImageRetrieval, 1),
            r(Direction::ImageRetrieval, 5),
            r(Direction::ImageRetrieval, 10),
        );
        let rsum = match (t1, t5, t10, i1, i5, i10) {
            (Some(a), Some(b), Some(c), Some(d), Some(e), Some(f)) => {
                Some(rsum([a, b, c, d, e, f]))
            }
            _ => None,
        };
        let desk_rsum = match (t1, t5, i1, i5) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(1.5 * (a + b + c + d)),
            _ => None,
        };
        Self {
            text_r1: t1,
            text_r5: t5,
            text_r10: t10,
            image_r1: i1,
            image_r5: i5,
            image_r10: i10,
            rsum,
            desk_rsum,
        }
    }

    /// `rsum` when available, else `desk_rsum`.
    pub fn headline(&self) -> Option<f64> {
        self.rsum.or(self.desk_rsum)
    }
}

/// Full caption-by-image score matrix under frozen parameters.
///
/// Images and captions are encoded once each; the caption rows are then
/// scored in parallel.
pub fn similarity_matrix<T: Real>(
    dataset: &Dataset,
    model: &ModelParams<T>,
    ablation: Ablation,
) -> Result<SimilarityMatrix> {
    let regions = dataset
        .images
        .par_iter()
        .map(|img| {
            let mut g = Graph::new();
            let v = model.encode_image(&mut g, img, ablation)?;
            Ok(g.value(v).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = dataset
        .captions
        .par_iter()
        .map(|cap| {
            let mut g = Graph::new();
            let t = model.encode_text(&mut g, cap, ablation)?;
            let words = g.value(t).clone();
            regions
                .iter()
                .map(|v| {
                    g.reset();
                    let t = g.input(words.clone());
                    let v = g.input(v.clone());
                    let s = text_image_similarity(
                        &mut g,
                        &model.store,
                        &model.fusion,
                        t,
                        v,
                        ablation.csf,
                    )?;
                    Ok(g.value(s).data()[0].to_f64_lossy())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = Tensor::new(vec![rows.len(), regions.len()], rows.concat())?;
    SimilarityMatrix::new(scores, dataset.caption_images().to_vec())
}

pub fn evaluate_split<T: Real>(
    dataset: &Dataset,
    model: &ModelParams<T>,
    ablation: Ablation,
) -> Result<MetricsReport> {
    Ok(MetricsReport::from_matrix(&similarity_matrix(
        dataset, model, ablation,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(rows: usize, cols: usize, v: &[f64], gt: &[usize]) -> SimilarityMatrix {
        SimilarityMatrix::new(Tensor::from_f64(&[rows, cols], v).unwrap(), gt.to_vec()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let s = SimilarityMatrix::new(Tensor::eye(4), vec![0, 1, 2, 3]).unwrap();
        assert_eq!(
            recall_at_k(&s, Direction::ImageRetrieval, 1).unwrap(),
            100.0
        );
        assert_eq!(recall_at_k(&s, Direction::TextRetrieval, 1).unwrap(), 100.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = sim(4, 4, &[0.5; 16], &[0, 1, 2, 3]);
        assert_eq!(recall_at_k(&s, Direction::ImageRetrieval, 1).unwrap(), 25.0);
        assert_eq!(recall_at_k(&s, Direction::TextRetrieval, 1).unwrap(), 25.0);
    }

    #[test]
    fn k_beyond_candidates_is_an_error() {
        let s = sim(4, 2, &[0.0; 8], &[0, 0, 1, 1]);
        assert!(recall_at_k(&s, Direction::ImageRetrieval, 3).is_err());
        assert!(recall_at_k(&s, Direction::TextRetrieval, 4).is_ok());
        assert!(recall_at_k(&s, Direction::TextRetrieval, 0).is_err());
    }

    #[test]
    fn rsum_examples() {
        assert_eq!(rsum([100.0; 6]), 600.0);
        assert_eq!(rsum([0.0; 6]), 0.0);
        assert_eq!(rsum([83.2, 97.1, 98.9, 69.4, 91.0, 95.1]), 534.7);
    }

    #[test]
    fn report_without_r10_uses_desk_rsum() {
        let s = SimilarityMatrix::new(Tensor::eye(8), (0..8).collect()).unwrap();
        let r = MetricsReport::from_matrix(&s);
        assert_eq!(r.text_r10, None);
        assert_eq!(r.rsum, None);
        assert_eq!(r.desk_rsum, Some(600.0));
        assert_eq!(r.headline(), Some(600.0));
    }
}
