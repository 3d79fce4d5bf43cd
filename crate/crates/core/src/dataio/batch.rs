use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Positive caption-image pairs of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Dataset caption indices, in batch order.
    pub captions: Vec<usize>,
    /// Distinct dataset image indices, in order of first appearance.
    pub images: Vec<usize>,
    /// For each caption, its image's position in `images`.
    pub pair_image: Vec<usize>,
}

impl Batch {
    pub fn from_captions(captions: Vec<usize>, caption_images: &[usize]) -> Self {
        let mut images = Vec::new();
        let mut pair_image = Vec::with_capacity(captions.len());
        for &c in &captions {
            let img = caption_images[c];
            let pos = match images.iter().position(|&i| i == img) {
                Some(p) => p,
                None => {
                    images.push(img);
                    images.len() - 1
                }
            };
            pair_image.push(pos);
        }
        Self {
            captions,
            images,
            pair_image,
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Shuffles captions with a generator keyed by `(seed, epoch)` and cuts them
/// into batches of `batch_size`; the last batch may be short.
///
/// `caption_images[c]` is the ground-truth image of caption `c`.
pub fn batch_iter(
    caption_images: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..caption_images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_captions(chunk.to_vec(), caption_images))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_captions_in_one_batch() {
        let map: Vec<usize> = (0..16).map(|c| c / 2).collect();
        let batches = batch_iter(&map, 16, 1, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 16);
        assert_eq!(batches[0].images.len(), 8);
    }

    #[test]
    fn short_last_batch_kept() {
        let map = vec![0, 1, 2, 3, 4];
        let sizes: Vec<usize> = batch_iter(&map, 2, 9, 3).iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn same_seed_and_epoch_repeat() {
        let map: Vec<usize> = (0..40).map(|c| c / 5).collect();
        assert_eq!(batch_iter(&map, 7, 11, 4), batch_iter(&map, 7, 11, 4));
        assert_ne!(batch_iter(&map, 7, 11, 4), batch_iter(&map, 7, 11, 5));
    }

    proptest! {
        #[test]
        fn epoch_is_a_permutation_with_correct_pairs(
            n in 1usize..60, per in 1usize..4, b in 1usize..20, seed in any::<u64>(), epoch in 0usize..100,
        ) {
            let map: Vec<usize> = (0..n).map(|c| c / per).collect();
            let batches = batch_iter(&map, b, seed, epoch);
            let mut seen: Vec<usize> = batches.iter().flat_map(|bt| bt.captions.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for bt in &batches {
                prop_assert!(!bt.is_empty() && bt.len() <= b);
                for (k, &c) in bt.captions.iter().enumerate() {
                    prop_assert_eq!(bt.images[bt.pair_image[k]], map[c]);
                }
            }
        }
    }
}
