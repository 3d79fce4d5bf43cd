//! Model parameters, batch scoring, the hard-negative triplet loss and the
//! training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_report, text_image_similarity, AlignmentReport, FusionParams};
use crate::dataio::{
    batch_iter, load_checkpoint_into, save_checkpoint, Batch, CaptionFeatures, Dataset,
    ImageFeatures,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, MetricsReport};
use crate::image_encoder::{encode_image, ImageEncoderDims, ImageEncoderParams};
use crate::numerics::{AdamState, Axis, Graph, NodeId, ParamStore, Real, StepDecay, Tensor};
use crate::text_encoder::{encode_text, TextEncoderParams};

/// Components switched off for ablation runs; `true` removes the component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Cross-modal semantic fusion: words score against `V` only.
    pub csf: bool,
    /// Prior textual information: region label words are zeroed.
    pub pti: bool,
    /// Textual graph reasoning: word embeddings skip the GCN.
    pub tgr: bool,
}

/// Architecture shape shared by every parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_region: usize,
    pub d_word: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub pre_layers: usize,
    pub post_layers: usize,
    pub heads: usize,
    /// Row-softmax the word affinity matrix before the graph convolution.
    pub normalize_affinity: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_region == 0 || self.d_word == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.heads == 0
            || !self.hidden_dim.is_multiple_of(self.heads)
            || !self.embed_dim.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "hidden_dim {} and embed_dim {} must both be divisible by heads {}",
                self.hidden_dim, self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model, registered in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub fusion: FusionParams,
}

impl<T: Real> ModelParams<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = ImageEncoderDims {
            d_region: config.d_region,
            d_word: config.d_word,
            d_hidden: config.hidden_dim,
            embed_dim: config.embed_dim,
            pre_layers: config.pre_layers,
            post_layers: config.post_layers,
            heads: config.heads,
        };
        let image = ImageEncoderParams::new(&mut store, dims, &mut rng)?;
        let text = TextEncoderParams::new(&mut store, config.d_word, config.embed_dim, &mut rng)?;
        let fusion = FusionParams::new(&mut store, config.embed_dim, &mut rng)?;
        Ok(Self {
            config,
            store,
            image,
            text,
            fusion,
        })
    }

    /// Same parameters in another element type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            store: self.store.cast(),
            image: self.image.clone(),
            text: self.text.clone(),
            fusion: self.fusion.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Builds the architecture for `config` and fills it from a checkpoint.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        load_checkpoint_into(&mut model.store, path)?;
        Ok(model)
    }

    pub fn encode_image(
        &self,
        g: &mut Graph<T>,
        img: &ImageFeatures,
        ablation: Ablation,
    ) -> Result<NodeId> {
        encode_image(g, &self.store, &self.image, img, ablation.pti)
    }

    pub fn encode_text(
        &self,
        g: &mut Graph<T>,
        cap: &CaptionFeatures,
        ablation: Ablation,
    ) -> Result<NodeId> {
        encode_text(
            g,
            &self.store,
            &self.text,
            &cap.words,
            ablation.tgr,
            self.config.normalize_affinity,
        )
    }

    /// `s(T, V)` for encoded words and regions.
    pub fn similarity(
        &self,
        g: &mut Graph<T>,
        words: NodeId,
        regions: NodeId,
        ablation: Ablation,
    ) -> Result<NodeId> {
        text_image_similarity(g, &self.store, &self.fusion, words, regions, ablation.csf)
    }

    /// `s(T, V)` for one caption and one image, forward only.
    pub fn score_pair(
        &self,
        cap: &CaptionFeatures,
        img: &ImageFeatures,
        ablation: Ablation,
    ) -> Result<T> {
        let mut g = Graph::new();
        let t = self.encode_text(&mut g, cap, ablation)?;
        let v = self.encode_image(&mut g, img, ablation)?;
        let s = self.similarity(&mut g, t, v, ablation)?;
        Ok(g.value(s).data()[0])
    }

    /// Fragment-level view of one caption-image pair under the full model.
    pub fn alignment_report(
        &self,
        cap: &CaptionFeatures,
        img: &ImageFeatures,
        ablation: Ablation,
        floor: Option<f64>,
    ) -> Result<AlignmentReport> {
        let mut g = Graph::new();
        let t = self.encode_text(&mut g, cap, ablation)?;
        let v = self.encode_image(&mut g, img, ablation)?;
        alignment_report(
            &self.store,
            &self.fusion,
            &cap.id,
            &img.id,
            &cap.tokens,
            g.value(t),
            g.value(v),
            floor,
        )
    }
}

/// `S[a][b] = s(caption a, image of pair b)` for a batch, `B x B`.
pub fn batch_similarity<T: Real>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    dataset: &Dataset,
    batch: &Batch,
    ablation: Ablation,
) -> Result<NodeId> {
    let regions = batch
        .images
        .iter()
        .map(|&i| model.encode_image(g, &dataset.images[i], ablation))
        .collect::<Result<Vec<_>>>()?;
    let words = batch
        .captions
        .iter()
        .map(|&c| model.encode_text(g, &dataset.captions[c], ablation))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let mut cells = Vec::with_capacity(b * b);
    for &t in &words {
        let per_image = regions
            .iter()
            .map(|&v| model.similarity(g, t, v, ablation))
            .collect::<Result<Vec<_>>>()?;
        cells.extend(batch.pair_image.iter().map(|&k| per_image[k]));
    }
    g.stack(&cells, &[b, b])
}

/// Added to the diagonal before taking hardest negatives, so a positive is
/// never picked as its own negative.
const DIAGONAL_MASK: f64 = -1e6;

/// Sum over positives `a` of `[α - S_aa + max_{b≠a} S_ab]+ + [α - S_aa + max_{c≠a} S_ca]+`.
pub fn triplet_loss_hard<T: Real>(g: &mut Graph<T>, scores: NodeId, margin: T) -> Result<NodeId> {
    let (rows, cols) = g.value(scores).dims2()?;
    if rows != cols {
        return Err(Error::shape(
            "triplet_loss_hard",
            format!("scores {rows}x{cols} are not square"),
        ));
    }
    let positives = g.diagonal(scores)?;
    let mut mask = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        mask.data_mut()[i * rows + i] = T::from_f64_lossy(DIAGONAL_MASK);
    }
    let mask = g.input(mask);
    let masked = g.add(scores, mask)?;
    let (hardest_image, _) = g.max_over_axis(masked, Axis::Cols)?;
    let (hardest_caption, _) = g.max_over_axis(masked, Axis::Rows)?;

    let hinge = |g: &mut Graph<T>, negative: NodeId| -> Result<NodeId> {
        let gap = g.sub(negative, positives)?;
        let shifted = g.affine(gap, T::one(), margin);
        Ok(g.relu(shifted))
    };
    let to_image = hinge(g, hardest_image)?;
    let to_caption = hinge(g, hardest_caption)?;
    let total = g.add(to_image, to_caption)?;
    Ok(g.sum(total))
}

/// [`triplet_loss_hard`] evaluated on a plain score matrix.
pub fn triplet_loss_value<T: Real>(scores: &Tensor<T>, margin: T) -> Result<T> {
    let mut g = Graph::new();
    let s = g.input(scores.clone());
    let loss = triplet_loss_hard(&mut g, s, margin)?;
    Ok(g.value(loss).data()[0])
}

fn default_margin() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    16
}
fn default_decay_period() -> usize {
    15
}
fn default_true() -> bool {
    true
}
fn default_embed_dim() -> usize {
    1024
}
fn default_hidden_dim() -> usize {
    2048
}
fn default_layers() -> usize {
    1
}
fn default_heads() -> usize {
    2
}

/// Training configuration, read from a JSON file by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training dataset directory.
    pub dataset: PathBuf,
    /// Validation dataset directory; the training set when absent.
    #[serde(default)]
    pub val_dataset: Option<PathBuf>,
    /// Where checkpoints and the epoch log go; nothing is written when absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_decay_period")]
    pub decay_period: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_true")]
    pub normalize_affinity: bool,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub pre_layers: usize,
    #[serde(default = "default_layers")]
    pub post_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        serde_json::from_value(serde_json::json!({ "dataset": dataset.into() }))
            .expect("defaults deserialize")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::validation(path, "config", e.to_string()))?;
        // Relative dataset and output paths are taken from the config's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        config.dataset = base.join(&config.dataset);
        config.val_dataset = config.val_dataset.map(|p| base.join(p));
        config.output_dir = config.output_dir.map(|p| base.join(p));
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, d_region: usize, d_word: usize) -> ModelConfig {
        ModelConfig {
            d_region,
            d_word,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            pre_layers: self.pre_layers,
            post_layers: self.post_layers,
            heads: self.heads,
            normalize_affinity: self.normalize_affinity,
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            period: self.decay_period,
            factor: 0.1,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    #[serde(flatten)]
    pub validation: MetricsReport,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch{epoch:04}.ckpt")
}

/// Trains from a fresh initialisation seeded by `config.seed`.
///
/// Training is single-threaded and deterministic for a given config. When
/// `config.output_dir` is set, the epoch log and checkpoints are written
/// there.
pub fn fit<T: Real>(
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<EpochLog>)> {
    config.validate()?;
    let model_config = config.model_config(train.manifest.d_region, train.manifest.d_word);
    let mut model = ModelParams::<T>::new(model_config, config.seed)?;
    let mut adam = AdamState::new(&model.store, config.schedule());
    let margin = T::from_f64_lossy(config.margin);

    let mut log_file = match &config.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((
                fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = batch_iter(
            train.caption_images(),
            config.batch_size,
            config.seed,
            epoch,
        );
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            model.store.zero_grads();
            let mut g = Graph::new();
            let scores = batch_similarity(&mut g, &model, train, batch, config.ablation)?;
            let loss = triplet_loss_hard(&mut g, scores, margin)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                let ids: Vec<&str> = batch
                    .captions
                    .iter()
                    .map(|&c| train.captions[c].id.as_str())
                    .collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {}, batch {} (captions {})",
                    epoch + 1,
                    bi + 1,
                    ids.join(", ")
                )));
            }
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, epoch)?;
            total += value.to_f64_lossy();
        }

        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / batches.len().max(1) as f64,
            lr: config.schedule().lr_at(epoch),
            validation: evaluate_split(val, &model, config.ablation)?,
        };
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&entry).expect("log serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = &config.output_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                model.save(dir.join(checkpoint_name(epoch + 1)))?;
            }
        }
        logs.push(entry);
    }
    if let Some(dir) = &config.output_dir {
        model.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((model, logs))
}
