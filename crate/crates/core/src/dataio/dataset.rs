use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::container::{self, Entry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image_id: String,
    pub file: String,
    #[serde(default)]
    pub tokens: Vec<String>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub d_region: usize,
    pub d_word: usize,
    pub captions_per_image: usize,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
}

/// Region box in pixels, top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub id: String,
    /// `m x d_region` detector features, one row per region.
    pub regions: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
    /// `(width, height)` in pixels.
    pub image_size: (f32, f32),
    /// Per region, a `k x d_word` matrix of label word vectors (`k` may be 0).
    pub label_words: Vec<Tensor<f32>>,
}

impl ImageFeatures {
    pub fn num_regions(&self) -> usize {
        self.regions.shape()[0]
    }

    /// Copy with regions (and their boxes and labels) reordered so that new
    /// row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.regions.shape()[1];
        let mut data = Vec::with_capacity(self.regions.len());
        for &p in perm {
            data.extend_from_slice(self.regions.row(p));
        }
        Self {
            id: self.id.clone(),
            regions: Tensor::new(vec![perm.len(), d], data).unwrap(),
            boxes: perm.iter().map(|&p| self.boxes[p]).collect(),
            image_size: self.image_size,
            label_words: perm.iter().map(|&p| self.label_words[p].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionFeatures {
    pub id: String,
    pub image_id: String,
    /// `n x d_word` word features.
    pub words: Tensor<f32>,
    pub tokens: Vec<String>,
}

impl CaptionFeatures {
    pub fn num_words(&self) -> usize {
        self.words.shape()[0]
    }
}

/// A loaded, validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageFeatures>,
    pub captions: Vec<CaptionFeatures>,
    caption_image: Vec<usize>,
}

impl Dataset {
    /// Validates in-memory features against `manifest` and indexes captions.
    pub fn new(
        manifest: DatasetManifest,
        images: Vec<ImageFeatures>,
        captions: Vec<CaptionFeatures>,
        root: &Path,
    ) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        validate_manifest(&manifest, &manifest_path)?;
        let mut index = HashMap::new();
        for (i, (img, rec)) in images.iter().zip(&manifest.images).enumerate() {
            validate_image(img, &manifest, &root.join(&rec.file))?;
            index.insert(img.id.as_str(), i);
        }
        let mut per_image = vec![0usize; images.len()];
        let mut caption_image = Vec::with_capacity(captions.len());
        for (cap, rec) in captions.iter().zip(&manifest.captions) {
            let path = root.join(&rec.file);
            validate_caption(cap, &manifest, &path)?;
            let &img = index.get(cap.image_id.as_str()).ok_or_else(|| {
                Error::validation(
                    &manifest_path,
                    "captions[].image_id",
                    format!(
                        "caption {} references unknown image {:?}",
                        cap.id, cap.image_id
                    ),
                )
            })?;
            per_image[img] += 1;
            caption_image.push(img);
        }
        if let Some((i, &n)) = per_image
            .iter()
            .enumerate()
            .find(|(_, &n)| n != manifest.captions_per_image)
        {
            return Err(Error::validation(
                &manifest_path,
                "captions_per_image",
                format!(
                    "image {} has {n} captions, manifest declares {}",
                    images[i].id, manifest.captions_per_image
                ),
            ));
        }
        Ok(Self {
            manifest,
            images,
            captions,
            caption_image,
        })
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_captions(&self) -> usize {
        self.captions.len()
    }

    /// Index into `images` of the ground-truth image of caption `c`.
    pub fn caption_image(&self, c: usize) -> usize {
        self.caption_image[c]
    }

    pub fn caption_images(&self) -> &[usize] {
        &self.caption_image
    }

    pub fn caption_by_id(&self, id: &str) -> Option<&CaptionFeatures> {
        self.captions.iter().find(|c| c.id == id)
    }

    pub fn image_by_id(&self, id: &str) -> Option<&ImageFeatures> {
        self.images.iter().find(|i| i.id == id)
    }
}

fn validate_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    if m.version != MANIFEST_VERSION {
        return Err(Error::validation(
            path,
            "version",
            format!("unsupported version {}", m.version),
        ));
    }
    if m.d_region == 0 {
        return Err(Error::validation(path, "d_region", "must be at least 1"));
    }
    if m.d_word == 0 {
        return Err(Error::validation(path, "d_word", "must be at least 1"));
    }
    if m.images.is_empty() {
        return Err(Error::validation(path, "images", "no images"));
    }
    if m.captions.is_empty() {
        return Err(Error::validation(path, "captions", "no captions"));
    }
    if m.captions_per_image == 0 {
        return Err(Error::validation(
            path,
            "captions_per_image",
            "must be at least 1",
        ));
    }
    let mut ids = std::collections::HashSet::new();
    for rec in &m.images {
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::validation(
                path,
                "images[].id",
                format!("duplicate id {:?}", rec.id),
            ));
        }
    }
    let mut cap_ids = std::collections::HashSet::new();
    for rec in &m.captions {
        if !cap_ids.insert(rec.id.as_str()) {
            return Err(Error::validation(
                path,
                "captions[].id",
                format!("duplicate id {:?}", rec.id),
            ));
        }
    }
    Ok(())
}

fn validate_image(img: &ImageFeatures, m: &DatasetManifest, path: &Path) -> Result<()> {
    let bad = |field: &str, msg: String| {
        Error::validation(path, field, format!("image {}: {msg}", img.id))
    };
    let (rows, cols) = img.regions.dims2()?;
    if rows == 0 {
        return Err(bad("regions", "needs at least one region".into()));
    }
    if cols != m.d_region {
        return Err(bad(
            "regions",
            format!("width {cols}, manifest d_region {}", m.d_region),
        ));
    }
    if !img.regions.all_finite() {
        return Err(bad("regions", "non-finite feature value".into()));
    }
    let (w, h) = img.image_size;
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(bad(
            "image_size",
            format!("({w}, {h}) is not a positive size"),
        ));
    }
    if img.boxes.len() != rows {
        return Err(bad(
            "boxes",
            format!("{} boxes for {rows} regions", img.boxes.len()),
        ));
    }
    for (i, b) in img.boxes.iter().enumerate() {
        let ok =
            0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= w && 0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= h;
        if !ok {
            return Err(bad("boxes", format!("box {i} {b:?} outside image {w}x{h}")));
        }
    }
    if img.label_words.len() != rows {
        return Err(bad(
            "label_words",
            format!("{} label lists for {rows} regions", img.label_words.len()),
        ));
    }
    for (i, lw) in img.label_words.iter().enumerate() {
        let (_, d) = lw.dims2()?;
        if d != m.d_word {
            return Err(bad(
                "label_words",
                format!("region {i} label width {d}, manifest d_word {}", m.d_word),
            ));
        }
        if !lw.all_finite() {
            return Err(bad(
                "label_words",
                format!("region {i} has a non-finite value"),
            ));
        }
    }
    Ok(())
}

fn validate_caption(cap: &CaptionFeatures, m: &DatasetManifest, path: &Path) -> Result<()> {
    let bad = |field: &str, msg: String| {
        Error::validation(path, field, format!("caption {}: {msg}", cap.id))
    };
    let (n, d) = cap.words.dims2()?;
    if n == 0 {
        return Err(bad("words", "needs at least one word".into()));
    }
    if d != m.d_word {
        return Err(bad(
            "words",
            format!("row width {d}, manifest d_word {}", m.d_word),
        ));
    }
    if !cap.words.all_finite() {
        return Err(bad("words", "non-finite feature value".into()));
    }
    if !cap.tokens.is_empty() && cap.tokens.len() != n {
        return Err(bad(
            "tokens",
            format!("{} tokens for {n} words", cap.tokens.len()),
        ));
    }
    Ok(())
}

fn entry<'a>(entries: &'a [Entry], name: &str, path: &Path) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::validation(path, name, "entry missing"))
}

fn matrix(e: &Entry, path: &Path) -> Result<Tensor<f32>> {
    if e.dims.len() != 2 {
        return Err(Error::validation(
            path,
            &e.name,
            format!("expected rank 2, got dims {:?}", e.dims),
        ));
    }
    Tensor::new(e.dims.clone(), e.data.clone())
}

pub(crate) fn image_entries(img: &ImageFeatures) -> Vec<Entry> {
    let (m, d_region) = (img.regions.shape()[0], img.regions.shape()[1]);
    let d_word = img.label_words.first().map_or(0, |t| t.shape()[1]);
    let boxes = img
        .boxes
        .iter()
        .flat_map(|b| [b.x1, b.y1, b.x2, b.y2])
        .collect();
    let counts: Vec<f32> = img
        .label_words
        .iter()
        .map(|t| t.shape()[0] as f32)
        .collect();
    let labels: Vec<f32> = img
        .label_words
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let total = labels.len() / d_word.max(1);
    vec![
        Entry::new("regions", vec![m, d_region], img.regions.data().to_vec()),
        Entry::new("boxes", vec![m, 4], boxes),
        Entry::new(
            "image_size",
            vec![2],
            vec![img.image_size.0, img.image_size.1],
        ),
        Entry::new("label_counts", vec![m], counts),
        Entry::new("label_words", vec![total, d_word], labels),
    ]
}

fn image_from_entries(
    id: &str,
    entries: &[Entry],
    d_word: usize,
    path: &Path,
) -> Result<ImageFeatures> {
    let regions = matrix(entry(entries, "regions", path)?, path)?;
    let m = regions.shape()[0];
    let boxes_e = entry(entries, "boxes", path)?;
    if boxes_e.dims != [m, 4] {
        return Err(Error::validation(
            path,
            "boxes",
            format!("dims {:?}, expected [{m}, 4]", boxes_e.dims),
        ));
    }
    let boxes = boxes_e
        .data
        .chunks_exact(4)
        .map(|c| BoundingBox {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        })
        .collect();
    let size = entry(entries, "image_size", path)?;
    if size.data.len() != 2 {
        return Err(Error::validation(path, "image_size", "expected two values"));
    }
    let counts = entry(entries, "label_counts", path)?;
    if counts.data.len() != m {
        return Err(Error::validation(
            path,
            "label_counts",
            format!("{} counts for {m} regions", counts.data.len()),
        ));
    }
    let labels = matrix(entry(entries, "label_words", path)?, path)?;
    let width = labels.shape()[1];
    if labels.shape()[0] > 0 && width != d_word {
        return Err(Error::validation(
            path,
            "label_words",
            format!("image {id}: label width {width}, manifest d_word {d_word}"),
        ));
    }
    let mut label_words = Vec::with_capacity(m);
    let mut row = 0usize;
    for &c in &counts.data {
        if !(c >= 0.0 && c.fract() == 0.0) {
            return Err(Error::validation(
                path,
                "label_counts",
                format!("invalid count {c}"),
            ));
        }
        let k = c as usize;
        if row + k > labels.shape()[0] {
            return Err(Error::validation(
                path,
                "label_counts",
                "counts exceed stored label rows",
            ));
        }
        let data = labels.data()[row * width..(row + k) * width].to_vec();
        label_words.push(Tensor::new(vec![k, d_word], data).map_err(|_| {
            Error::validation(
                path,
                "label_words",
                format!("image {id}: label width {width}, manifest d_word {d_word}"),
            )
        })?);
        row += k;
    }
    if row != labels.shape()[0] {
        return Err(Error::validation(
            path,
            "label_counts",
            "counts do not cover stored label rows",
        ));
    }
    Ok(ImageFeatures {
        id: id.to_string(),
        regions,
        boxes,
        image_size: (size.data[0], size.data[1]),
        label_words,
    })
}

pub(crate) fn caption_entries(cap: &CaptionFeatures) -> Vec<Entry> {
    vec![Entry::new(
        "words",
        cap.words.shape().to_vec(),
        cap.words.data().to_vec(),
    )]
}

/// Writes `manifest.json` plus one feature file per image and caption.
pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (img, rec) in ds.images.iter().zip(&ds.manifest.images) {
        container::write_file(&root.join(&rec.file), &image_entries(img))?;
    }
    for (cap, rec) in ds.captions.iter().zip(&ds.manifest.captions) {
        container::write_file(&root.join(&rec.file), &caption_entries(cap))?;
    }
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(&path, "manifest", e.to_string()))
}

/// Loads and eagerly validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    validate_manifest(&manifest, &root.join(MANIFEST_FILE))?;

    let images = manifest
        .images
        .par_iter()
        .map(|rec| {
            let path = root.join(&rec.file);
            let entries = container::read_file(&path)?;
            image_from_entries(&rec.id, &entries, manifest.d_word, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    let captions = manifest
        .captions
        .par_iter()
        .map(|rec| {
            let path: PathBuf = root.join(&rec.file);
            let entries = container::read_file(&path)?;
            let words = matrix(entry(&entries, "words", &path)?, &path)?;
            Ok(CaptionFeatures {
                id: rec.id.clone(),
                image_id: rec.image_id.clone(),
                words,
                tokens: rec.tokens.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest, images, captions, root)
}
