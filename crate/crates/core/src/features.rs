//! Frozen-encoder surrogate: seeded synthetic token features and the `.spot`
//! feature-file format.
//!
//! # Synthetic construction
//!
//! Each class `c` gets a random unit direction `μ_c`. An item of class `c`
//! holds `signal_tokens` tokens `normalize(μ_c + σ·g)` at random positions;
//! the remaining tokens are `normalize(b + σ·g)` for a direction `b` drawn
//! uniformly from a pool of shared background directions. The class text
//! embedding is `normalize(μ_c + σ·g)`. Here `g` is an isotropic Gaussian
//! with per-component variance `1/d`, so `σ` is the expected noise norm
//! relative to the unit signal regardless of width.
//!
//! All values are rounded to `f32` on construction, so a feature file round
//! trip is bit-exact.
//!
//! # File layout
//!
//! ```text
//! "SPOT" 0x01 | u32 LE header length | UTF-8 JSON header | payload
//! ```
//!
//! The payload holds the labels as `u32` (when `has_labels`), then every
//! visual token, then the text embeddings, all little-endian and row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::SeededRng;

pub const FEATURE_MAGIC: &[u8; 4] = b"SPOT";
pub const FEATURE_VERSION: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File(PathBuf),
}

/// Visual token grids with labels and one text embedding per class.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub items: Vec<Matrix>,
    pub labels: Option<Vec<usize>>,
    pub text_embeddings: Matrix,
    pub split: Split,
    pub provenance: Provenance,
}

impl PartialEq for FeatureSet {
    /// Content equality; provenance is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
            && self.labels == other.labels
            && self.text_embeddings == other.text_embeddings
            && self.split == other.split
    }
}

impl FeatureSet {
    pub fn new(
        items: Vec<Matrix>,
        labels: Option<Vec<usize>>,
        text_embeddings: Matrix,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let fs = Self { items, labels, text_embeddings, split, provenance };
        fs.validate()?;
        Ok(fs)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.text_embeddings.rows()
    }

    pub fn width(&self) -> usize {
        self.text_embeddings.cols()
    }

    pub fn n_tok(&self) -> usize {
        self.items.first().map_or(0, Matrix::rows)
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let c = self.n_classes();
        if d == 0 || c == 0 {
            return Err(dim_mismatch("feature set needs at least one class and width ≥ 1"));
        }
        let n_tok = self.n_tok();
        for (i, item) in self.items.iter().enumerate() {
            if item.shape() != (n_tok, d) {
                return Err(dim_mismatch(format!(
                    "item {i} has shape {:?}, expected {n_tok}x{d}",
                    item.shape()
                )));
            }
            if item.row_iter().any(|r| !(norm(r) > 0.0 && norm(r).is_finite())) {
                return Err(Error::ZeroVector);
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.items.len() {
                return Err(dim_mismatch(format!(
                    "{} labels for {} items",
                    labels.len(),
                    self.items.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange { label: bad, classes: c });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_tok: usize,
    pub d: usize,
    pub signal_tokens: usize,
    pub noise_sigma: f64,
    pub distractor_pool: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_tok: 32,
            d: 64,
            signal_tokens: 4,
            noise_sigma: 0.3,
            distractor_pool: 256,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_classes == 0 {
            return bad("n_classes must be ≥ 1".into());
        }
        if self.n_tok == 0 {
            return bad("n_tok must be ≥ 1".into());
        }
        if self.d < 2 {
            return bad(format!("d = {} must be ≥ 2", self.d));
        }
        if self.signal_tokens > self.n_tok {
            return bad(format!(
                "signal_tokens = {} exceeds n_tok = {}",
                self.signal_tokens, self.n_tok
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma = {} must be ≥ 0", self.noise_sigma));
        }
        if self.signal_tokens < self.n_tok && self.distractor_pool == 0 {
            return bad("distractor_pool must be ≥ 1 when some tokens are distractors".into());
        }
        Ok(())
    }
}

/// The three splits of a base-to-novel episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub base_train: FeatureSet,
    pub base_test: FeatureSet,
    pub novel_test: FeatureSet,
}

/// Shared generative state: class directions, text embeddings, backgrounds.
struct World {
    means: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
}

fn random_unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    loop {
        let v = rng.gaussian_vec(d);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(base + σ·g)` with `g ~ N(0, I/d)`, rounded to f32.
fn noisy_unit(rng: &mut SeededRng, base: &[f64], sigma: f64) -> Vec<f64> {
    let d = base.len();
    let s = sigma / (d as f64).sqrt();
    loop {
        let v: Vec<f64> = base.iter().map(|b| b + s * rng.gaussian()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| (x / n) as f32 as f64).collect();
        }
    }
}

impl World {
    fn new(spec: &SynthSpec, classes: usize) -> Self {
        let mut rng = SeededRng::derive(spec.seed, 0);
        let means: Vec<Vec<f64>> = (0..classes).map(|_| random_unit(&mut rng, spec.d)).collect();
        let text = means.iter().map(|m| noisy_unit(&mut rng, m, spec.noise_sigma)).collect();
        let pool = (0..spec.distractor_pool).map(|_| random_unit(&mut rng, spec.d)).collect();
        Self { means, text, pool }
    }

    fn item(&self, spec: &SynthSpec, class: usize, rng: &mut SeededRng) -> Matrix {
        let n = spec.n_tok;
        let mut positions: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            positions.swap(i, j);
        }
        let mut rows = vec![Vec::new(); n];
        for (slot, &pos) in positions.iter().enumerate() {
            rows[pos] = if slot < spec.signal_tokens {
                noisy_unit(rng, &self.means[class], spec.noise_sigma)
            } else {
                let b = rng.below(self.pool.len());
                noisy_unit(rng, &self.pool[b], spec.noise_sigma)
            };
        }
        Matrix::from_rows(&rows)
    }

    fn split(
        &self,
        spec: &SynthSpec,
        classes: std::ops::Range<usize>,
        per_class: usize,
        stream: u64,
        split: Split,
    ) -> Result<FeatureSet> {
        let mut rng = SeededRng::derive(spec.seed, stream);
        let mut items = Vec::with_capacity(classes.len() * per_class);
        let mut labels = Vec::with_capacity(items.capacity());
        for (local, class) in classes.clone().enumerate() {
            for _ in 0..per_class {
                items.push(self.item(spec, class, &mut rng));
                labels.push(local);
            }
        }
        let text = Matrix::from_rows(&self.text[classes]);
        FeatureSet::new(items, Some(labels), text, split, Provenance::Synthetic { seed: spec.seed })
    }
}

/// Train and test sets over `spec.n_classes` classes.
pub fn generate_episode(
    spec: &SynthSpec,
    shots: usize,
    test_per_class: usize,
) -> Result<(FeatureSet, FeatureSet)> {
    spec.validate()?;
    check_counts(shots, test_per_class)?;
    let world = World::new(spec, spec.n_classes);
    let c = spec.n_classes;
    let train = world.split(spec, 0..c, shots, 1, Split::Base)?;
    let test = world.split(spec, 0..c, test_per_class, 2, Split::Base)?;
    Ok((train, test))
}

/// Base-to-novel episode over `2·n_classes` classes: the first half are base
/// classes (train and test), the second half novel (test only).
pub fn generate_base_novel(spec: &SynthSpec, shots: usize, test_per_class: usize) -> Result<Episode> {
    spec.validate()?;
    check_counts(shots, test_per_class)?;
    let c = spec.n_classes;
    let world = World::new(spec, 2 * c);
    Ok(Episode {
        base_train: world.split(spec, 0..c, shots, 1, Split::Base)?,
        base_test: world.split(spec, 0..c, test_per_class, 2, Split::Base)?,
        novel_test: world.split(spec, c..2 * c, test_per_class, 3, Split::Novel)?,
    })
}

fn check_counts(shots: usize, test_per_class: usize) -> Result<()> {
    if shots == 0 || test_per_class == 0 {
        return Err(Error::InvalidSpec(format!(
            "shots ({shots}) and test_per_class ({test_per_class}) must be ≥ 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    dtype: String,
    layout: String,
    n_items: usize,
    n_tok: usize,
    d: usize,
    n_classes: usize,
    has_labels: bool,
    split: Split,
}

pub fn encode_features(fs: &FeatureSet) -> Result<Vec<u8>> {
    fs.validate()?;
    let header = FeatureHeader {
        dtype: "f32".into(),
        layout: "row-major".into(),
        n_items: fs.len(),
        n_tok: fs.n_tok(),
        d: fs.width(),
        n_classes: fs.n_classes(),
        has_labels: fs.labels.is_some(),
        split: fs.split,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(9 + json.len() + 4 * fs.len() * fs.n_tok() * fs.width());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(labels) = &fs.labels {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    for item in &fs.items {
        push_f32(&mut out, item.data());
    }
    push_f32(&mut out, fs.text_embeddings.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8], provenance: Provenance) -> Result<FeatureSet> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(Error::TruncatedFile);
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::VersionMismatch { found: bytes[4], expected: FEATURE_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < hlen {
        return Err(Error::TruncatedFile);
    }
    let header: FeatureHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::HeaderMismatch(format!("unparseable header: {e}")))?;
    if header.dtype != "f32" || header.layout != "row-major" {
        return Err(Error::HeaderMismatch(format!(
            "unsupported dtype/layout {}/{}",
            header.dtype, header.layout
        )));
    }
    let payload = &body[hlen..];
    let n_labels = if header.has_labels { header.n_items } else { 0 };
    let n_token_vals = header.n_items * header.n_tok * header.d;
    let n_text_vals = header.n_classes * header.d;
    let expected = 4 * (n_labels + n_token_vals + n_text_vals);
    if payload.len() != expected {
        return Err(Error::HeaderMismatch(format!(
            "header declares {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    let words: Vec<[u8; 4]> = payload.chunks_exact(4).map(|c| c.try_into().expect("4 bytes")).collect();
    let labels = header
        .has_labels
        .then(|| words[..n_labels].iter().map(|w| u32::from_le_bytes(*w) as usize).collect());
    let floats: Vec<f64> = words[n_labels..].iter().map(|w| f32::from_le_bytes(*w) as f64).collect();
    let per_item = header.n_tok * header.d;
    let items = (0..header.n_items)
        .map(|i| Matrix::new(header.n_tok, header.d, floats[i * per_item..(i + 1) * per_item].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let text = Matrix::new(header.n_classes, header.d, floats[n_token_vals..].to_vec())?;
    FeatureSet::new(items, labels, text, header.split, provenance)
}

pub fn write_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(fs)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_features(&bytes, Provenance::File(path.to_path_buf()))
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}
