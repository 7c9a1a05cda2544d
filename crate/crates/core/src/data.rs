//! Feature files, dataset manifests, the synthetic generator and
//! leave-one-session-out folds.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! b"MGCF" | u32 version = 1 | u32 L | u32 D | L*D f32, row-major
//! ```
//!
//! A dataset directory holds `manifest.jsonl` (one JSON record per
//! utterance) plus the feature files it references by relative path.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::EmotionLabel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MGCF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const NUM_SESSIONS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

/// Token features of one utterance in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    pub utterance_id: String,
    pub modality: Modality,
    /// `L × D`.
    pub tokens: Tensor<T>,
    /// Recording session, 1 to 5.
    pub session: u32,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(
        utterance_id: impl Into<String>,
        modality: Modality,
        tokens: Tensor<T>,
        session: u32,
    ) -> Result<Self> {
        let (l, _) = tokens.matrix_dims()?;
        if tokens.rank() != 2 || l == 0 {
            return Err(Error::EmptySequence("FeatureSequence"));
        }
        if !(1..=NUM_SESSIONS).contains(&session) {
            return Err(Error::InvalidArgument(format!("session {session} outside 1..=5")));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            modality,
            tokens,
            session,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair<T> {
    pub speech: FeatureSequence<T>,
    pub text: FeatureSequence<T>,
    pub label: EmotionLabel,
}

/// Labeled speech/text pairs forming one contrastive batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pairs: Vec<LabeledPair<T>>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(pairs: Vec<LabeledPair<T>>) -> Result<Self> {
        for p in &pairs {
            if p.speech.utterance_id != p.text.utterance_id || p.speech.session != p.text.session {
                return Err(Error::Contract(format!(
                    "pair members disagree: {}/{} vs {}/{}",
                    p.speech.utterance_id, p.speech.session, p.text.utterance_id, p.text.session
                )));
            }
            if p.speech.modality != Modality::Speech || p.text.modality != Modality::Text {
                return Err(Error::Contract(format!("modalities swapped in {}", p.speech.utterance_id)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[LabeledPair<T>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Serializes an `L × D` tensor in the feature file layout.
pub fn encode_features<T: Scalar>(tokens: &Tensor<T>) -> Result<Vec<u8>> {
    if tokens.rank() != 2 {
        return Err(Error::InvalidArgument("feature tensors must be L x D".into()));
    }
    let (l, d) = (tokens.shape()[0], tokens.shape()[1]);
    if l == 0 || d == 0 {
        return Err(Error::EmptySequence("encode_features"));
    }
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("extent {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * tokens.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(l)?.to_le_bytes());
    out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    for v in tokens.data() {
        let narrow = v.to_f64_lossy() as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite("encode_features"));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

/// Parses the feature file layout, widening `f32` values to `T`.
pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if bytes.len() < FEATURE_MAGIC.len() {
        return Err(Error::Corruption(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("bad feature file magic".into()));
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Corruption(format!("truncated header ({} bytes)", bytes.len())));
    }
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let (l, d) = (word(8) as usize, word(12) as usize);
    if l == 0 || d == 0 {
        return Err(Error::Format(format!("empty feature header {l}x{d}")));
    }
    let expected = l
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
        .ok_or_else(|| Error::Corruption("header extents overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "payload has {} bytes, header implies {}",
            bytes.len() - FEATURE_HEADER_LEN,
            expected - FEATURE_HEADER_LEN
        )));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(T::lit(f64::from(v)))
            } else {
                Err(Error::Corruption("non-finite feature value".into()))
            }
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::new(vec![l, d], data)
}

pub fn write_feature_file<T: Scalar>(tokens: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_features(tokens)?)?;
    Ok(())
}

pub fn read_feature_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_features(&fs::read(path)?)
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub label: EmotionLabel,
    pub session: u32,
    pub speech_path: String,
    pub text_path: String,
    #[serde(rename = "L_s")]
    pub len_speech: usize,
    #[serde(rename = "L_t")]
    pub len_text: usize,
    pub dim: usize,
}

/// Records of a dataset directory; paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub dim: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.dim)
            .ok_or_else(|| Error::DatasetMismatch("manifest has no records".into()))?;
        let mut ids = HashSet::new();
        for r in &records {
            if r.dim != dim {
                return Err(Error::DatasetMismatch(format!(
                    "{} declares dim {}, manifest dim is {dim}",
                    r.utterance_id, r.dim
                )));
            }
            if !ids.insert(r.utterance_id.as_str()) {
                return Err(Error::DatasetMismatch(format!("duplicate utterance {}", r.utterance_id)));
            }
            if !(1..=NUM_SESSIONS).contains(&r.session) {
                return Err(Error::DatasetMismatch(format!(
                    "{} has session {}",
                    r.utterance_id, r.session
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            dim,
            records,
        })
    }

    /// Reads `dir/manifest.jsonl`.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        Self::new(dir, records)
    }

    /// Writes `root/manifest.jsonl` in record order.
    pub fn save(&self) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join(MANIFEST_FILE), out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads record `index`, checking file headers against the manifest.
    pub fn load_pair<T: Scalar>(&self, index: usize) -> Result<LabeledPair<T>> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("record {index} out of range")))?;
        let load = |rel: &str, modality: Modality, len: usize| -> Result<FeatureSequence<T>> {
            let tokens = read_feature_file::<T>(&self.root.join(rel))?;
            if tokens.shape() != [len, self.dim] {
                return Err(Error::DatasetMismatch(format!(
                    "{rel}: header {:?}, manifest says [{len}, {}]",
                    tokens.shape(),
                    self.dim
                )));
            }
            FeatureSequence::new(r.utterance_id.clone(), modality, tokens, r.session)
        };
        Ok(LabeledPair {
            speech: load(&r.speech_path, Modality::Speech, r.len_speech)?,
            text: load(&r.text_path, Modality::Text, r.len_text)?,
            label: r.label,
        })
    }

    pub fn load_pairs<T: Scalar>(&self, indices: &[usize]) -> Result<Vec<LabeledPair<T>>> {
        indices.iter().map(|i| self.load_pair(*i)).collect()
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<LabeledPair<T>>> {
        (0..self.records.len()).map(|i| self.load_pair(i)).collect()
    }
}

/// Settings of the synthetic paired dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub len_speech: usize,
    pub len_text: usize,
    /// Norm of each class anchor; 0 removes all class signal.
    pub separation: f64,
    pub seed: u64,
    /// Scale of a per-session bias added to every token.
    pub session_shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            n_classes: 4,
            dim: 32,
            len_speech: 8,
            len_text: 6,
            separation: 4.0,
            seed: 0,
            session_shift: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(1..=EmotionLabel::ALL.len()).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 1..=4, got {}", self.n_classes));
        }
        if self.n_pairs < self.n_classes {
            return bad(format!("n_pairs {} < n_classes {}", self.n_pairs, self.n_classes));
        }
        if self.dim == 0 || self.len_speech == 0 || self.len_text == 0 {
            return bad("dim and sequence lengths must be positive".into());
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.session_shift >= 0.0) || !self.session_shift.is_finite() {
            return bad(format!("session_shift must be finite and >= 0, got {}", self.session_shift));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `v · M` for a row-major `dim × dim` matrix.
fn row_times(v: &[f64], m: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, vi) in v.iter().enumerate() {
        for (o, mij) in out.iter_mut().zip(&m[i * dim..(i + 1) * dim]) {
            *o += vi * mij;
        }
    }
    out
}

/// Writes a synthetic dataset to `out_dir` and returns its manifest.
///
/// Each class gets an anchor of norm `separation`. Speech tokens are
/// `anchor · A_speech + noise`, text tokens `anchor · A_text + noise`, with
/// fixed random maps `A` (entries of variance `1/dim`) and unit Gaussian
/// noise per token. Pair `i` has label `i mod n_classes` and session
/// `i mod 5 + 1`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let map_speech: Vec<f64> = normal_vec(&mut rng, dim * dim).into_iter().map(|v| v * scale).collect();
    let map_text: Vec<f64> = normal_vec(&mut rng, dim * dim).into_iter().map(|v| v * scale).collect();
    let anchors: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let z = normal_vec(&mut rng, dim);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            z.into_iter().map(|v| v / norm * cfg.separation).collect()
        })
        .collect();
    let session_bias: Vec<Vec<f64>> = (0..NUM_SESSIONS)
        .map(|_| normal_vec(&mut rng, dim).into_iter().map(|v| v * cfg.session_shift).collect())
        .collect();
    let centers_speech: Vec<Vec<f64>> = anchors.iter().map(|a| row_times(a, &map_speech, dim)).collect();
    let centers_text: Vec<Vec<f64>> = anchors.iter().map(|a| row_times(a, &map_text, dim)).collect();

    fs::create_dir_all(out_dir.join("speech"))?;
    fs::create_dir_all(out_dir.join("text"))?;
    let mut records = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let class = i % cfg.n_classes;
        let session = (i % NUM_SESSIONS as usize) as u32 + 1;
        let bias = &session_bias[session as usize - 1];
        let mut draw = |center: &[f64], len: usize| -> Result<Tensor<f64>> {
            let mut data = Vec::with_capacity(len * dim);
            for _ in 0..len {
                for (c, b) in center.iter().zip(bias) {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push(c + b + noise);
                }
            }
            Tensor::new(vec![len, dim], data)
        };
        let speech = draw(&centers_speech[class], cfg.len_speech)?;
        let text = draw(&centers_text[class], cfg.len_text)?;
        let id = format!("utt_{i:05}");
        let speech_path = format!("speech/{id}.mgcf");
        let text_path = format!("text/{id}.mgcf");
        write_feature_file(&speech, &out_dir.join(&speech_path))?;
        write_feature_file(&text, &out_dir.join(&text_path))?;
        records.push(ManifestRecord {
            utterance_id: id,
            label: EmotionLabel::from_code(class)?,
            session,
            speech_path,
            text_path,
            len_speech: cfg.len_speech,
            len_text: cfg.len_text,
            dim,
        });
    }
    let manifest = DatasetManifest::new(out_dir, records)?;
    manifest.save()?;
    Ok(manifest)
}

/// Leave-one-session-out partition: record indices in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test_session: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Five folds; fold `i` tests on session `i + 1` and trains on the rest.
pub fn split_folds(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    (1..=NUM_SESSIONS)
        .map(|session| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..manifest.records.len()).partition(|i| manifest.records[*i].session == session);
            if test.is_empty() {
                return Err(Error::MissingSession(session));
            }
            Ok(Fold {
                test_session: session,
                train,
                test,
            })
        })
        .collect()
}
