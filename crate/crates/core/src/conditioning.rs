//! Class-condition embeddings: prompt templating, embedding providers and the
//! cosine-similarity matrix used for pairing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scalar::Scalar;
use crate::volume::ClassVocabulary;

pub const PLACEHOLDER: &str = "[CLS]";
pub const TABLE_FORMAT: &str = "segqc-embeddings";
pub const TABLE_VERSION: u32 = 1;

/// Prompt templates compared for text conditioning; the bare class name first.
pub const TEMPLATES: [&str; 4] = [
    "[CLS]",
    "A photo of a [CLS].",
    "There is [CLS] in this computerized tomography.",
    "A computerized tomography of a [CLS].",
];

pub fn render_prompt(template: &str, class_name: &str) -> Result<String> {
    let count = template.matches(PLACEHOLDER).count();
    if count != 1 {
        return Err(Error::Placeholder(count));
    }
    Ok(template.replacen(PLACEHOLDER, class_name, 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provider {
    OneHot,
    /// Vectors looked up by rendered prompt in a JSON file of the form
    /// `{"d_t": n, "vectors": {"<prompt>": [..]}}`.
    PrecomputedFile { path: PathBuf },
    /// Deterministic pseudo-random unit vectors keyed by a hash of the prompt.
    HashFallback { seed: u64, dim: usize },
}

impl Provider {
    pub fn tag(&self) -> &'static str {
        match self {
            Provider::OneHot => "one_hot",
            Provider::PrecomputedFile { .. } => "precomputed_file",
            Provider::HashFallback { .. } => "hash_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub class_id: u8,
    pub prompt: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocabulary: ClassVocabulary,
    pub dim: usize,
    pub provider: String,
    pub template: String,
    pub entries: Vec<ConditionEmbedding>,
}

#[derive(Deserialize)]
struct PrecomputedFile {
    d_t: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

fn normalized(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument(format!("zero vector for {what}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn hashed_unit_vector(seed: u64, prompt: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalized(v, prompt).expect("gaussian draw is non-zero")
}

pub fn embed_classes(vocab: &ClassVocabulary, provider: &Provider, template: &str) -> Result<EmbeddingTable> {
    let prompts: Vec<String> =
        vocab.entries().iter().map(|e| render_prompt(template, &e.name)).collect::<Result<_>>()?;
    let (dim, vectors): (usize, Vec<Vec<f64>>) = match provider {
        Provider::OneHot => {
            let n = vocab.len();
            (n, (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect())
        }
        Provider::HashFallback { seed, dim } => {
            if *dim == 0 {
                return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
            }
            (*dim, prompts.iter().map(|p| hashed_unit_vector(*seed, p, *dim)).collect())
        }
        Provider::PrecomputedFile { path } => {
            let file: PrecomputedFile =
                serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
            if let Some((p, v)) = file.vectors.iter().find(|(_, v)| v.len() != file.d_t) {
                return Err(Error::InvalidArgument(format!(
                    "dimension mismatch in {}: {p:?} has {} entries, d_t = {}",
                    path.display(),
                    v.len(),
                    file.d_t
                )));
            }
            let vectors = prompts
                .iter()
                .map(|p| {
                    let v = file.vectors.get(p).ok_or_else(|| Error::MissingPrompt(p.clone()))?;
                    normalized(v.clone(), p)
                })
                .collect::<Result<_>>()?;
            (file.d_t, vectors)
        }
    };
    let entries = vocab
        .entries()
        .iter()
        .zip(prompts)
        .zip(vectors)
        .map(|((e, prompt), vector)| ConditionEmbedding { class_id: e.id, prompt, vector })
        .collect();
    Ok(EmbeddingTable {
        vocabulary: vocab.clone(),
        dim,
        provider: provider.tag().into(),
        template: template.into(),
        entries,
    })
}

impl EmbeddingTable {
    pub fn get(&self, class_id: u8) -> Result<&ConditionEmbedding> {
        self.entries.iter().find(|e| e.class_id == class_id).ok_or(Error::MissingClass(class_id))
    }

    pub fn vector<S: Scalar>(&self, class_id: u8) -> Result<Vec<S>> {
        Ok(self.get(class_id)?.vector.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = TableFile {
            format: TABLE_FORMAT.into(),
            version: TABLE_VERSION,
            d_t: self.dim,
            provider: self.provider.clone(),
            template: self.template.clone(),
            count: self.entries.len(),
            rows: self
                .entries
                .iter()
                .map(|e| TableRow {
                    class_id: e.class_id,
                    class_name: self.vocabulary.name(e.class_id).unwrap_or_default().to_string(),
                    prompt: e.prompt.clone(),
                    vector_b64: B64.encode(e.vector.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec_pretty(&file)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: TableFile = serde_json::from_slice(bytes)?;
        if file.format != TABLE_FORMAT || file.version != TABLE_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported table {} v{}", file.format, file.version)));
        }
        if file.count != file.rows.len() {
            return Err(Error::CorruptHeader(format!("count {} but {} rows", file.count, file.rows.len())));
        }
        let vocabulary = ClassVocabulary::from_entries(
            file.rows
                .iter()
                .map(|r| crate::volume::ClassEntry { id: r.class_id, name: r.class_name.clone() })
                .collect(),
        )?;
        let entries = file
            .rows
            .into_iter()
            .map(|r| {
                let raw = B64.decode(&r.vector_b64).map_err(|e| Error::CorruptHeader(format!("base64: {e}")))?;
                if raw.len() != file.d_t * 8 {
                    return Err(Error::CorruptHeader(format!("row {} has {} bytes, d_t = {}", r.class_id, raw.len(), file.d_t)));
                }
                let vector = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Ok(ConditionEmbedding { class_id: r.class_id, prompt: r.prompt, vector })
            })
            .collect::<Result<_>>()?;
        Ok(Self { vocabulary, dim: file.d_t, provider: file.provider, template: file.template, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    format: String,
    version: u32,
    d_t: usize,
    provider: String,
    template: String,
    count: usize,
    rows: Vec<TableRow>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    class_id: u8,
    class_name: String,
    prompt: String,
    vector_b64: String,
}

/// Pairwise cosine similarities of `vectors`: symmetric, unit diagonal,
/// entries clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix<S: Scalar>(vectors: &[Vec<S>]) -> Result<SquareMatrix<S>> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least two vectors, got {n}")));
    }
    let norms: Vec<S> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("vector {i}")));
            }
            let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm == S::zero() {
                return Err(Error::ZeroNorm(i));
            }
            Ok(norm)
        })
        .collect::<Result<_>>()?;
    let mut h = SquareMatrix::identity(n);
    for i in 0..n {
        for j in 0..i {
            if vectors[i].len() != vectors[j].len() {
                return Err(Error::LengthMismatch(vectors[i].len(), vectors[j].len()));
            }
            let dot: S = vectors[i].iter().zip(&vectors[j]).map(|(&a, &b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).max(-S::one()).min(S::one());
            h[(i, j)] = c;
            h[(j, i)] = c;
        }
    }
    Ok(h)
}
