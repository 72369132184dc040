use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes of each document seen by the encoder.
pub const MAX_ENCODE_BYTES: usize = 4096;
pub const DEFAULT_DIM: usize = 64;

/// Maps a text to a unit-norm vector of fixed dimension.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &[u8]) -> Result<Vec<f32>>;
}

/// Serializable description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderConfig {
    HashedNgramTfidf {
        dim: usize,
        ngram_sizes: Vec<usize>,
        hash_seed: u64,
        max_bytes: usize,
        idf: Vec<f32>,
    },
    ExternalFile {
        dim: usize,
        path: PathBuf,
    },
}

impl EncoderConfig {
    pub fn dim(&self) -> usize {
        match self {
            EncoderConfig::HashedNgramTfidf { dim, .. }
            | EncoderConfig::ExternalFile { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Encoder> {
        match self {
            EncoderConfig::HashedNgramTfidf {
                dim,
                ngram_sizes,
                hash_seed,
                max_bytes,
                idf,
            } => {
                if idf.len() != *dim || *dim == 0 || ngram_sizes.is_empty() {
                    return Err(Error::Config(format!(
                        "hashed encoder with dim {dim} has {} idf weights and {} n-gram sizes",
                        idf.len(),
                        ngram_sizes.len()
                    )));
                }
                Ok(Encoder::Hashed(HashedNgramEncoder {
                    dim: *dim,
                    ngram_sizes: ngram_sizes.clone(),
                    hash_seed: *hash_seed,
                    max_bytes: *max_bytes,
                    idf: idf.clone(),
                }))
            }
            EncoderConfig::ExternalFile { dim, path } => {
                let enc = ExternalEncoder::load(path)?;
                if enc.dim != *dim {
                    return Err(Error::Compatibility(format!(
                        "embedding file has dim {}, config says {dim}",
                        enc.dim
                    )));
                }
                Ok(Encoder::External(enc))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Hashed(HashedNgramEncoder),
    External(ExternalEncoder),
}

impl Encoder {
    pub fn config(&self) -> EncoderConfig {
        match self {
            Encoder::Hashed(h) => h.config(),
            Encoder::External(e) => EncoderConfig::ExternalFile {
                dim: e.dim,
                path: e.path.clone(),
            },
        }
    }
}

impl TextEncoder for Encoder {
    fn dim(&self) -> usize {
        match self {
            Encoder::Hashed(h) => h.dim,
            Encoder::External(e) => e.dim,
        }
    }

    fn encode(&self, text: &[u8]) -> Result<Vec<f32>> {
        match self {
            Encoder::Hashed(h) => h.encode(text),
            Encoder::External(e) => e.encode(text),
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so low bits depend on every byte
    crate::util::derive_seed(h, bytes.len() as u64)
}

fn normalize(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Input("embedding has zero norm".into()));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

/// Character n-grams hashed into signed buckets, TF-IDF weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedNgramEncoder {
    dim: usize,
    ngram_sizes: Vec<usize>,
    hash_seed: u64,
    max_bytes: usize,
    idf: Vec<f32>,
}

impl Default for HashedNgramEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM, 0)
    }
}

impl HashedNgramEncoder {
    pub fn new(dim: usize, hash_seed: u64) -> Self {
        Self {
            dim,
            ngram_sizes: vec![2, 3, 4],
            hash_seed,
            max_bytes: MAX_ENCODE_BYTES,
            idf: vec![1.0; dim],
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig::HashedNgramTfidf {
            dim: self.dim,
            ngram_sizes: self.ngram_sizes.clone(),
            hash_seed: self.hash_seed,
            max_bytes: self.max_bytes,
            idf: self.idf.clone(),
        }
    }

    fn grams<'t>(&self, text: &'t [u8]) -> BTreeMap<&'t [u8], u32> {
        let mut counts = BTreeMap::new();
        for &n in &self.ngram_sizes {
            if text.len() < n {
                continue;
            }
            for g in text.windows(n) {
                *counts.entry(g).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            // shorter than every n-gram size: the whole text is one feature
            counts.insert(text, 1);
        }
        counts
    }

    fn bucket(&self, gram: &[u8]) -> (usize, f32) {
        let h = fnv1a(self.hash_seed, gram);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    /// Sets bucket IDF weights `ln((1+M)/(1+df)) + 1` from a corpus.
    pub fn fit_idf<T: AsRef<[u8]>>(&mut self, docs: &[T]) {
        let mut df = vec![0usize; self.dim];
        for doc in docs {
            let text = &doc.as_ref()[..doc.as_ref().len().min(self.max_bytes)];
            if text.is_empty() {
                continue;
            }
            let mut seen = vec![false; self.dim];
            for gram in self.grams(text).keys() {
                seen[self.bucket(gram).0] = true;
            }
            for (d, s) in df.iter_mut().zip(seen) {
                *d += s as usize;
            }
        }
        let m = docs.len() as f64;
        self.idf = df
            .iter()
            .map(|&d| (((1.0 + m) / (1.0 + d as f64)).ln() + 1.0) as f32)
            .collect();
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<f32>> {
        if text.is_empty() {
            return Err(Error::Input("cannot encode empty text".into()));
        }
        let text = &text[..text.len().min(self.max_bytes)];
        let mut v = vec![0.0f32; self.dim];
        for (gram, count) in self.grams(text) {
            let (b, sign) = self.bucket(gram);
            v[b] += sign * (1.0 + (count as f32).ln()) * self.idf[b];
        }
        normalize(&mut v)?;
        Ok(v)
    }
}

/// Precomputed embeddings keyed by item id.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    dim: usize,
    path: PathBuf,
    table: HashMap<String, Vec<f32>>,
}

impl ExternalEncoder {
    /// Parses `dim=<d> count=<M>` followed by `<id> v1 … vd` records.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let mut dim = None;
        let mut count = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                _ => return Err(perr(1, format!("unexpected header field {field:?}"))),
            }
        }
        let (dim, count) = match (dim, count) {
            (Some(d), Some(c)) if d > 0 => (d, c),
            _ => return Err(perr(1, "header must be \"dim=<d> count=<M>\"".into())),
        };
        let mut table = HashMap::with_capacity(count);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let id = parts.next().unwrap().to_string();
            let mut v = parts
                .map(|p| {
                    p.parse::<f32>()
                        .map_err(|e| perr(i + 1, format!("{p:?}: {e}")))
                })
                .collect::<Result<Vec<f32>>>()?;
            if v.len() != dim {
                return Err(perr(
                    i + 1,
                    format!("expected {dim} values, found {}", v.len()),
                ));
            }
            normalize(&mut v).map_err(|_| perr(i + 1, "zero vector".into()))?;
            if table.insert(id.clone(), v).is_some() {
                return Err(perr(i + 1, format!("duplicate item id {id:?}")));
            }
        }
        if table.len() != count {
            return Err(perr(
                1,
                format!("header declares {count} items, found {}", table.len()),
            ));
        }
        Ok(Self {
            dim,
            path: path.to_path_buf(),
            table,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Looks up the text, read as an item id.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<f32>> {
        let id = String::from_utf8_lossy(text);
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Input("cannot encode empty text".into()));
        }
        self.table
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }
}
