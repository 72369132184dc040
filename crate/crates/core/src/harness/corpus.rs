use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_domains: usize,
    pub docs_per_domain: usize,
    /// Bytes per document.
    pub doc_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            docs_per_domain: 200,
            doc_len: 320,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    /// `<source>:<index>`; also the key for precomputed embeddings.
    pub id: String,
    /// Source file index (the planted domain for synthetic corpora).
    pub domain: usize,
    pub text: String,
}

const PROSE_SUBJECTS: &[&str] = &[
    "the river",
    "a farmer",
    "the old stone",
    "my sister",
    "the quiet town",
    "a small bird",
    "the teacher",
    "the garden",
    "an owl",
    "the baker",
];
const PROSE_VERBS: &[&str] = &[
    "carries",
    "watches",
    "remembers",
    "follows",
    "paints",
    "finds",
    "keeps",
    "hears",
    "greets",
    "lifts",
];
const PROSE_OBJECTS: &[&str] = &[
    "the morning light",
    "a wooden boat",
    "her brother",
    "the long road",
    "some bread",
    "the evening bell",
    "a green field",
    "the cold wind",
    "his letters",
    "the market",
];
const TELEGRAPH: &[&str] = &[
    "ALPHA", "BRAVO", "CHARLIE", "DELTA", "ECHO", "FOXTROT", "GOLF", "HOTEL", "KILO", "LIMA",
    "OSCAR", "TANGO",
];
const CODE_FNS: &[&str] = &["add", "mul", "load", "store", "emit", "swap"];

fn arithmetic(rng: &mut ChaCha8Rng) -> String {
    let a = rng.gen_range(0..50);
    let b = rng.gen_range(0..50);
    if rng.gen_bool(0.5) {
        format!("{a} + {b} = {}. ", a + b)
    } else {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        format!("{hi} - {lo} = {}. ", hi - lo)
    }
}

fn code(rng: &mut ChaCha8Rng) -> String {
    let f = CODE_FNS.choose(rng).unwrap();
    format!(
        "let v{} = {f}(v{}, {}); ",
        rng.gen_range(0..10),
        rng.gen_range(0..10),
        rng.gen_range(0..100)
    )
}

fn prose(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {}. ",
        PROSE_SUBJECTS.choose(rng).unwrap(),
        PROSE_VERBS.choose(rng).unwrap(),
        PROSE_OBJECTS.choose(rng).unwrap()
    )
}

fn telegraph(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..5);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(TELEGRAPH.choose(rng).unwrap());
        s.push(' ');
    }
    s.push_str("STOP ");
    s
}

/// A pseudo-language with its own consonant and vowel inventory.
struct PseudoLanguage {
    consonants: Vec<u8>,
    vowels: Vec<u8>,
    end: char,
}

impl PseudoLanguage {
    fn new(domain: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + domain as u64));
        let mut consonants = b"bcdfghjklmnpqrstvwxz".to_vec();
        consonants.shuffle(&mut rng);
        consonants.truncate(6);
        let mut vowels = b"aeiouy".to_vec();
        vowels.shuffle(&mut rng);
        vowels.truncate(2);
        let end = *['!', '?', ';', ':'].choose(&mut rng).unwrap();
        Self {
            consonants,
            vowels,
            end,
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let words = rng.gen_range(3..7);
        let mut s = String::new();
        for w in 0..words {
            if w > 0 {
                s.push(' ');
            }
            for _ in 0..rng.gen_range(1..4) {
                s.push(*self.consonants.choose(rng).unwrap() as char);
                s.push(*self.vowels.choose(rng).unwrap() as char);
            }
        }
        s.push(self.end);
        s.push(' ');
        s
    }
}

/// Documents from `num_domains` distinct generators, deterministic in the seed.
pub fn make_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<Document>> {
    if spec.num_domains == 0 || spec.doc_len == 0 {
        return Err(Error::Config(
            "corpus needs at least one domain and a positive doc_len".into(),
        ));
    }
    let mut docs = Vec::with_capacity(spec.num_domains * spec.docs_per_domain);
    for domain in 0..spec.num_domains {
        let pseudo = PseudoLanguage::new(domain, spec.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, domain as u64));
        for i in 0..spec.docs_per_domain {
            let mut text = String::new();
            while text.len() < spec.doc_len {
                text.push_str(&match domain {
                    0 => arithmetic(&mut rng),
                    1 => code(&mut rng),
                    2 => prose(&mut rng),
                    3 => telegraph(&mut rng),
                    _ => pseudo.sentence(&mut rng),
                });
            }
            text.truncate(spec.doc_len);
            let text = text.trim_end().to_string();
            docs.push(Document {
                id: format!("{}:{i}", domain_stem(domain)),
                domain,
                text,
            });
        }
    }
    Ok(docs)
}

fn domain_stem(domain: usize) -> String {
    format!("domain_{domain:02}")
}

/// Writes one blank-line-separated file per domain.
pub fn write_corpus(docs: &[Document], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let domains = docs.iter().map(|d| d.domain + 1).max().unwrap_or(0);
    let mut paths = Vec::new();
    for domain in 0..domains {
        let body: Vec<&str> = docs
            .iter()
            .filter(|d| d.domain == domain)
            .map(|d| d.text.as_str())
            .collect();
        let path = dir.join(format!("{}.txt", domain_stem(domain)));
        std::fs::write(&path, body.join("\n\n") + "\n").map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn split_documents(text: &str) -> Vec<&str> {
    text.split("\n\n")
        .map(|d| d.trim_matches(|c| c == '\n' || c == '\r'))
        .filter(|d| !d.trim().is_empty())
        .collect()
}

/// Reads a corpus from files and directories of `.txt` files. Every file
/// holds blank-line-separated documents; files are numbered in the order
/// given, directory entries in name order.
pub fn load_corpus(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x == "txt"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    let mut docs = Vec::new();
    for (domain, f) in files.iter().enumerate() {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            path: f.clone(),
            line: 0,
            detail: format!("not UTF-8: {e}"),
        })?;
        let stem = f.file_stem().map_or_else(
            || format!("file{domain}"),
            |s| s.to_string_lossy().into_owned(),
        );
        for (i, d) in split_documents(&text).into_iter().enumerate() {
            docs.push(Document {
                id: format!("{stem}:{i}"),
                domain,
                text: d.to_string(),
            });
        }
    }
    if docs.is_empty() {
        return Err(Error::Config("corpus contains no documents".into()));
    }
    Ok(docs)
}
