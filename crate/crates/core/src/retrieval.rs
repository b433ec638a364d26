//! Bag-of-visual-words image retrieval with TF-IDF weighting.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{Descriptor, FeatureDetector};
use crate::scene::ReferenceTuple;

pub const DEFAULT_VOCABULARY_SIZE: usize = 256;
const MAGIC: &[u8; 4] = b"CLBW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("vocabulary size must be at least 2")]
    InvalidVocabularySize,
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    centers: Vec<Vec<f32>>,
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Vocabulary {
    pub fn new(centers: Vec<Vec<f32>>) -> Result<Self, RetrievalError> {
        if centers.len() < 2 {
            return Err(RetrievalError::InvalidVocabularySize);
        }
        let dim = centers[0].len();
        for c in &centers {
            if c.len() != dim {
                return Err(RetrievalError::DimensionMismatch { expected: dim, got: c.len() });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::Format("non-finite center".into()));
            }
        }
        Ok(Self { dim, centers })
    }

    pub fn size(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Vec<f32>] {
        &self.centers
    }

    /// Nearest center; ties go to the lower word id.
    pub fn quantize(&self, d: &[f32]) -> u32 {
        let mut best = (f32::INFINITY, 0usize);
        for (i, c) in self.centers.iter().enumerate() {
            let e = dist2(d, c);
            if e < best.0 {
                best = (e, i);
            }
        }
        best.1 as u32
    }

    pub fn words(&self, descriptors: &[Descriptor]) -> Vec<u32> {
        descriptors.iter().map(|d| self.quantize(&d.0)).collect()
    }
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
pub fn build_vocabulary(sample: &[Descriptor], size: usize, seed: u64) -> Result<Vocabulary, RetrievalError> {
    build_vocabulary_with(sample, size, seed, 20)
}

pub fn build_vocabulary_with(
    sample: &[Descriptor],
    size: usize,
    seed: u64,
    max_iterations: usize,
) -> Result<Vocabulary, RetrievalError> {
    if size < 2 {
        return Err(RetrievalError::InvalidVocabularySize);
    }
    if sample.len() < size {
        return Err(RetrievalError::TooFewSamples { needed: size, got: sample.len() });
    }
    let dim = sample[0].len();
    if let Some(bad) = sample.iter().find(|d| d.len() != dim) {
        return Err(RetrievalError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let data: Vec<&[f32]> = sample.iter().map(|d| d.0.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![false; data.len()];
    let first = rng.gen_range(0..data.len());
    chosen[first] = true;
    let mut centers: Vec<Vec<f32>> = vec![data[first].to_vec()];
    let mut nearest: Vec<f64> = data.iter().map(|d| dist2(d, data[first]) as f64).collect();
    while centers.len() < size {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            chosen.iter().position(|c| !c).expect("sample has at least `size` entries")
        };
        chosen[pick] = true;
        centers.push(data[pick].to_vec());
        for (i, d) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(d, data[pick]) as f64);
        }
    }

    let mut vocab = Vocabulary { dim, centers };
    let mut assignment: Vec<u32> = data.iter().map(|d| vocab.quantize(d)).collect();
    for _ in 0..max_iterations {
        let mut sums = vec![vec![0.0f64; dim]; size];
        let mut counts = vec![0usize; size];
        for (d, &a) in data.iter().zip(&assignment) {
            counts[a as usize] += 1;
            for (s, v) in sums[a as usize].iter_mut().zip(d.iter()) {
                *s += *v as f64;
            }
        }
        for (c, (sum, n)) in vocab.centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if *n > 0 {
                for (cv, s) in c.iter_mut().zip(sum) {
                    *cv = (s / *n as f64) as f32;
                }
            }
        }
        let next: Vec<u32> = data.iter().map(|d| vocab.quantize(d)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(vocab)
}

/// Sparse L2-normalized TF-IDF vector, sorted by word id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector {
    pub entries: Vec<(u32, f64)>,
}

impl BowVector {
    fn from_words(words: &[u32], idf: &[f64]) -> Self {
        if words.is_empty() {
            return Self::default();
        }
        let mut sorted = words.to_vec();
        sorted.sort_unstable();
        let len = words.len() as f64;
        let mut entries = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let w = sorted[i];
            let mut j = i;
            while j < sorted.len() && sorted[j] == w {
                j += 1;
            }
            let weight = (j - i) as f64 / len * idf.get(w as usize).copied().unwrap_or(0.0);
            if weight > 0.0 {
                entries.push((w, weight));
            }
            i = j;
        }
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            entries.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        Self { entries }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    vocabulary: Vocabulary,
    doc_ids: Vec<usize>,
    idf: Vec<f64>,
    /// Per word: (document slot, normalized weight), ordered by slot.
    postings: Vec<Vec<(u32, f64)>>,
}

impl InvertedIndex {
    /// Builds the index from pre-quantized word lists.
    pub fn from_words(vocabulary: Vocabulary, docs: &[(usize, Vec<u32>)]) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let v = vocabulary.size();
        let mut df = vec![0usize; v];
        for (_, words) in docs {
            let mut seen: Vec<u32> = words.clone();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                if w as usize >= v {
                    return Err(RetrievalError::Format(format!("word {w} outside vocabulary of {v}")));
                }
                df[w as usize] += 1;
            }
        }
        let n = docs.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| if d == 0 { 0.0 } else { (n / d as f64).ln() }).collect();
        let mut postings = vec![Vec::new(); v];
        for (slot, (_, words)) in docs.iter().enumerate() {
            for (w, weight) in BowVector::from_words(words, &idf).entries {
                postings[w as usize].push((slot as u32, weight));
            }
        }
        Ok(Self { vocabulary, doc_ids: docs.iter().map(|(id, _)| *id).collect(), idf, postings })
    }

    /// Quantizes each document's descriptors and builds the index.
    pub fn build(vocabulary: Vocabulary, docs: &[(usize, &[Descriptor])]) -> Result<Self, RetrievalError> {
        let words: Vec<(usize, Vec<u32>)> = docs.iter().map(|(id, d)| (*id, vocabulary.words(d))).collect();
        Self::from_words(vocabulary, &words)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[usize] {
        &self.doc_ids
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn bow(&self, words: &[u32]) -> BowVector {
        BowVector::from_words(words, &self.idf)
    }

    /// Cosine scores for every indexed image, ranked by score then id.
    pub fn rank_words(&self, words: &[u32]) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let q = self.bow(words);
        let mut scores = vec![0.0f64; self.len()];
        for (w, qv) in &q.entries {
            for (slot, dv) in &self.postings[*w as usize] {
                scores[*slot as usize] += qv * dv;
            }
        }
        let mut ranked: Vec<(usize, f64)> =
            self.doc_ids.iter().copied().zip(scores.into_iter().map(|s| s.clamp(0.0, 1.0))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    pub fn top_k_words(&self, words: &[u32], k: usize) -> Result<Vec<(usize, f64)>, RetrievalError> {
        let mut ranked = self.rank_words(words)?;
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Persists the index (little-endian, versioned).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.vocabulary.size() as u32, self.len() as u32, self.vocabulary.dim() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in self.vocabulary.centers() {
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.idf {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.doc_ids {
            w.write_all(&(*id as u64).to_le_bytes())?;
        }
        for list in &self.postings {
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for (slot, weight) in list {
                w.write_all(&slot.to_le_bytes())?;
                w.write_all(&weight.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let (v, ndocs, dim) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        let mut centers = Vec::with_capacity(v);
        for _ in 0..v {
            let mut c = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                c.push(f32::from_le_bytes(b));
            }
            centers.push(c);
        }
        let vocabulary = Vocabulary::new(centers)?;
        let idf = (0..v).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let doc_ids = (0..ndocs).map(|_| read_u64(&mut r).map(|x| x as usize)).collect::<Result<Vec<_>, _>>()?;
        let mut postings = Vec::with_capacity(v);
        for _ in 0..v {
            let n = read_u32(&mut r)? as usize;
            let mut list = Vec::with_capacity(n.min(ndocs));
            for _ in 0..n {
                let slot = read_u32(&mut r)?;
                if slot as usize >= ndocs {
                    return Err(RetrievalError::Format(format!("posting slot {slot} out of range")));
                }
                list.push((slot, read_f64(&mut r)?));
            }
            postings.push(list);
        }
        Ok(Self { vocabulary, doc_ids, idf, postings })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, RetrievalError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, RetrievalError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, RetrievalError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Detects features in every reference image and indexes them.
pub fn index_references(
    refs: &[ReferenceTuple],
    vocabulary: Vocabulary,
    detector: &dyn FeatureDetector,
) -> Result<InvertedIndex, RetrievalError> {
    let feats: Vec<(usize, Vec<Descriptor>)> =
        refs.iter().map(|r| (r.id, detector.detect_and_describe(&r.image).descriptors)).collect();
    let docs: Vec<(usize, &[Descriptor])> = feats.iter().map(|(id, d)| (*id, d.as_slice())).collect();
    InvertedIndex::build(vocabulary, &docs)
}

/// Top-`k` reference ids for a query's descriptors.
pub fn query_top_k(
    index: &InvertedIndex,
    descriptors: &[Descriptor],
    k: usize,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    index.top_k_words(&index.vocabulary().words(descriptors), k)
}
