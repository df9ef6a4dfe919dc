//! Corpus ingestion: vocabulary, sentence framing, length-bucketed batches.
//!
//! Input files are UTF-8, one whitespace-pre-tokenized sentence per line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "[s]", "[/s]"];

/// Default cap on words per sentence; longer sentences are cut before EOS.
pub const DEFAULT_MAX_WORDS: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a corpus file into whitespace-split sentences. Blank lines are kept
/// as empty sentences.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Token dictionary. Ids `0..4` are PAD, UNK, BOS (`[s]`), EOS (`[/s]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Ranks tokens by frequency (ties lexicographic) and keeps the top
    /// `max_size - 4`.
    pub fn build<'a, I>(sentences: I, max_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        if max_size < NUM_RESERVED {
            return Err(CorpusError::Config(format!(
                "vocabulary cap {max_size} is below the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut n_sentences = 0;
        for s in sentences {
            n_sentences += 1;
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        if n_sentences == 0 || counts.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED_TOKENS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, ids..., EOS]`; unknown words map to UNK.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w.as_ref())));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Self::encode`]: drops BOS/EOS/PAD framing.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != BOS && i != EOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One token per line after the fixed four-line reserved header.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED {
            return Err(CorpusError::Format("missing reserved header".into()));
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *r {
                return Err(CorpusError::Format(format!(
                    "line {} should be {r}, found {}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(CorpusError::Format("duplicate token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_text(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Builds a vocabulary from a corpus file.
pub fn build_vocab(corpus_path: &Path, max_size: usize) -> Result<Vocab, CorpusError> {
    let lines = read_lines(corpus_path)?;
    Vocab::build(lines.iter(), max_size)
}

/// Frames a raw sentence with BOS/EOS.
pub fn encode_sentence(text: &str, vocab: &Vocab) -> Vec<usize> {
    let words: Vec<&str> = text.split_whitespace().collect();
    vocab.encode(&words)
}

/// Encoded sentences, each framed `[BOS, ..., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub sentences: Vec<Vec<usize>>,
}

impl Dataset {
    /// Encodes sentences, cutting any with more than `max_words` words.
    pub fn encode(lines: &[Vec<String>], vocab: &Vocab, max_words: usize) -> Self {
        let mut truncated = 0;
        let sentences = lines
            .iter()
            .map(|words| {
                if words.len() > max_words {
                    truncated += 1;
                    vocab.encode(&words[..max_words])
                } else {
                    vocab.encode(words)
                }
            })
            .collect();
        if truncated > 0 {
            info!("truncated {truncated} sentences to {max_words} words");
        }
        Self { sentences }
    }

    pub fn load(path: &Path, vocab: &Vocab, max_words: usize) -> Result<Self, CorpusError> {
        let lines = read_lines(path)?;
        if lines.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Self::encode(&lines, vocab, max_words))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Total framed tokens, BOS/EOS included.
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Tokens the decoder predicts: everything after BOS.
    pub fn predicted_token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len() - 1).sum()
    }
}

/// Padded `batch × T_max` id matrix with lengths and mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// Positions of these rows in the source dataset.
    pub origin: Vec<usize>,
}

impl Batch {
    pub fn from_sentences(sentences: &[&[usize]], origin: Vec<usize>) -> Self {
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; sentences.len() * max_len];
        for (b, s) in sentences.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        Self {
            ids,
            lengths: sentences.iter().map(|s| s.len()).collect(),
            max_len,
            origin,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    #[inline]
    pub fn token(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.max_len + t]
    }

    #[inline]
    pub fn valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Ids at step `t` across the batch.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.size()).map(|b| self.token(b, t)).collect()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    /// `mask[b][t] == (t < lengths[b])`, flattened row-major.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &len in &self.lengths {
            m.extend((0..self.max_len).map(|t| t < len));
        }
        m
    }

    /// Total predicted tokens (all real tokens after BOS).
    pub fn predicted_tokens(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }
}

/// Length-bucketed batches: sentences of equal length are grouped, each
/// group is cut into `batch_size` chunks, then batch order is shuffled.
/// Deterministic under `seed`; every sentence appears exactly once.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>, CorpusError> {
    if batch_size < 1 {
        return Err(CorpusError::Config("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.sentences.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_len {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            let rows: Vec<&[usize]> = chunk.iter().map(|&i| dataset.sentences[i].as_slice()).collect();
            batches.push(Batch::from_sentences(&rows, chunk.to_vec()));
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Batches in corpus order, padded to the longest member.
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> Result<Vec<Batch>, CorpusError> {
    if batch_size < 1 {
        return Err(CorpusError::Config("batch_size must be at least 1".into()));
    }
    Ok(dataset
        .sentences
        .chunks(batch_size)
        .enumerate()
        .map(|(c, chunk)| {
            let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let origin = (c * batch_size..c * batch_size + chunk.len()).collect();
            Batch::from_sentences(&rows, origin)
        })
        .collect())
}

/// Empirical distribution of framed sentence lengths `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthHistogram {
    probs: BTreeMap<usize, f64>,
}

impl LengthHistogram {
    pub fn prob(&self, len: usize) -> f64 {
        self.probs.get(&len).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().map(|(&k, &v)| (k, v))
    }

    /// Mean framed length.
    pub fn mean(&self) -> f64 {
        self.probs.iter().map(|(&k, &p)| k as f64 * p).sum()
    }

    /// Mean word count, BOS/EOS excluded (the usual "average length" figure).
    pub fn mean_words(&self) -> f64 {
        self.mean() - 2.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (&k, &p) in &self.probs {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
        last
    }

    pub fn to_map(&self) -> BTreeMap<usize, f64> {
        self.probs.clone()
    }

    pub fn from_map(probs: BTreeMap<usize, f64>) -> Self {
        Self { probs }
    }
}

pub fn length_histogram(dataset: &Dataset) -> Result<LengthHistogram, CorpusError> {
    if dataset.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &dataset.sentences {
        *counts.entry(s.len()).or_default() += 1;
    }
    let n = dataset.len() as f64;
    Ok(LengthHistogram {
        probs: counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
    })
}

/// Corpus directory layout: `train.txt`, `valid.txt`, `test.txt`.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<Vec<String>>,
    pub valid: Vec<Vec<String>>,
    pub test: Vec<Vec<String>>,
}

impl CorpusSplits {
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let train = read_lines(&dir.join("train.txt"))?;
        if train.is_empty() {
            return Err(CorpusError::Empty);
        }
        let optional = |name: &str| -> Result<Vec<Vec<String>>, CorpusError> {
            let p = dir.join(name);
            if p.exists() {
                read_lines(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            train,
            valid: optional("valid.txt")?,
            test: optional("test.txt")?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, lines) in [("train.txt", &self.train), ("valid.txt", &self.valid), ("test.txt", &self.test)] {
            write_sentences(&dir.join(name), lines)?;
        }
        Ok(())
    }
}

/// Writes one space-joined sentence per line.
pub fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for s in sentences {
        writeln!(f, "{}", s.join(" ")).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(text: &str) -> Vec<Vec<String>> {
        text.lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographically() {
        let corpus = lines("a b\na c");
        let v = Vocab::build(corpus.iter(), 10).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
        let v = Vocab::build(corpus.iter(), 5).unwrap();
        assert_eq!(&v.tokens()[4..], &["a"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let corpus: Vec<Vec<String>> = Vec::new();
        assert!(matches!(Vocab::build(corpus.iter(), 10), Err(CorpusError::Empty)));
        let blank = lines("\n\n");
        assert!(matches!(Vocab::build(blank.iter(), 10), Err(CorpusError::Empty)));
    }

    #[test]
    fn encode_frames_with_bos_eos() {
        let v = Vocab::build(lines("a b").iter(), 10).unwrap();
        assert_eq!(encode_sentence("a b", &v), vec![BOS, v.id("a"), v.id("b"), EOS]);
        assert_eq!(encode_sentence("a zzz", &v), vec![BOS, v.id("a"), UNK, EOS]);
        assert_eq!(encode_sentence("", &v), vec![BOS, EOS]);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build(lines("x y y z").iter(), 10).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<unk>\n[s]\n[/s]\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn truncation_keeps_eos() {
        let corpus = lines("a b c d e");
        let v = Vocab::build(corpus.iter(), 10).unwrap();
        let d = Dataset::encode(&corpus, &v, 3);
        assert_eq!(d.sentences[0].len(), 5);
        assert_eq!(*d.sentences[0].last().unwrap(), EOS);
    }

    #[test]
    fn batches_partition_the_dataset() {
        let d = Dataset {
            sentences: vec![vec![BOS, 5, EOS]; 5],
        };
        let batches = make_batches(&d, 2, 0).unwrap();
        let mut sizes: Vec<usize> = batches.iter().map(Batch::size).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2, 2]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.origin.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(make_batches(&d, 0, 0).is_err());
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let d = Dataset {
            sentences: (0..20).map(|i| vec![BOS; 2 + i % 4]).collect(),
        };
        assert_eq!(make_batches(&d, 3, 9).unwrap(), make_batches(&d, 3, 9).unwrap());
    }

    #[test]
    fn padding_and_mask_agree_with_lengths() {
        let a = [BOS, 4, EOS];
        let b = [BOS, EOS];
        let batch = Batch::from_sentences(&[&a, &b], vec![0, 1]);
        assert_eq!(batch.max_len, 3);
        assert_eq!(batch.token(1, 2), PAD);
        assert_eq!(batch.mask(), vec![true, true, true, true, true, false]);
        assert_eq!(batch.predicted_tokens(), 3);
    }

    #[test]
    fn histogram_cases() {
        let d = Dataset {
            sentences: vec![vec![0; 9]; 3],
        };
        let h = length_histogram(&d).unwrap();
        assert_eq!(h.prob(9), 1.0);
        let d = Dataset {
            sentences: vec![vec![0; 4], vec![0; 4], vec![0; 8]],
        };
        let h = length_histogram(&d).unwrap();
        assert!((h.prob(4) - 2.0 / 3.0).abs() < 1e-15);
        assert!((h.prob(8) - 1.0 / 3.0).abs() < 1e-15);
        assert!(length_histogram(&Dataset::default()).is_err());
    }
}
