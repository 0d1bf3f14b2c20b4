//! Character corpus ingestion and the synthetic regression task.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{MlpConfig, MlpModel, RegressionBatch};
use crate::tensor::{Matrix, Rng};

/// Printable ASCII (32..=126) plus one out-of-vocabulary id.
pub const VOCAB_SIZE: usize = 96;
pub const OOV_ID: usize = 95;

pub fn encode_byte(b: u8) -> usize {
    match b {
        32..=126 => (b - 32) as usize,
        _ => OOV_ID,
    }
}

pub fn decode_id(id: usize) -> char {
    if id < OOV_ID {
        (id as u8 + 32) as char
    } else {
        '\u{FFFD}'
    }
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().copied().map(encode_byte).collect()
}

/// Token stream split into a training prefix and a validation suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharCorpus {
    tokens: Vec<usize>,
    split: usize,
}

impl CharCorpus {
    /// The last 5% (at least one token once there are two) is held out.
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("corpus is empty"));
        }
        let n = tokens.len();
        let valid = if n >= 2 { (n / 20).max(1) } else { 0 };
        Ok(Self {
            split: n - valid,
            tokens,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(tokenize(text.as_bytes()))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn valid(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable within a build; used to compare two loads of the same file.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.tokens.hash(&mut h);
        self.split.hash(&mut h);
        h.finish()
    }

    /// Both splits must hold at least one `seq_len + 1` window.
    pub fn check_seq_len(&self, seq_len: usize) -> Result<()> {
        let need = seq_len + 1;
        if self.train().len() < need || self.valid().len() < need {
            return Err(Error::config(format!(
                "corpus of {} tokens is too short for sequence length {seq_len} (train {}, validation {}; each needs {need})",
                self.len(),
                self.train().len(),
                self.valid().len()
            )));
        }
        Ok(())
    }
}

pub fn load_char_corpus(path: &Path) -> Result<CharCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::config(format!("corpus {} is empty", path.display())));
    }
    CharCorpus::from_tokens(tokenize(&bytes))
}

const SUBJECTS: &[&str] = &[
    "the cat",
    "a dog",
    "the old man",
    "my sister",
    "the river",
    "a small bird",
    "the teacher",
    "our neighbor",
    "the wind",
    "a stranger",
    "the children",
    "the farmer",
    "her brother",
    "the captain",
    "a young fox",
];
const VERBS: &[&str] = &[
    "sees",
    "follows",
    "finds",
    "carries",
    "watches",
    "remembers",
    "builds",
    "paints",
    "crosses",
    "opens",
    "hears",
    "likes",
    "keeps",
    "leaves",
    "brings",
];
const OBJECTS: &[&str] = &[
    "the red door",
    "a quiet house",
    "the long road",
    "an empty boat",
    "the tall tree",
    "a broken clock",
    "the green hill",
    "a warm fire",
    "the last letter",
    "a heavy stone",
    "the bright window",
    "an old map",
];
const PLACES: &[&str] = &[
    "in the morning",
    "near the sea",
    "after the rain",
    "under the bridge",
    "at night",
    "by the market",
    "before dinner",
    "in the garden",
];
const JOINERS: &[&str] = &["and then", "but", "because", "while", "so"];

fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    words[rng.below(words.len())]
}

fn capitalize(s: &str, out: &mut String) {
    let mut chars = s.chars();
    if let Some(c) = chars.next() {
        out.extend(c.to_uppercase());
        out.push_str(chars.as_str());
    }
}

/// Deterministic English-like text with clause-level structure, used when no
/// corpus file is configured.
pub fn synthetic_text(seed: u64, chars: usize) -> String {
    let mut rng = Rng::with_stream(seed, 0x7e47);
    let mut out = String::with_capacity(chars + 128);
    while out.len() < chars {
        let mut sentence = String::new();
        sentence.push_str(pick(&mut rng, SUBJECTS));
        sentence.push(' ');
        sentence.push_str(pick(&mut rng, VERBS));
        sentence.push(' ');
        sentence.push_str(pick(&mut rng, OBJECTS));
        if rng.below(2) == 0 {
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, PLACES));
        }
        if rng.below(3) == 0 {
            sentence.push_str(", ");
            sentence.push_str(pick(&mut rng, JOINERS));
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, SUBJECTS));
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, VERBS));
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, OBJECTS));
        }
        capitalize(&sentence, &mut out);
        out.push_str(if rng.below(8) == 0 { "? " } else { ". " });
    }
    out.truncate(chars);
    out
}

/// Teacher-generated regression data: `y = teacher(x)` with Gaussian `x`.
#[derive(Clone, Debug)]
pub struct RegressionData {
    pub train: RegressionBatch,
    pub eval: RegressionBatch,
}

impl RegressionData {
    pub fn generate(config: MlpConfig, n_train: usize, n_eval: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, 0x7ea);
        let teacher = MlpModel::new(config, &mut rng);
        let mut make = |n: usize| -> Result<RegressionBatch> {
            let inputs = rng.gaussian_matrix(n, config.input_dim);
            let targets = teacher.predict(&inputs)?;
            Ok(RegressionBatch { inputs, targets })
        };
        let train = make(n_train)?;
        let eval = make(n_eval)?;
        Ok(Self { train, eval })
    }

    /// Rows `idx` of the training set.
    pub fn sample(&self, idx: &[usize]) -> RegressionBatch {
        let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j));
        RegressionBatch {
            inputs: pick(&self.train.inputs),
            targets: pick(&self.train.targets),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn abc_is_three_stable_tokens() {
        let c = CharCorpus::from_text("abc").unwrap();
        assert_eq!(c.tokens(), &[65, 66, 67]);
        assert_eq!(decode_id(65), 'a');
    }

    #[test]
    fn non_printable_bytes_share_one_id() {
        assert_eq!(tokenize(b"\n\t\x7f"), vec![OOV_ID; 3]);
        assert_eq!(tokenize("é".as_bytes()), vec![OOV_ID; 2]);
        assert_eq!(encode_byte(b' '), 0);
        assert_eq!(encode_byte(b'~'), 94);
    }

    #[test]
    fn split_is_contiguous_suffix() {
        let c = CharCorpus::from_tokens((0..200).map(|i| i % 90).collect()).unwrap();
        assert_eq!(c.train().len(), 190);
        assert_eq!(c.valid(), &c.tokens()[190..]);
    }

    #[test]
    fn short_corpus_is_config_error() {
        let c = CharCorpus::from_text("hello world").unwrap();
        assert!(matches!(c.check_seq_len(16), Err(Error::Config(_))));
    }

    #[test]
    fn file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::File::create(&path)
            .unwrap()
            .write_all(synthetic_text(1, 5000).as_bytes())
            .unwrap();
        let a = load_char_corpus(&path).unwrap();
        let b = load_char_corpus(&path).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.len(), 5000);

        let empty = dir.path().join("empty.txt");
        fs::File::create(&empty).unwrap();
        assert!(matches!(load_char_corpus(&empty), Err(Error::Config(_))));
        assert!(matches!(
            load_char_corpus(&dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_text_is_deterministic_printable() {
        let t = synthetic_text(3, 2000);
        assert_eq!(t, synthetic_text(3, 2000));
        assert_ne!(t, synthetic_text(4, 2000));
        assert_eq!(t.len(), 2000);
        assert!(tokenize(t.as_bytes()).iter().all(|&id| id != OOV_ID));
    }
}
