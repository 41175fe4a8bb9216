//! Review ingestion: tokenization, vocabulary, fixed-length encoding and
//! reproducible train/test/unlabeled splits.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START: u32 = 0;
pub const END: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;
pub const NUM_RESERVED: usize = 4;

pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

const RESERVED: [&str; NUM_RESERVED] = [START_TOKEN, END_TOKEN, UNK_TOKEN, PAD_TOKEN];

/// Review class. The discriminant doubles as the class index in every
/// per-class array (index 0 = non-spam, index 1 = spam).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    NonSpam = 0,
    Spam = 1,
}

pub const NUM_CLASSES: usize = 2;

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::NonSpam, Class::Spam];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        match i {
            0 => Some(Class::NonSpam),
            1 => Some(Class::Spam),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::NonSpam => "nonspam",
            Class::Spam => "spam",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "spam" | "deceptive" | "1" => Ok(Class::Spam),
            "nonspam" | "non-spam" | "truthful" | "0" => Ok(Class::NonSpam),
            other => Err(Error::InvalidArgument(format!("unknown class label {other:?}"))),
        }
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"))
}

/// Lowercases and splits into word runs and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `target_size - 4` most frequent words; ties go to the
    /// lexicographically smaller word.
    pub fn build<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Self> {
        if target_size < NUM_RESERVED + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {target_size} leaves no room for words (minimum {})",
                NUM_RESERVED + 1
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = ranked
            .into_iter()
            .take(target_size - NUM_RESERVED)
            .map(|(w, _)| w);
        Self::from_words(words)
    }

    /// Reserved tokens first, then `words` in order. Duplicates are rejected.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::InvalidArgument(format!(
                    "reserved token {r} must have id {i}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        encode(text, self, max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let tokens = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Fixed-length encoded review: `<start>`, content, optional `<end>`, padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenSequence {
    /// Validates start/end/pad discipline and derives the content mask.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if ids[0] != START && ids[0] != PAD {
            return Err(Error::InvalidSequence("first token must be <start>".into()));
        }
        // All-pad is allowed (an empty slot); otherwise content starts at 0.
        let content_len = ids.iter().position(|&t| t == PAD).unwrap_or(ids.len());
        if ids[content_len..].iter().any(|&t| t != PAD) {
            return Err(Error::InvalidSequence("<pad> before content".into()));
        }
        let content = &ids[..content_len];
        if content.iter().skip(1).any(|&t| t == START) {
            return Err(Error::InvalidSequence("<start> after position 0".into()));
        }
        if let Some(end_pos) = content.iter().position(|&t| t == END) {
            if end_pos + 1 != content_len {
                return Err(Error::InvalidSequence("content after <end>".into()));
            }
        }
        let mask = (0..ids.len()).map(|i| i < content_len).collect();
        Ok(Self { ids, mask })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions, `<start>`/`<end>` included.
    pub fn content_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn has_end(&self) -> bool {
        self.ids.contains(&END)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;

    fn try_from(ids: Vec<u32>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(s: TokenSequence) -> Self {
        s.ids
    }
}

/// Encodes to exactly `max_len` ids. Long reviews keep `<start>` and the
/// first `max_len - 1` words; `<end>` is dropped when it does not fit.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence length {max_len} is below the minimum of 3"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START);
    for tok in tokenize(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&tok).unwrap_or(UNK));
    }
    if ids.len() < max_len {
        ids.push(END);
    }
    ids.resize(max_len, PAD);
    TokenSequence::new(ids)
}

/// Words joined by single spaces with reserved tokens dropped; `<unk>` is
/// emitted literally when `keep_unk` is set.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary, keep_unk: bool) -> Result<String> {
    seq.check_vocab(vocab.len())?;
    let words: Vec<&str> = seq
        .ids()
        .iter()
        .filter(|&&id| !Vocabulary::is_reserved(id) || (keep_unk && id == UNK))
        .map(|&id| vocab.token(id).expect("checked range"))
        .collect();
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    LabeledSet,
    UnlabeledSet,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub sequence: TokenSequence,
    pub label: Option<Class>,
    pub source: Source,
}

impl Example {
    pub fn new(sequence: TokenSequence, label: Option<Class>, source: Source) -> Result<Self> {
        match (source, label) {
            (Source::LabeledSet, None) => Err(Error::InvalidArgument(
                "labeled example without a label".into(),
            )),
            (Source::UnlabeledSet, Some(_)) => Err(Error::InvalidArgument(
                "unlabeled example carries a label".into(),
            )),
            _ => Ok(Self {
                sequence,
                label,
                source,
            }),
        }
    }

    pub fn labeled(sequence: TokenSequence, label: Class) -> Self {
        Self {
            sequence,
            label: Some(label),
            source: Source::LabeledSet,
        }
    }

    pub fn unlabeled(sequence: TokenSequence) -> Self {
        Self {
            sequence,
            label: None,
            source: Source::UnlabeledSet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            labeled_fraction: 1.0,
            unlabeled_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub labeled_train: Vec<Example>,
    pub labeled_test: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub vocabulary: Vocabulary,
    pub split: SplitSpec,
}

/// Split counts and settings, written next to a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split_seed: u64,
    pub test_fraction: f64,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub labeled_train: usize,
    pub labeled_train_spam: usize,
    pub labeled_train_nonspam: usize,
    pub labeled_test: usize,
    pub unlabeled: usize,
}

impl DatasetBundle {
    pub fn manifest(&self) -> DatasetManifest {
        let spam = self
            .labeled_train
            .iter()
            .filter(|e| e.label == Some(Class::Spam))
            .count();
        DatasetManifest {
            split_seed: self.split.seed,
            test_fraction: self.split.test_fraction,
            labeled_fraction: self.split.labeled_fraction,
            unlabeled_fraction: self.split.unlabeled_fraction,
            vocab_size: self.vocabulary.len(),
            sequence_length: self.sequence_length(),
            labeled_train: self.labeled_train.len(),
            labeled_train_spam: spam,
            labeled_train_nonspam: self.labeled_train.len() - spam,
            labeled_test: self.labeled_test.len(),
            unlabeled: self.unlabeled.len(),
        }
    }

    pub fn sequence_length(&self) -> usize {
        self.labeled_train
            .iter()
            .chain(&self.labeled_test)
            .chain(&self.unlabeled)
            .map(|e| e.sequence.len())
            .next()
            .unwrap_or(0)
    }

    /// Labeled training pairs `(sequence, gold class)`.
    pub fn labeled_pairs(&self) -> Vec<(TokenSequence, Class)> {
        pairs(&self.labeled_train)
    }

    pub fn test_pairs(&self) -> Vec<(TokenSequence, Class)> {
        pairs(&self.labeled_test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn pairs(examples: &[Example]) -> Vec<(TokenSequence, Class)> {
    examples
        .iter()
        .filter_map(|e| e.label.map(|c| (e.sequence.clone(), c)))
        .collect()
}

fn check_fraction(name: &str, f: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero {
        (0.0..=1.0).contains(&f)
    } else {
        f > 0.0 && f <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {f} out of range")))
    }
}

fn take_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Stratified split. The test set is drawn first so that every
/// `labeled_fraction` shares it; the fraction then thins the training side
/// per class. `unlabeled_fraction` may be 0 (no unlabeled data).
pub fn split_and_subsample(
    labeled: &[Example],
    unlabeled: &[Example],
    vocabulary: Vocabulary,
    split: SplitSpec,
) -> Result<DatasetBundle> {
    check_fraction("test_fraction", split.test_fraction, false)?;
    check_fraction("labeled_fraction", split.labeled_fraction, false)?;
    check_fraction("unlabeled_fraction", split.unlabeled_fraction, true)?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in Class::ALL {
        let mut members: Vec<&Example> = labeled
            .iter()
            .filter(|e| e.label == Some(class))
            .collect();
        members.shuffle(&mut rng);
        let n_test = take_count(members.len(), split.test_fraction).min(members.len());
        let (class_test, class_train) = members.split_at(n_test);
        test.extend(class_test.iter().map(|&e| e.clone()));
        let n_keep = take_count(class_train.len(), split.labeled_fraction);
        train.extend(class_train[..n_keep].iter().map(|&e| e.clone()));
    }
    if labeled.iter().any(|e| e.label.is_none()) {
        return Err(Error::InvalidArgument(
            "labeled pool contains an example without a label".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "fractions leave zero training examples".into(),
        ));
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let mut pool: Vec<&Example> = unlabeled.iter().collect();
    pool.shuffle(&mut rng);
    let n_unlabeled = take_count(pool.len(), split.unlabeled_fraction);
    let unlabeled = pool[..n_unlabeled]
        .iter()
        .map(|&e| Example {
            sequence: e.sequence.clone(),
            label: None,
            source: Source::UnlabeledSet,
        })
        .collect();

    Ok(DatasetBundle {
        labeled_train: train,
        labeled_test: test,
        unlabeled,
        vocabulary,
        split,
    })
}

/// Reads a tab-separated file with a `text` and a `label` column.
pub fn read_labeled_tsv(path: &Path) -> Result<Vec<(String, Class)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(false)
        .quoting(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                message: format!("missing column {name:?}"),
            })
    };
    let (text_col, label_col) = (col("text")?, col("label")?);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let label = record[label_col].parse().map_err(|e: Error| Error::Malformed {
            path: path.to_path_buf(),
            message: format!("row {}: {e}", line + 2),
        })?;
        rows.push((record[text_col].to_string(), label));
    }
    Ok(rows)
}

/// One review per line; blank lines are skipped.
pub fn read_unlabeled_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}
