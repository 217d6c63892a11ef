//! Synthetic long-range-dependency tasks, a toy sentiment language and
//! byte-level language-model windows.
//!
//! Every generator is a pure function of the generator state it is handed;
//! the training driver keys that state by `(seed, example index)`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    Adding,
    Copy,
    ToySent,
    CharLm,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [Self::Adding, Self::Copy, Self::ToySent, Self::CharLm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adding => "adding",
            Self::Copy => "copy",
            Self::ToySent => "toysent",
            Self::CharLm => "charlm",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Unknown {
            what: "task",
            value: s.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskInput<T = f64> {
    /// Dense n×d_in features.
    Features(Matrix<T>),
    /// Token ids looked up in an embedding table.
    Tokens(Vec<usize>),
}

impl<T: Real> TaskInput<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Features(m) => m.rows(),
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target<T = f64> {
    /// `(position, class)` pairs, 0-based positions.
    Classes(Vec<(usize, usize)>),
    /// Real-valued target read out at one position.
    Regression { position: usize, values: Vec<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance<T = f64> {
    pub input: TaskInput<T>,
    pub target: Target<T>,
    /// Task-specific positions: the two markers of the adding task, the
    /// salient word of a toy-sentiment sentence.
    pub marks: Vec<usize>,
}

impl<T: Real> TaskInstance<T> {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Adding problem: channel 0 holds uniform values in `[0, 1)`, channel 1
/// marks one position in each half; the target is the sum of the two marked
/// values.
pub fn gen_adding<T: Real>(n: usize, rng: &mut Rng) -> Result<TaskInstance<T>> {
    if n < 2 {
        return Err(Error::InvalidArgument("adding task needs length >= 2".to_string()));
    }
    let half = n / 2;
    let first = rng.below(half);
    let second = half + rng.below(n - half);
    let mut x = Matrix::zeros(n, 2);
    for t in 0..n {
        x.set(t, 0, T::lit(rng.next_f64()));
    }
    x.set(first, 1, T::one());
    x.set(second, 1, T::one());
    let sum = x.get(first, 0) + x.get(second, 0);
    Ok(TaskInstance {
        input: TaskInput::Features(x),
        target: Target::Regression {
            position: n - 1,
            values: vec![sum],
        },
        marks: vec![first, second],
    })
}

/// Input width of the copy task: one channel per symbol, then blank and cue.
pub fn copy_input_width(alphabet: usize) -> usize {
    alphabet + 2
}

/// Copy task: `payload` random symbols, `blank` blanks, a recall cue and
/// `payload` more blanks. The targets are the payload symbols at the final
/// `payload` positions. Inputs are one-hot; channel `alphabet` is the blank
/// and `alphabet + 1` the cue.
pub fn gen_copy<T: Real>(blank: usize, payload: usize, alphabet: usize, rng: &mut Rng) -> Result<TaskInstance<T>> {
    if payload == 0 || alphabet < 2 {
        return Err(Error::InvalidArgument("copy task needs payload >= 1 and alphabet >= 2".to_string()));
    }
    let n = 2 * payload + blank + 1;
    let symbols: Vec<usize> = (0..payload).map(|_| rng.below(alphabet)).collect();
    let mut x = Matrix::zeros(n, copy_input_width(alphabet));
    for t in 0..n {
        let channel = if t < payload {
            symbols[t]
        } else if t == payload + blank {
            alphabet + 1
        } else {
            alphabet
        };
        x.set(t, channel, T::one());
    }
    let targets = symbols.iter().enumerate().map(|(j, &s)| (n - payload + j, s)).collect();
    Ok(TaskInstance {
        input: TaskInput::Features(x),
        target: Target::Classes(targets),
        marks: Vec::new(),
    })
}

/// Toy-sentiment vocabulary. Ids `0..8` are positive salient words, `8..16`
/// negative ones, the rest carry no sentiment.
pub const TOYSENT_VOCAB: [&str; 64] = [
    "great", "excellent", "wonderful", "superb", "brilliant", "delightful", "amazing", "fantastic", //
    "terrible", "awful", "horrible", "dreadful", "boring", "poor", "dull", "bad", //
    "this", "movie", "is", "the", "film", "was", "a", "an", //
    "story", "plot", "actors", "and", "really", "very", "quite", "it", //
    "of", "with", "in", "to", "that", "for", "on", "at", //
    "by", "director", "scene", "ending", "music", "cast", "script", "i", //
    "we", "found", "thought", "felt", "overall", "simply", "just", "so", //
    "my", "friends", "night", "show", "book", "character", "acting", "camera",
];

pub const TOYSENT_POSITIVE: core::ops::Range<usize> = 0..8;
pub const TOYSENT_NEGATIVE: core::ops::Range<usize> = 8..16;
const TOYSENT_NEUTRAL: core::ops::Range<usize> = 16..64;
const TOYSENT_MIN_LEN: usize = 6;
const TOYSENT_MAX_LEN: usize = 14;

pub fn toysent_is_salient(id: usize) -> bool {
    id < TOYSENT_NEGATIVE.end
}

/// Whitespace tokenisation against [`TOYSENT_VOCAB`], case-insensitive.
pub fn toysent_tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            TOYSENT_VOCAB.iter().position(|&v| v == w).ok_or(Error::Unknown {
                what: "word",
                value: w,
            })
        })
        .collect()
}

/// A sentence of neutral filler words with exactly one salient word, whose
/// polarity is the label (1 positive, 0 negative).
pub fn gen_toy_sentiment<T: Real>(rng: &mut Rng) -> TaskInstance<T> {
    let len = TOYSENT_MIN_LEN + rng.below(TOYSENT_MAX_LEN - TOYSENT_MIN_LEN + 1);
    let label = rng.below(2);
    let salient_range = if label == 1 { TOYSENT_POSITIVE } else { TOYSENT_NEGATIVE };
    let salient = salient_range.start + rng.below(salient_range.len());
    let position = rng.below(len);
    let tokens = (0..len)
        .map(|t| {
            if t == position {
                salient
            } else {
                TOYSENT_NEUTRAL.start + rng.below(TOYSENT_NEUTRAL.len())
            }
        })
        .collect();
    TaskInstance {
        input: TaskInput::Tokens(tokens),
        target: Target::Classes(vec![(len - 1, label)]),
        marks: vec![position],
    }
}

pub const CHARLM_MIN_CORPUS: usize = 10_000;
pub const BYTE_VOCAB: usize = 256;

pub fn check_corpus(corpus: &[u8]) -> Result<()> {
    if corpus.len() < CHARLM_MIN_CORPUS {
        return Err(Error::CorpusTooSmall {
            len: corpus.len(),
            min: CHARLM_MIN_CORPUS,
        });
    }
    Ok(())
}

/// Next-byte window: inputs `corpus[start..start+n]`, target at position `t`
/// is `corpus[start+t+1]`.
pub fn charlm_window<T: Real>(corpus: &[u8], start: usize, n: usize) -> Result<TaskInstance<T>> {
    if n == 0 || start + n + 1 > corpus.len() {
        return Err(Error::OutOfRange {
            what: "window start",
            index: start,
            len: corpus.len().saturating_sub(n + 1),
        });
    }
    let tokens = corpus[start..start + n].iter().map(|&b| b as usize).collect();
    let targets = (0..n).map(|t| (t, corpus[start + t + 1] as usize)).collect();
    Ok(TaskInstance {
        input: TaskInput::Tokens(tokens),
        target: Target::Classes(targets),
        marks: Vec::new(),
    })
}

/// Consecutive non-overlapping windows covering the corpus from the start.
pub fn charlm_tiles<T: Real>(corpus: &[u8], n: usize) -> Result<Vec<TaskInstance<T>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".to_string()));
    }
    let count = corpus.len().saturating_sub(1) / n;
    (0..count).map(|w| charlm_window(corpus, w * n, n)).collect()
}

/// Endless stream of randomly placed training windows.
#[derive(Debug)]
pub struct CharLmBatches<'a> {
    corpus: &'a [u8],
    n: usize,
    batch: usize,
    rng: Rng,
}

impl Iterator for CharLmBatches<'_> {
    type Item = Vec<TaskInstance<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        let span = self.corpus.len() - self.n;
        Some(
            (0..self.batch)
                .map(|_| charlm_window(self.corpus, self.rng.below(span), self.n).expect("start within span"))
                .collect(),
        )
    }
}

pub fn charlm_batches(corpus: &[u8], n: usize, batch: usize, rng: Rng) -> Result<CharLmBatches<'_>> {
    check_corpus(corpus)?;
    if n == 0 || batch == 0 || n + 1 > corpus.len() {
        return Err(Error::InvalidArgument("window length and batch must be >= 1 and fit the corpus".to_string()));
    }
    Ok(CharLmBatches { corpus, n, batch, rng })
}
