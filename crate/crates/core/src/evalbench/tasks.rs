//! Synthetic sequence tasks. The last four vocabulary ids are reserved:
//! `V-4` separates segments and `V-3..V-1` mark the start of a recall, copy
//! or character-LM sequence.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

const CORPUS: &str = include_str!("corpus.txt");
const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz .,;:-'";
const RESERVED: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    AssocRecall,
    Copy,
    #[serde(rename = "char-lm")]
    CharLM,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::AssocRecall, TaskKind::Copy, TaskKind::CharLM];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AssocRecall => "assoc-recall",
            TaskKind::Copy => "copy",
            TaskKind::CharLM => "char-lm",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("task", format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Sequence length.
    pub length: usize,
    pub vocab: usize,
    pub n_examples: usize,
    pub seed: u64,
}

/// One sequence; `targets[t]` is the token position `t` should predict.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn scored(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stable textual form, used for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ex in &self.examples {
            for (t, y) in ex.tokens.iter().zip(&ex.targets) {
                let y = y.map_or(-1, |v| v as i64);
                out.extend_from_slice(format!("{t}:{y} ").as_bytes());
            }
            out.push(b'\n');
        }
        out
    }

    /// A dataset cycling through the examples of several others.
    pub fn interleave(parts: &[&Dataset]) -> Dataset {
        let longest = parts.iter().map(|d| d.len()).max().unwrap_or(0);
        let mut examples = Vec::new();
        for i in 0..longest {
            for p in parts {
                if let Some(ex) = p.examples.get(i) {
                    examples.push(ex.clone());
                }
            }
        }
        Dataset { examples }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub train: Dataset,
    pub eval: Dataset,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, vocab: usize, n_examples: usize, seed: u64) -> Self {
        Self {
            kind,
            length,
            vocab,
            n_examples,
            seed,
        }
    }

    pub fn sep(&self) -> usize {
        self.vocab - RESERVED
    }

    fn bos(&self) -> usize {
        self.vocab - RESERVED
            + match self.kind {
                TaskKind::AssocRecall => 1,
                TaskKind::Copy => 2,
                TaskKind::CharLM => 3,
            }
    }

    fn usable(&self) -> usize {
        self.vocab - RESERVED
    }

    /// Key ids `[0, n)` and value ids `[n, usable)` for recall.
    fn recall_split(&self) -> (usize, usize) {
        let keys = self.usable() / 2;
        (keys, self.usable() - keys)
    }

    /// Number of distinct answers a recall query can have.
    pub fn value_count(&self) -> usize {
        self.recall_split().1
    }

    /// Stored pairs; each recall sequence also asks this many queries.
    pub fn recall_pairs(&self) -> usize {
        self.length.saturating_sub(2) / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= RESERVED + 1 {
            return Err(Error::config("vocab", "too small for the reserved tokens"));
        }
        match self.kind {
            TaskKind::AssocRecall => {
                let (keys, _) = self.recall_split();
                if self.length < 6 {
                    return Err(Error::config("length", "recall needs at least 6 tokens for one pair"));
                }
                if self.recall_pairs() > keys {
                    return Err(Error::config(
                        "length",
                        format!("{} pairs need more than the {keys} available keys", self.recall_pairs()),
                    ));
                }
            }
            TaskKind::Copy => {
                if self.length < 4 {
                    return Err(Error::config("length", "copy needs at least 4 tokens"));
                }
            }
            TaskKind::CharLM => {
                if self.usable() < CHARSET.chars().count() {
                    return Err(Error::config("vocab", "too small for the character set"));
                }
                if self.length < 2 || self.length > corpus_ids().len() / 10 {
                    return Err(Error::config("length", "does not fit the bundled text"));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut SeededRng, text: &[usize]) -> Example {
        let t_len = self.length;
        match self.kind {
            TaskKind::AssocRecall => {
                let (n_keys, n_vals) = self.recall_split();
                let pairs = self.recall_pairs();
                let mut keys: Vec<usize> = (0..n_keys).collect();
                rng.shuffle(&mut keys);
                let mut tokens = vec![self.bos()];
                let mut values = Vec::with_capacity(pairs);
                for &k in &keys[..pairs] {
                    let v = n_keys + rng.below(n_vals);
                    tokens.extend([k, v]);
                    values.push(v);
                }
                tokens.push(self.sep());
                let mut targets = vec![None; tokens.len()];
                for _ in 0..pairs {
                    let q = rng.below(pairs);
                    tokens.extend([keys[q], values[q]]);
                    targets.extend([Some(values[q]), None]);
                }
                Example { tokens, targets }
            }
            TaskKind::Copy => {
                let n = (t_len - 2) / 2;
                let seq: Vec<usize> = (0..n).map(|_| rng.below(self.usable())).collect();
                let mut tokens = vec![self.bos()];
                tokens.extend(&seq);
                tokens.push(self.sep());
                tokens.extend(&seq);
                let mut targets = vec![None; tokens.len()];
                for i in 0..n {
                    targets[n + 1 + i] = Some(seq[i]);
                }
                Example { tokens, targets }
            }
            TaskKind::CharLM => {
                let start = rng.below(text.len() - (t_len - 1) + 1);
                let mut tokens = vec![self.bos()];
                tokens.extend(&text[start..start + t_len - 1]);
                let mut targets: Vec<Option<usize>> = tokens[1..].iter().map(|&c| Some(c)).collect();
                targets.push(None);
                Example { tokens, targets }
            }
        }
    }

    /// Training and evaluation sets of `n_examples` each. No evaluation
    /// sequence occurs in the training set; character-LM windows come from
    /// disjoint regions of the text.
    pub fn generate(&self) -> Result<TaskSplit> {
        self.validate()?;
        let ids = corpus_ids();
        let cut = ids.len() * 9 / 10;
        let (train_text, eval_text) = (&ids[..cut], &ids[cut..]);
        let mut rng = SeededRng::new(self.seed, &format!("task-{}-train", self.kind));
        let train: Vec<Example> = (0..self.n_examples).map(|_| self.sample(&mut rng, train_text)).collect();
        let seen: HashSet<&Vec<usize>> = train.iter().map(|e| &e.tokens).collect();
        let mut rng = SeededRng::new(self.seed, &format!("task-{}-eval", self.kind));
        let mut eval = Vec::with_capacity(self.n_examples);
        let mut attempts = 0;
        while eval.len() < self.n_examples {
            attempts += 1;
            if attempts > 100 * self.n_examples.max(1) {
                return Err(Error::config("n_examples", "cannot draw enough distinct evaluation sequences"));
            }
            let ex = self.sample(&mut rng, eval_text);
            if !seen.contains(&ex.tokens) {
                eval.push(ex);
            }
        }
        Ok(TaskSplit {
            train: Dataset { examples: train },
            eval: Dataset { examples: eval },
        })
    }
}

/// The bundled text mapped to character ids.
pub fn corpus_ids() -> Vec<usize> {
    let mut out = Vec::with_capacity(CORPUS.len());
    let mut last_space = false;
    for c in CORPUS.chars() {
        let c = if c.is_whitespace() { ' ' } else { c.to_ascii_lowercase() };
        if c == ' ' && last_space {
            continue;
        }
        if let Some(i) = CHARSET.chars().position(|x| x == c) {
            out.push(i);
            last_space = c == ' ';
        }
    }
    out
}
