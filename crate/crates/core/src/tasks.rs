//! Synthetic sequence-to-sequence tasks and the dataset text format.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{is_special, Token, NUM_SPECIAL};

/// Seed of the fixed lexicon shared by every toy-translation dataset, so that
/// train and test splits generated with different seeds agree.
const LEXICON_SEED: u64 = 0x5eed_1e81;
const SWAP_PROB: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    ToyTranslate,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "toy_translate" | "translate" => Ok(TaskKind::ToyTranslate),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::ToyTranslate => "toy_translate",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary size including the special tokens.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
    /// Probability that an odd-indexed target token is rewritten as a function
    /// of its left neighbor. Only used by the toy translation task.
    #[serde(default)]
    pub dependency_strength: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, count: usize, seed: u64) -> Self {
        Self { kind, vocab_size, min_len, max_len, count, seed, dependency_strength: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!("need 2 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len)));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return Err(Error::Config(format!("vocabulary of {} leaves no payload tokens", self.vocab_size)));
        }
        if !(0.0..=1.0).contains(&self.dependency_strength) {
            return Err(Error::Config(format!("dependency strength {} is not a probability", self.dependency_strength)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    /// Generator settings, absent for derived data such as distilled sets.
    pub task: Option<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<Token>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }
}

/// Fixed random maps over payload tokens used by the toy translation task:
/// a substitution bijection and the left-neighbor rewrite function.
struct Lexicon {
    substitute: Vec<Token>,
    follow: Vec<Token>,
}

impl Lexicon {
    fn new(vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED ^ vocab as u64);
        let payload: Vec<Token> = (NUM_SPECIAL as Token..vocab as Token).collect();
        let mut substitute = payload.clone();
        substitute.shuffle(&mut rng);
        let follow = payload.iter().map(|_| payload[rng.gen_range(0..payload.len())]).collect();
        Self { substitute, follow }
    }

    fn map(table: &[Token], t: Token) -> Token {
        table[t as usize - NUM_SPECIAL]
    }
}

fn translate(src: &[Token], lex: &Lexicon, strength: f64, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let mut out: Vec<Token> = src.iter().map(|&t| Lexicon::map(&lex.substitute, t)).collect();
    for pair in out.chunks_exact_mut(2) {
        if rng.gen_bool(SWAP_PROB) {
            pair.swap(0, 1);
        }
    }
    for i in (1..out.len()).step_by(2) {
        if rng.gen_bool(strength) {
            out[i] = Lexicon::map(&lex.follow, out[i - 1]);
        }
    }
    out
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = (spec.kind == TaskKind::ToyTranslate).then(|| Lexicon::new(spec.vocab_size));
    let mut pairs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<Token> = (0..len).map(|_| rng.gen_range(NUM_SPECIAL as Token..spec.vocab_size as Token)).collect();
        let tgt = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.clone();
                t.sort_unstable();
                t
            }
            TaskKind::ToyTranslate => translate(&src, lex.as_ref().expect("lexicon"), spec.dependency_strength, &mut rng),
        };
        pairs.push(Pair { src, tgt });
    }
    Ok(Dataset {
        meta: DatasetMeta { vocab_src: spec.vocab_size, vocab_tgt: spec.vocab_size, task: Some(spec.clone()) },
        pairs,
    })
}

/// Sidecar metadata path for a dataset file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn join(tokens: &[Token]) -> String {
    tokens.iter().map(Token::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for p in &data.pairs {
        writeln!(out, "{}\t{}", join(&p.src), join(&p.tgt))?;
    }
    out.flush()?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&data.meta)?)?;
    Ok(())
}

/// Parses space-separated ids, rejecting special tokens and ids outside the
/// vocabulary.
pub fn parse_tokens(field: &str, vocab: usize) -> std::result::Result<Vec<Token>, String> {
    let tokens = field
        .split_whitespace()
        .map(|w| w.parse::<Token>().map_err(|_| format!("'{w}' is not a token id")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        return Err("empty sequence".into());
    }
    if let Some(t) = tokens.iter().find(|&&t| is_special(t) || t as usize >= vocab) {
        return Err(format!("token {t} is reserved or outside the vocabulary of {vocab}"));
    }
    Ok(tokens)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_file).map_err(|e| Error::Parse {
        path: meta_file.clone(),
        line: 0,
        msg: e.to_string(),
    })?)
    .map_err(|e| Error::Parse { path: meta_file, line: e.line(), msg: e.to_string() })?;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("expected a tab between source and target".into()))?;
        let src = parse_tokens(src, meta.vocab_src).map_err(err)?;
        let tgt = parse_tokens(tgt, meta.vocab_tgt).map_err(err)?;
        pairs.push(Pair { src, tgt });
    }
    Ok(Dataset { meta, pairs })
}

/// One source sentence per line.
pub fn read_sources(path: &Path, vocab: usize) -> Result<Vec<Vec<Token>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let field = line.split('\t').next().unwrap_or("");
            parse_tokens(field, vocab).map_err(|msg| Error::Parse { path: path.to_path_buf(), line: i + 1, msg })
        })
        .collect()
}

/// Mutual information (nats) between adjacent target tokens, estimated from
/// bigram counts over all neighboring positions.
pub fn adjacent_mutual_information(pairs: &[Pair]) -> f64 {
    let mut joint: HashMap<(Token, Token), f64> = HashMap::new();
    let mut left: HashMap<Token, f64> = HashMap::new();
    let mut right: HashMap<Token, f64> = HashMap::new();
    let mut total = 0.0;
    for p in pairs {
        for w in p.tgt.windows(2) {
            *joint.entry((w[0], w[1])).or_default() += 1.0;
            *left.entry(w[0]).or_default() += 1.0;
            *right.entry(w[1]).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    joint
        .iter()
        .map(|(&(a, b), &n)| {
            let pab = n / total;
            pab * (pab / ((left[&a] / total) * (right[&b] / total))).ln()
        })
        .sum()
}
