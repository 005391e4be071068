//! Synthetic arithmetic datasets with a fixed, aligned token layout.
//!
//! Every example is four tokens long — operand, operator, operand, equals —
//! and the model predicts the single answer token after the equals sign.
//! Because the layout never varies, a given sequence position always plays
//! the same role, which is what the token-indexed frozen biases rely on.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tokens per example: operand, operator, operand, equals.
pub const SEQ_LEN: usize = 4;
/// Largest integer with its own token (19 * 19, the top multiplication answer).
pub const MAX_INT: usize = 361;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    DegenerateFraction(f64),
    #[error("unknown task '{0}' (expected sum, sum-small, or mult)")]
    UnknownTask(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadRecord {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Mul => "*",
        }
    }

    pub fn eval(self, a: u32, b: u32) -> u32 {
        match self {
            Op::Add => a + b,
            Op::Mul => a * b,
        }
    }
}

/// The benchmark tasks. `SumSmall` is the addition grid capped at 19,
/// sized to keep the full pipeline fast in CI-style runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Sum,
    SumSmall,
    Mult,
}

impl Task {
    pub fn op(self) -> Op {
        match self {
            Task::Sum | Task::SumSmall => Op::Add,
            Task::Mult => Op::Mul,
        }
    }

    pub fn max_operand(self) -> u32 {
        match self {
            Task::Sum => 99,
            Task::SumSmall | Task::Mult => 19,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sum => "sum",
            Task::SumSmall => "sum-small",
            Task::Mult => "mult",
        })
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "sum" => Ok(Task::Sum),
            "sum-small" => Ok(Task::SumSmall),
            "mult" => Ok(Task::Mult),
            other => Err(DataError::UnknownTask(other.to_string())),
        }
    }
}

/// Closed vocabulary shared by all tasks: one token per integer 0..=361,
/// the three operator/equals symbols, and a reserved pad slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = (0..=MAX_INT).map(|i| i.to_string()).collect();
        tokens.push("+".to_string());
        tokens.push("*".to_string());
        tokens.push("=".to_string());
        tokens.push("<pad>".to_string());
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<usize, DataError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }

    pub fn int_id(&self, value: u32) -> usize {
        debug_assert!(value as usize <= MAX_INT);
        value as usize
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Writes the id ↔ token table as TSV.
    pub fn export_tsv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        fs::write(path, out).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// One prompt: token ids laid out as `[a, op, b, =]` plus the answer token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
    pub a: u32,
    pub b: u32,
    pub op: Op,
}

impl Example {
    pub fn answer_pos(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub examples: Vec<Example>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn build_example(vocab: &Vocab, a: u32, b: u32, op: Op) -> Example {
    let tokens = vec![
        vocab.int_id(a),
        vocab.id(op.symbol()).expect("operator token"),
        vocab.int_id(b),
        vocab.id("=").expect("equals token"),
    ];
    Example {
        tokens,
        target: vocab.int_id(op.eval(a, b)),
        a,
        b,
        op,
    }
}

fn generate_grid(task: Task) -> Dataset {
    let vocab = Vocab::new();
    let top = task.max_operand();
    let op = task.op();
    let mut examples = Vec::with_capacity(((top + 1) * (top + 1)) as usize);
    for a in 0..=top {
        for b in 0..=top {
            examples.push(build_example(&vocab, a, b, op));
        }
    }
    Dataset {
        task,
        examples,
        vocab,
    }
}

/// All 10 000 ordered pairs of integers 0..=99 under addition.
pub fn gen_int_sum() -> Dataset {
    generate_grid(Task::Sum)
}

/// All 400 ordered pairs of integers 0..=19 under multiplication.
pub fn gen_int_mult() -> Dataset {
    generate_grid(Task::Mult)
}

/// Addition capped at operand 19: 400 examples, used as the fast default task.
pub fn gen_int_sum_small() -> Dataset {
    generate_grid(Task::SumSmall)
}

pub fn generate(task: Task) -> Dataset {
    generate_grid(task)
}

/// Deterministic shuffle-split into `floor(n·fraction)` train examples and
/// the rest as test. The same seed always produces the same membership.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::DegenerateFraction(train_fraction));
    }
    let n = d.examples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = (n as f64 * train_fraction).floor() as usize;
    let pick = |ids: &[usize]| Dataset {
        task: d.task,
        examples: ids.iter().map(|&i| d.examples[i].clone()).collect(),
        vocab: d.vocab.clone(),
    };
    Ok((pick(&idx[..k]), pick(&idx[k..])))
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    a: u32,
    op: String,
    b: u32,
    y: u32,
}

/// Writes one JSON record per line: `{"a":2,"op":"+","b":2,"y":4}`.
pub fn export_jsonl(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for e in &d.examples {
        let rec = Record {
            a: e.a,
            op: e.op.symbol().to_string(),
            b: e.b,
            y: e.op.eval(e.a, e.b),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Reads a JSONL export back into a dataset, validating each answer.
pub fn import_jsonl(path: &Path, task: Task) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let vocab = Vocab::new();
    let mut examples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let bad = |message: String| DataError::BadRecord {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let op = match rec.op.as_str() {
            "+" => Op::Add,
            "*" => Op::Mul,
            other => return Err(bad(format!("unknown operator '{other}'"))),
        };
        if op != task.op() {
            return Err(bad(format!("operator {} does not match task {task}", rec.op)));
        }
        if rec.y != op.eval(rec.a, rec.b) {
            return Err(bad(format!("answer {} != {} {} {}", rec.y, rec.a, rec.op, rec.b)));
        }
        examples.push(build_example(&vocab, rec.a, rec.b, op));
    }
    Ok(Dataset {
        task,
        examples,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn int_sum_covers_all_ordered_pairs_once() {
        let d = gen_int_sum();
        assert_eq!(d.len(), 10_000);
        let pairs: BTreeSet<(u32, u32)> = d.examples.iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(pairs.len(), 10_000);
    }

    #[test]
    fn int_mult_covers_all_ordered_pairs_once() {
        let d = gen_int_mult();
        assert_eq!(d.len(), 400);
        let pairs: BTreeSet<(u32, u32)> = d.examples.iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(pairs.len(), 400);
    }

    #[test]
    fn two_plus_two_targets_four() {
        let d = gen_int_sum();
        let e = d
            .examples
            .iter()
            .find(|e| e.a == 2 && e.b == 2)
            .unwrap();
        assert_eq!(d.vocab.token(e.target), "4");
        let zero = d
            .examples
            .iter()
            .find(|e| e.a == 0 && e.b == 0)
            .unwrap();
        assert_eq!(d.vocab.token(zero.target), "0");
    }

    #[test]
    fn mult_targets() {
        let d = gen_int_mult();
        let top = d
            .examples
            .iter()
            .find(|e| e.a == 19 && e.b == 19)
            .unwrap();
        assert_eq!(d.vocab.token(top.target), "361"); // 19 * 19
        let z = d.examples.iter().find(|e| e.a == 0 && e.b == 7).unwrap();
        assert_eq!(d.vocab.token(z.target), "0");
    }

    #[test]
    fn vocab_size_and_shared_symbols() {
        let v = Vocab::new();
        assert_eq!(v.len(), 366); // 362 integers + 3 symbols + pad
        assert_eq!(
            gen_int_sum().vocab.id("=").unwrap(),
            gen_int_mult().vocab.id("=").unwrap()
        );
    }

    #[test]
    fn layout_is_positionally_fixed() {
        for d in [gen_int_sum_small(), gen_int_mult()] {
            let plus_or_star = d.vocab.id(d.task.op().symbol()).unwrap();
            let equals = d.vocab.id("=").unwrap();
            for e in &d.examples {
                assert_eq!(e.tokens.len(), SEQ_LEN);
                assert_eq!(e.tokens[1], plus_or_star);
                assert_eq!(e.tokens[3], equals);
            }
        }
    }

    #[test]
    fn decode_roundtrip() {
        let d = gen_int_sum_small();
        for e in &d.examples {
            let text = d.vocab.decode(&e.tokens);
            assert_eq!(text[0].parse::<u32>().unwrap(), e.a);
            assert_eq!(text[1], e.op.symbol());
            assert_eq!(text[2].parse::<u32>().unwrap(), e.b);
            assert_eq!(text[3], "=");
            assert_eq!(
                d.vocab.token(e.target).parse::<u32>().unwrap(),
                e.op.eval(e.a, e.b)
            );
        }
    }

    #[test]
    fn split_sizes_match_paper_grids() {
        let (train, test) = split(&gen_int_sum(), 0.8, 0).unwrap();
        assert_eq!((train.len(), test.len()), (8000, 2000));
        let (train, test) = split(&gen_int_mult(), 0.8, 0).unwrap();
        assert_eq!((train.len(), test.len()), (320, 80));
    }

    #[test]
    fn split_is_deterministic_and_rejects_degenerate_fractions() {
        let d = gen_int_mult();
        let (a1, b1) = split(&d, 0.8, 42).unwrap();
        let (a2, b2) = split(&d, 0.8, 42).unwrap();
        assert_eq!(a1.examples, a2.examples);
        assert_eq!(b1.examples, b2.examples);
        assert!(split(&d, 0.0, 0).is_err());
        assert!(split(&d, 1.0, 0).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mult.jsonl");
        let d = gen_int_mult();
        export_jsonl(&d, &path).unwrap();
        let first = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert_eq!(first, r#"{"a":0,"op":"*","b":0,"y":0}"#);
        let back = import_jsonl(&path, Task::Mult).unwrap();
        assert_eq!(back.examples, d.examples);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_partitions_exactly(seed in 0u64..500, frac in 0.05f64..0.95) {
            let d = gen_int_mult();
            let (train, test) = split(&d, frac, seed).unwrap();
            prop_assert_eq!(train.len(), (400.0 * frac).floor() as usize);
            prop_assert_eq!(train.len() + test.len(), 400);
            let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
            for e in train.examples.iter().chain(&test.examples) {
                prop_assert!(seen.insert((e.a, e.b)), "duplicate example");
            }
            prop_assert_eq!(seen.len(), 400);
        }
    }
}
