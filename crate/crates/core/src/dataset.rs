//! Word-problem sequences drawn from the hard-token mixture, with
//! counter-based sampling so any `(seed, stream, position)` is reproducible.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    self, direct_product, make_alternating_group, make_reset_monoid, make_symmetric_group, prefix_products, AlgebraError, MonoidTable,
    ProductMonoid,
};

/// First stream index of held-out evaluation sets, far from any training stream.
pub const EVAL_STREAM_BASE: u64 = 1 << 62;

/// Default size of a held-out evaluation set.
pub const EVAL_SET_SIZE: usize = 10_000;

/// 32-bit words reserved per position in the generator's keystream.
const WORDS_PER_POSITION: u128 = 64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

/// Serializable name of a monoid, resolved to a table on demand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MonoidDescriptor {
    Symmetric {
        n: usize,
    },
    Alternating {
        n: usize,
    },
    Reset {
        r: usize,
    },
    Product {
        left: Box<MonoidDescriptor>,
        right: Box<MonoidDescriptor>,
    },
}

/// A resolved monoid: either a plain table or a product with a group factor.
#[derive(Clone, Debug)]
pub enum Monoid {
    Plain(MonoidTable),
    Product(ProductMonoid),
}

impl Monoid {
    pub fn table(&self) -> &MonoidTable {
        match self {
            Monoid::Plain(t) => t,
            Monoid::Product(p) => &p.flattened,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table().size
    }

    pub fn is_hard(&self, token: usize) -> bool {
        match self {
            Monoid::Plain(t) => token != t.identity,
            Monoid::Product(p) => !p.is_simple(token),
        }
    }
}

impl MonoidDescriptor {
    pub fn parity() -> Self {
        MonoidDescriptor::Symmetric { n: 2 }
    }

    /// Reset monoid with three resets times `A_5`.
    pub fn reset3_a5() -> Self {
        MonoidDescriptor::Product {
            left: Box::new(MonoidDescriptor::Reset { r: 3 }),
            right: Box::new(MonoidDescriptor::Alternating { n: 5 }),
        }
    }

    fn table(&self) -> Result<MonoidTable, AlgebraError> {
        match self {
            MonoidDescriptor::Symmetric { n } => make_symmetric_group(*n),
            MonoidDescriptor::Alternating { n } => make_alternating_group(*n),
            MonoidDescriptor::Reset { r } => make_reset_monoid(*r),
            MonoidDescriptor::Product { .. } => Ok(self.resolve()?.table().clone()),
        }
    }

    pub fn resolve(&self) -> Result<Monoid, AlgebraError> {
        match self {
            MonoidDescriptor::Product { left, right } => Ok(Monoid::Product(direct_product(&left.table()?, &right.table()?)?)),
            other => Ok(Monoid::Plain(other.table()?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub monoid: MonoidDescriptor,
    /// Probability that a token's group component is not the identity (product monoids only).
    pub p: f64,
    pub length: usize,
    pub seed: u64,
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(DatasetError::Invalid(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.length == 0 {
            return Err(DatasetError::Invalid("length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordProblemSample {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub hard_mask: Vec<bool>,
}

/// Samples sequences for one spec; owns the resolved monoid.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: DistributionSpec,
    monoid: Monoid,
}

impl Sampler {
    pub fn new(spec: DistributionSpec) -> Result<Self, DatasetError> {
        spec.validate()?;
        let monoid = spec.monoid.resolve()?;
        Ok(Self { spec, monoid })
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn monoid(&self) -> &Monoid {
        &self.monoid
    }

    pub fn vocab_size(&self) -> usize {
        self.monoid.vocab_size()
    }

    fn token(&self, rng: &mut ChaCha8Rng) -> usize {
        match &self.monoid {
            Monoid::Plain(t) => rng.random_range(0..t.size),
            Monoid::Product(p) => {
                let left = rng.random_range(0..p.left.size);
                let hard = rng.random::<f64>() < self.spec.p;
                let e = p.right.identity;
                let right = if hard && p.right.size > 1 {
                    let r = rng.random_range(0..p.right.size - 1);
                    if r >= e {
                        r + 1
                    } else {
                        r
                    }
                } else {
                    e
                };
                p.flat_index(left, right)
            }
        }
    }

    pub fn sample(&self, stream_index: u64) -> WordProblemSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream_index);
        let tokens: Vec<usize> = (0..self.spec.length)
            .map(|pos| {
                rng.set_word_pos(pos as u128 * WORDS_PER_POSITION);
                self.token(&mut rng)
            })
            .collect();
        let labels = prefix_products(self.monoid.table(), &tokens);
        let hard_mask = tokens.iter().map(|&t| self.monoid.is_hard(t)).collect();
        WordProblemSample { tokens, labels, hard_mask }
    }

    /// Batch `epoch_index` of size `batch_size`: streams `epoch·B .. (epoch+1)·B`.
    pub fn batch(&self, batch_size: usize, epoch_index: u64) -> Batch {
        let start = epoch_index * batch_size as u64;
        Batch::from_samples((0..batch_size as u64).map(|i| self.sample(start + i)).collect())
    }

    /// Held-out set of `n` sequences on the evaluation streams.
    pub fn eval_set(&self, n: usize) -> Batch {
        Batch::from_samples((0..n as u64).map(|i| self.sample(EVAL_STREAM_BASE + i)).collect())
    }
}

pub fn sample_word(spec: &DistributionSpec, stream_index: u64) -> Result<WordProblemSample, DatasetError> {
    Ok(Sampler::new(spec.clone())?.sample(stream_index))
}

pub fn make_batch(spec: &DistributionSpec, batch_size: usize, epoch_index: u64) -> Result<Batch, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::Invalid("batch size must be at least 1".into()));
    }
    Ok(Sampler::new(spec.clone())?.batch(batch_size, epoch_index))
}

/// Row-major `[batch, length]` tokens and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub length: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub hard_mask: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: Vec<WordProblemSample>) -> Self {
        let length = samples.first().map_or(0, |s| s.tokens.len());
        let mut b = Batch {
            batch: samples.len(),
            length,
            tokens: Vec::with_capacity(samples.len() * length),
            labels: Vec::with_capacity(samples.len() * length),
            hard_mask: Vec::with_capacity(samples.len() * length),
        };
        for s in samples {
            assert_eq!(s.tokens.len(), length, "ragged batch");
            b.tokens.extend(s.tokens);
            b.labels.extend(s.labels);
            b.hard_mask.extend(s.hard_mask);
        }
        b
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.batch, self.length)
    }

    /// Sequences `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let (a, b) = (start * self.length, end * self.length);
        Batch {
            batch: end - start,
            length: self.length,
            tokens: self.tokens[a..b].to_vec(),
            labels: self.labels[a..b].to_vec(),
            hard_mask: self.hard_mask[a..b].to_vec(),
        }
    }

    /// First `len` positions of every sequence.
    pub fn truncate(&self, len: usize) -> Batch {
        let take = |v: &[usize]| -> Vec<usize> { v.chunks(self.length).flat_map(|c| c[..len].iter().copied()).collect() };
        Batch {
            batch: self.batch,
            length: len,
            tokens: take(&self.tokens),
            labels: take(&self.labels),
            hard_mask: self.hard_mask.chunks(self.length).flat_map(|c| c[..len].iter().copied()).collect(),
        }
    }
}

/// Writes `n` samples from stream `start` as text: one header line with the
/// spec as JSON, then per sample `L` tokens followed by `L` labels.
pub fn export<W: Write>(sampler: &Sampler, start: u64, n: usize, mut out: W) -> Result<(), DatasetError> {
    writeln!(out, "{}", serde_json::to_string(sampler.spec()).expect("spec serializes"))?;
    for i in 0..n as u64 {
        let s = sampler.sample(start + i);
        let line: Vec<String> = s.tokens.iter().chain(&s.labels).map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a file written by [`export`], checking every label against the oracle.
pub fn import<R: BufRead>(input: R) -> Result<(DistributionSpec, Vec<WordProblemSample>), DatasetError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| DatasetError::Format("missing header".into()))??;
    let spec: DistributionSpec = serde_json::from_str(&header).map_err(|e| DatasetError::Format(format!("header: {e}")))?;
    let sampler = Sampler::new(spec.clone())?;
    let l = spec.length;
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| DatasetError::Format(format!("line {}: bad integer {v:?}", n + 2)))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 2 * l {
            return Err(DatasetError::Format(format!(
                "line {}: {} values, expected {}",
                n + 2,
                vals.len(),
                2 * l
            )));
        }
        let tokens = vals[..l].to_vec();
        if tokens.iter().any(|&t| t >= sampler.vocab_size()) {
            return Err(DatasetError::Format(format!("line {}: token out of vocabulary", n + 2)));
        }
        let labels = vals[l..].to_vec();
        if labels != algebra::prefix_products(sampler.monoid().table(), &tokens) {
            return Err(DatasetError::Format(format!("line {}: labels disagree with the oracle", n + 2)));
        }
        let hard_mask = tokens.iter().map(|&t| sampler.monoid().is_hard(t)).collect();
        samples.push(WordProblemSample { tokens, labels, hard_mask });
    }
    Ok((spec, samples))
}
