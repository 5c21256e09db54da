//! Linear-chain CRF over a small label alphabet.
//!
//! Transitions are an `(L + 2, L + 2)` matrix: rows/columns `0..L` are real
//! labels, `L` is the virtual start state and `L + 1` the virtual stop state.
//! Only `start -> label`, `label -> label` and `label -> stop` entries are ever
//! read; the start column and stop row stay inert.

mod oracle;

pub use oracle::{brute_force_oracle, OracleResult, ORACLE_PATH_LIMIT};

use crate::autodiff::kernels::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label alphabet of a tagging head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagSchema {
    /// `O`, `B`, `I` for one attribute at a time.
    PerAttribute,
    /// `O` plus `B-a`, `I-a` for each of `attributes` attributes.
    Joint { attributes: usize },
}

pub const O: usize = 0;
pub const B: usize = 1;
pub const I: usize = 2;

impl TagSchema {
    pub fn labels(self) -> usize {
        match self {
            TagSchema::PerAttribute => 3,
            TagSchema::Joint { attributes } => 2 * attributes + 1,
        }
    }

    pub fn begin(self, attribute: usize) -> usize {
        match self {
            TagSchema::PerAttribute => B,
            TagSchema::Joint { .. } => 1 + 2 * attribute,
        }
    }

    pub fn inside(self, attribute: usize) -> usize {
        match self {
            TagSchema::PerAttribute => I,
            TagSchema::Joint { .. } => 2 + 2 * attribute,
        }
    }
}

/// A decoded label path.
#[derive(Clone, Debug, PartialEq)]
pub struct TagSequence {
    /// The attribute this path tags in per-attribute mode; `None` in joint mode.
    pub attribute: Option<usize>,
    pub labels: Vec<usize>,
    pub score: f64,
}

struct Dims {
    len: usize,
    labels: usize,
    start: usize,
    stop: usize,
}

fn check(emissions: &Tensor, transitions: &Tensor) -> Result<Dims> {
    let len = emissions.rows();
    let labels = emissions.cols();
    if len == 0 || emissions.is_empty() {
        return Err(Error::contract("CRF needs at least one position"));
    }
    if transitions.rows() != labels + 2 || transitions.cols() != labels + 2 {
        return Err(Error::dim(
            "crf",
            format!("{labels} labels need ({0},{0}) transitions, got {1:?}", labels + 2, transitions.shape()),
        ));
    }
    Ok(Dims { len, labels, start: labels, stop: labels + 1 })
}

fn check_gold(d: &Dims, gold: &[usize]) -> Result<()> {
    if gold.len() != d.len {
        return Err(Error::contract(format!("gold length {} for {} positions", gold.len(), d.len)));
    }
    if let Some(bad) = gold.iter().find(|&&y| y >= d.labels) {
        return Err(Error::contract(format!("gold label {bad} outside 0..{}", d.labels)));
    }
    Ok(())
}

/// Unnormalized score of one label path.
pub fn path_score(emissions: &Tensor, transitions: &Tensor, path: &[usize]) -> Result<f64> {
    let d = check(emissions, transitions)?;
    check_gold(&d, path)?;
    let mut s = transitions.get(d.start, path[0]) + emissions.get(0, path[0]);
    for t in 1..d.len {
        s += transitions.get(path[t - 1], path[t]);
        s += emissions.get(t, path[t]);
    }
    Ok(s + transitions.get(path[d.len - 1], d.stop))
}

/// Forward log-messages `alpha[t][j]`.
fn forward(e: &Tensor, tr: &Tensor, d: &Dims) -> Vec<Vec<f64>> {
    let mut alpha = vec![vec![0.0; d.labels]; d.len];
    for j in 0..d.labels {
        alpha[0][j] = tr.get(d.start, j) + e.get(0, j);
    }
    let mut buf = vec![0.0; d.labels];
    for t in 1..d.len {
        for j in 0..d.labels {
            for i in 0..d.labels {
                buf[i] = alpha[t - 1][i] + tr.get(i, j);
            }
            alpha[t][j] = log_sum_exp(&buf) + e.get(t, j);
        }
    }
    alpha
}

fn backward(e: &Tensor, tr: &Tensor, d: &Dims) -> Vec<Vec<f64>> {
    let mut beta = vec![vec![0.0; d.labels]; d.len];
    for i in 0..d.labels {
        beta[d.len - 1][i] = tr.get(i, d.stop);
    }
    let mut buf = vec![0.0; d.labels];
    for t in (0..d.len - 1).rev() {
        for i in 0..d.labels {
            for j in 0..d.labels {
                buf[j] = tr.get(i, j) + e.get(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf);
        }
    }
    beta
}

fn log_z_from(alpha: &[Vec<f64>], tr: &Tensor, d: &Dims) -> f64 {
    let last: Vec<f64> = (0..d.labels).map(|j| alpha[d.len - 1][j] + tr.get(j, d.stop)).collect();
    log_sum_exp(&last)
}

/// Log partition function by the forward algorithm.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let d = check(emissions, transitions)?;
    let alpha = forward(emissions, transitions, &d);
    Ok(log_z_from(&alpha, transitions, &d))
}

/// `log p(gold | emissions) = score(gold) - log Z`.
pub fn log_likelihood(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> Result<f64> {
    let d = check(emissions, transitions)?;
    check_gold(&d, gold)?;
    let alpha = forward(emissions, transitions, &d);
    let log_z = log_z_from(&alpha, transitions, &d);
    Ok(path_score(emissions, transitions, gold)? - log_z)
}

/// Gradient of [`log_likelihood`] with respect to emissions and transitions:
/// gold indicator counts minus posterior marginals.
pub fn log_likelihood_grad(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> Result<(Tensor, Tensor)> {
    let d = check(emissions, transitions)?;
    check_gold(&d, gold)?;
    let (e, tr) = (emissions, transitions);
    let alpha = forward(e, tr, &d);
    let beta = backward(e, tr, &d);
    let log_z = log_z_from(&alpha, tr, &d);
    let n = d.labels + 2;

    let mut de = Tensor::zeros(d.len, d.labels);
    let mut dt = Tensor::zeros(n, n);
    {
        let de = de.data_mut();
        for t in 0..d.len {
            for j in 0..d.labels {
                de[t * d.labels + j] = -(alpha[t][j] + beta[t][j] - log_z).exp();
            }
            de[t * d.labels + gold[t]] += 1.0;
        }
    }
    {
        let dt = dt.data_mut();
        for j in 0..d.labels {
            dt[d.start * n + j] -= (tr.get(d.start, j) + e.get(0, j) + beta[0][j] - log_z).exp();
            dt[j * n + d.stop] -= (alpha[d.len - 1][j] + tr.get(j, d.stop) - log_z).exp();
        }
        for t in 1..d.len {
            for i in 0..d.labels {
                for j in 0..d.labels {
                    let lp = alpha[t - 1][i] + tr.get(i, j) + e.get(t, j) + beta[t][j] - log_z;
                    dt[i * n + j] -= lp.exp();
                }
            }
        }
        dt[d.start * n + gold[0]] += 1.0;
        dt[gold[d.len - 1] * n + d.stop] += 1.0;
        for t in 1..d.len {
            dt[gold[t - 1] * n + gold[t]] += 1.0;
        }
    }
    Ok((de, dt))
}

/// Highest-scoring path. Ties go to the lowest label index at every
/// backtracking step.
pub fn viterbi_decode(emissions: &Tensor, transitions: &Tensor) -> Result<TagSequence> {
    let d = check(emissions, transitions)?;
    let (e, tr) = (emissions, transitions);
    let mut delta: Vec<f64> = (0..d.labels).map(|j| tr.get(d.start, j) + e.get(0, j)).collect();
    let mut back = vec![vec![0usize; d.labels]; d.len];
    let mut next = vec![0.0; d.labels];
    for t in 1..d.len {
        for j in 0..d.labels {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..d.labels {
                let s = delta[i] + tr.get(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + e.get(t, j);
            back[t][j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for j in 0..d.labels {
        let s = delta[j] + tr.get(j, d.stop);
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut labels = vec![0; d.len];
    labels[d.len - 1] = last;
    for t in (1..d.len).rev() {
        labels[t - 1] = back[t][labels[t]];
    }
    Ok(TagSequence { attribute: None, labels, score: best })
}
