//! Relevance scores, in-batch negatives, and the two training objectives.
//!
//! Batch score matrices are `B x B` with entry `(i, j)` holding the score of
//! sentence `j` against image `i`. Row `i` therefore lists the positive pair
//! `(i, i)` and every pairing of image `i` with another sentence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Margin hinge over cosine scores.
    Hinge,
    /// Batch-softmax cross-entropy over dot-product scores.
    #[serde(rename = "xent")]
    CrossEntropy,
}

impl LossKind {
    pub fn score_kind(self) -> ScoreKind {
        match self {
            LossKind::Hinge => ScoreKind::Cosine,
            LossKind::CrossEntropy => ScoreKind::Dot,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "xent" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Usage(format!("unknown loss {other:?}, expected hinge|xent"))),
        }
    }
}

pub fn score_dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "score_dot",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

pub fn score_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let dot = score_dot(u, v)?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn score(kind: ScoreKind, u: &[f64], v: &[f64]) -> Result<f64> {
    match kind {
        ScoreKind::Cosine => score_cosine(u, v),
        ScoreKind::Dot => score_dot(u, v),
    }
}

/// Row-wise scores of paired `P x H` nodes, as `P x 1`.
pub fn pair_scores(tape: &mut Tape, u: Var, v: Var, kind: ScoreKind) -> Result<Var> {
    let prod = tape.mul(u, v)?;
    let dot = tape.sum_rows(prod);
    match kind {
        ScoreKind::Dot => Ok(dot),
        ScoreKind::Cosine => {
            let uu = tape.mul(u, u)?;
            let uu = tape.sum_rows(uu);
            let vv = tape.mul(v, v)?;
            let vv = tape.sum_rows(vv);
            if tape.value(uu).data().iter().chain(tape.value(vv).data()).any(|&x| x == 0.0) {
                return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
            }
            let nu = tape.sqrt(uu)?;
            let nv = tape.sqrt(vv)?;
            let denom = tape.mul(nu, nv)?;
            tape.div(dot, denom)
        }
    }
}

/// B aligned positive pairs; negatives are implied by the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    /// Dataset indices of the positive pairs.
    pub items: Vec<usize>,
    /// Image id of each positive pair.
    pub image_ids: Vec<String>,
}

impl TrainingBatch {
    pub fn new(items: Vec<usize>, image_ids: Vec<String>) -> Result<Self> {
        if items.len() != image_ids.len() {
            return Err(Error::Contract("batch items and image ids differ in length".into()));
        }
        Ok(Self { items, image_ids })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images_unique(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.image_ids.iter().all(|id| seen.insert(id))
    }

    /// `J(i)`: sentences whose image differs from image `i`.
    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.image_ids[j] != self.image_ids[i])
            .collect()
    }

    pub fn negative_count(&self) -> usize {
        (0..self.len()).map(|i| self.negatives(i).len()).sum()
    }

    /// `B x B` indicator of `j ∈ J(i)`.
    pub fn negative_mask(&self) -> NegativeMask {
        let b = self.len();
        let mut mask = vec![0.0; b * b];
        for i in 0..b {
            for j in self.negatives(i) {
                mask[i * b + j] = 1.0;
            }
        }
        NegativeMask { size: b, mask }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeMask {
    size: usize,
    mask: Vec<f64>,
}

impl NegativeMask {
    /// Every off-diagonal pairing is a negative.
    pub fn all_pairs(size: usize) -> Self {
        let mask = (0..size * size)
            .map(|k| if k / size == k % size { 0.0 } else { 1.0 })
            .collect();
        Self { size, mask }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.size + j] != 0.0
    }

    fn check(&self, tape: &Tape, scores: Var) -> Result<()> {
        let s = tape.value(scores);
        if s.shape() != [self.size, self.size] {
            return Err(Error::Shape {
                op: "batch loss",
                left: s.shape().to_vec(),
                right: vec![self.size, self.size],
            });
        }
        for i in 0..self.size {
            if !(0..self.size).any(|j| self.is_negative(i, j)) {
                return Err(Error::Contract(format!("positive {i} has no negatives")));
            }
        }
        if !s.is_finite() {
            return Err(Error::Numeric("non-finite score in batch".into()));
        }
        Ok(())
    }
}

fn diagonal(tape: &mut Tape, scores: Var, b: usize) -> Result<Var> {
    let picked = tape.mask_mul(scores, Tensor::identity(b).into_data())?;
    Ok(tape.sum_rows(picked))
}

/// Σ_i Σ_{j∈J(i)} max(m − s(i,i) + s(i,j), 0).
pub fn hinge_loss(tape: &mut Tape, scores: Var, negatives: &NegativeMask, margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(Error::Param(format!("margin must be positive, got {margin}")));
    }
    negatives.check(tape, scores)?;
    let b = negatives.size;
    let diag = diagonal(tape, scores, b)?;
    let ones = tape.constant(Tensor::filled(&[1, b], 1.0));
    let positive = tape.matmul(diag, ones)?;
    let gap = tape.sub(scores, positive)?;
    let shifted = tape.add_scalar(gap, margin);
    let violations = tape.relu(shifted);
    let counted = tape.mask_mul(violations, negatives.mask.clone())?;
    Ok(tape.sum(counted))
}

/// −Σ_i log softmax over `{i} ∪ J(i)` of row `i`, max-shifted per row.
pub fn cross_entropy_loss(tape: &mut Tape, scores: Var, negatives: &NegativeMask) -> Result<Var> {
    negatives.check(tape, scores)?;
    let b = negatives.size;
    let include: Vec<f64> = (0..b * b)
        .map(|k| if k / b == k % b { 1.0 } else { negatives.mask[k] })
        .collect();

    let s = tape.value(scores);
    let row_max: Vec<f64> = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&j| include[i * b + j] != 0.0)
                .map(|j| s.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let max_matrix: Vec<f64> = (0..b * b).map(|k| row_max[k / b]).collect();
    let max_col = tape.constant(Tensor::matrix(b, 1, row_max)?);
    let max_full = tape.constant(Tensor::matrix(b, b, max_matrix)?);

    let shifted = tape.sub(scores, max_full)?;
    // Zero the excluded entries before exp so they cannot overflow.
    let shifted = tape.mask_mul(shifted, include.clone())?;
    let exps = tape.exp(shifted);
    let exps = tape.mask_mul(exps, include)?;
    let z = tape.sum_rows(exps);
    let log_z = tape.log(z)?;
    let lse = tape.add(log_z, max_col)?;
    let diag = diagonal(tape, scores, b)?;
    let nll = tape.sub(lse, diag)?;
    let loss = tape.sum(nll);
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric("cross-entropy loss is not finite".into()));
    }
    Ok(loss)
}

/// `exp(s_pos) / (exp(s_pos) + Σ_j exp(s_j))` over `row[positive]` and
/// `row[j]` for `j` in `negatives`.
pub fn batch_softmax(row: &[f64], positive: usize, negatives: &[usize]) -> Result<f64> {
    if positive >= row.len() || negatives.iter().any(|&j| j >= row.len()) {
        return Err(Error::Contract("score index out of range".into()));
    }
    if let Some(bad) = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|j| row[j])
        .find(|x| !x.is_finite())
    {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    let max = negatives
        .iter()
        .map(|&j| row[j])
        .fold(row[positive], f64::max);
    let z: f64 = (row[positive] - max).exp()
        + negatives.iter().map(|&j| (row[j] - max).exp()).sum::<f64>();
    Ok((row[positive] - max).exp() / z)
}
