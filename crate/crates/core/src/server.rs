//! Server-side aggregation: uniform averaging, FedAvgM, FedAdam, SCAFFOLD's
//! control update, and attention-weighted aggregation of client deltas.
//!
//! Every reduction runs over clients in ascending id order regardless of the
//! order updates arrive in, so results are bit-reproducible and exactly
//! permutation invariant.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{combine, dot_unchecked, mean, softmax_stable, ParamVector};
use crate::scalar::Scalar;

/// Deltas reported by the sampled clients in one round, with each client's
/// previously stored delta (zero if it never participated).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundUpdates<T> {
    client_ids: Vec<usize>,
    current: Vec<ParamVector<T>>,
    previous: Vec<ParamVector<T>>,
    // Positions of the entries in ascending client-id order.
    order: Vec<usize>,
}

impl<T: Scalar> RoundUpdates<T> {
    pub fn new(
        client_ids: Vec<usize>,
        current: Vec<ParamVector<T>>,
        previous: Vec<ParamVector<T>>,
    ) -> Result<Self> {
        if client_ids.is_empty() {
            return Err(Error::Empty("round updates"));
        }
        if current.len() != client_ids.len() || previous.len() != client_ids.len() {
            return Err(Error::DimensionMismatch {
                left: client_ids.len(),
                right: current.len().min(previous.len()),
            });
        }
        let len = current[0].len();
        if len == 0 {
            return Err(Error::Empty("parameter vector"));
        }
        for v in current.iter().chain(&previous) {
            if v.len() != len {
                return Err(Error::DimensionMismatch {
                    left: len,
                    right: v.len(),
                });
            }
        }
        let mut order: Vec<usize> = (0..client_ids.len()).collect();
        order.sort_by_key(|&p| client_ids[p]);
        if order.windows(2).any(|w| client_ids[w[0]] == client_ids[w[1]]) {
            return Err(invalid("client_ids", "duplicate client id"));
        }
        Ok(Self {
            client_ids,
            current,
            previous,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.client_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.current[0].len()
    }

    pub fn client_ids(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn current(&self) -> &[ParamVector<T>] {
        &self.current
    }

    pub fn previous(&self) -> &[ParamVector<T>] {
        &self.previous
    }

    fn sorted_current(&self) -> Vec<&ParamVector<T>> {
        self.order.iter().map(|&p| &self.current[p]).collect()
    }

    fn sorted_previous(&self) -> Vec<&ParamVector<T>> {
        self.order.iter().map(|&p| &self.previous[p]).collect()
    }

    /// Uniform mean of the current deltas.
    pub fn mean_delta(&self) -> ParamVector<T> {
        mean(&self.sorted_current()).expect("validated on construction")
    }
}

/// Global model plus every buffer any aggregation rule keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState<T> {
    pub params: ParamVector<T>,
    /// Step applied in the most recent round; zero before the first.
    pub prev_global_delta: ParamVector<T>,
    pub momentum: ParamVector<T>,
    pub adam_m: ParamVector<T>,
    pub adam_v: ParamVector<T>,
    /// SCAFFOLD server control variate.
    pub control: ParamVector<T>,
    pub round: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(params: ParamVector<T>) -> Self {
        let n = params.len();
        Self {
            params,
            prev_global_delta: ParamVector::zeros(n),
            momentum: ParamVector::zeros(n),
            adam_m: ParamVector::zeros(n),
            adam_v: ParamVector::zeros(n),
            control: ParamVector::zeros(n),
            round: 0,
        }
    }

    fn check(&self, updates: &RoundUpdates<T>) -> Result<()> {
        if updates.dim() != self.params.len() {
            return Err(Error::DimensionMismatch {
                left: updates.dim(),
                right: self.params.len(),
            });
        }
        Ok(())
    }

    fn applied(&self, step: ParamVector<T>) -> Self {
        let mut next = self.clone();
        next.params.add_assign(&step);
        next.prev_global_delta = step;
        next.round += 1;
        next
    }
}

/// `w <- w + mean(deltas)`.
pub fn average_aggregate<T: Scalar>(state: &ServerState<T>, updates: &RoundUpdates<T>) -> Result<ServerState<T>> {
    state.check(updates)?;
    Ok(state.applied(updates.mean_delta()))
}

/// Server momentum: `v <- beta * v + mean(deltas)`, `w <- w + v`.
pub fn fedavgm_aggregate<T: Scalar>(
    state: &ServerState<T>,
    updates: &RoundUpdates<T>,
    beta: T,
) -> Result<ServerState<T>> {
    state.check(updates)?;
    if !(beta >= T::zero() && beta < T::one()) {
        return Err(invalid("beta", "must lie in [0, 1)"));
    }
    let mut v = state.momentum.scaled(beta);
    v.add_assign(&updates.mean_delta());
    let mut next = state.applied(v.clone());
    next.momentum = v;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams<T> {
    pub beta1: T,
    pub beta2: T,
    pub tau: T,
    pub server_lr: T,
}

/// Adaptive server step without bias correction:
/// `m <- b1 m + (1 - b1) d`, `v <- b2 v + (1 - b2) d^2`,
/// `w <- w + lr * m / (sqrt(v) + tau)`.
pub fn fedadam_aggregate<T: Scalar>(
    state: &ServerState<T>,
    updates: &RoundUpdates<T>,
    p: AdamParams<T>,
) -> Result<ServerState<T>> {
    state.check(updates)?;
    let unit = |b: T| b >= T::zero() && b < T::one();
    if !unit(p.beta1) {
        return Err(invalid("beta1", "must lie in [0, 1)"));
    }
    if !unit(p.beta2) {
        return Err(invalid("beta2", "must lie in [0, 1)"));
    }
    if !(p.tau > T::zero()) {
        return Err(invalid("tau", "must be > 0"));
    }
    if !(p.server_lr > T::zero()) {
        return Err(invalid("server_lr", "must be > 0"));
    }
    let d = updates.mean_delta();
    let one = T::one();
    let m = ParamVector::from_vec(
        state
            .adam_m
            .iter()
            .zip(d.iter())
            .map(|(&m, &g)| p.beta1 * m + (one - p.beta1) * g)
            .collect(),
    );
    let v = ParamVector::from_vec(
        state
            .adam_v
            .iter()
            .zip(d.iter())
            .map(|(&v, &g)| p.beta2 * v + (one - p.beta2) * g * g)
            .collect(),
    );
    let step = ParamVector::from_vec(
        m.iter()
            .zip(v.iter())
            .map(|(&m, &v)| p.server_lr * m / (v.sqrt() + p.tau))
            .collect(),
    );
    let mut next = state.applied(step);
    next.adam_m = m;
    next.adam_v = v;
    Ok(next)
}

/// SCAFFOLD server update: `w <- w + mean(deltas)` and
/// `c <- c + (|S| / P) * mean(control deltas)`.
pub fn scaffold_aggregate<T: Scalar>(
    state: &ServerState<T>,
    updates: &RoundUpdates<T>,
    control_deltas: &[ParamVector<T>],
    total_clients: usize,
) -> Result<ServerState<T>> {
    state.check(updates)?;
    if control_deltas.len() != updates.len() {
        return Err(Error::DimensionMismatch {
            left: control_deltas.len(),
            right: updates.len(),
        });
    }
    if total_clients < updates.len() {
        return Err(invalid("total_clients", "fewer clients than updates"));
    }
    let sorted: Vec<&ParamVector<T>> = updates.order.iter().map(|&p| &control_deltas[p]).collect();
    let mut next = state.applied(updates.mean_delta());
    let frac = T::of_usize(updates.len()) / T::of_usize(total_clients);
    next.control.axpy(frac, &mean(&sorted)?);
    Ok(next)
}

/// Which query each client's attention row uses. Keys and values are always
/// the current deltas and the similarity is the plain dot product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionOption {
    /// Query is the client's own current delta.
    #[serde(rename = "self")]
    SelfAttention,
    /// One shared query: the mean of the current deltas.
    Global,
    /// Client `j` is scored by how well its current delta agrees with its own
    /// previous delta. Scores do not depend on the row.
    Time,
}

impl AttentionOption {
    pub fn name(self) -> &'static str {
        match self {
            Self::SelfAttention => "self",
            Self::Global => "global",
            Self::Time => "time",
        }
    }

    pub fn rows_identical(self) -> bool {
        !matches!(self, Self::SelfAttention)
    }
}

impl std::str::FromStr for AttentionOption {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "self" => Ok(Self::SelfAttention),
            "global" => Ok(Self::Global),
            "time" => Ok(Self::Time),
            other => Err(format!("unknown attention option `{other}` (self|global|time)")),
        }
    }
}

/// Row-stochastic attention matrix over the sampled clients, rows and
/// columns in the order of the [`RoundUpdates`] it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores<T> {
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> AttentionScores<T> {
    /// Every entry `1 / n`.
    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::of_usize(n);
        Self {
            rows: vec![vec![w; n]; n],
        }
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows_identical(&self) -> bool {
        self.rows.windows(2).all(|w| w[0] == w[1])
    }

    /// Largest deviation of a row sum from 1, and whether every entry is
    /// non-negative.
    pub fn simplex_error(&self) -> (T, bool) {
        let mut worst = T::zero();
        let mut nonneg = true;
        for r in &self.rows {
            let s: T = r.iter().copied().sum();
            worst = worst.max((s - T::one()).abs());
            nonneg &= r.iter().all(|&a| a >= T::zero());
        }
        (worst, nonneg)
    }
}

fn softmax_rows<T: Scalar>(raw: Vec<Vec<T>>) -> Result<Vec<Vec<T>>> {
    raw.iter().map(|r| softmax_stable(r)).collect()
}

/// Attention scores in ascending-id order.
fn sorted_scores<T: Scalar>(updates: &RoundUpdates<T>, option: AttentionOption) -> Result<Vec<Vec<T>>> {
    let cur = updates.sorted_current();
    let n = cur.len();
    let shared = |scores: Vec<T>| -> Result<Vec<Vec<T>>> {
        let row = softmax_stable(&scores)?;
        Ok(vec![row; n])
    };
    match option {
        AttentionOption::SelfAttention => softmax_rows(
            cur.iter()
                .map(|qi| {
                    cur.iter()
                        .map(|kj| dot_unchecked(qi.as_slice(), kj.as_slice()))
                        .collect()
                })
                .collect(),
        ),
        AttentionOption::Global => {
            let q = updates.mean_delta();
            shared(
                cur.iter()
                    .map(|kj| dot_unchecked(q.as_slice(), kj.as_slice()))
                    .collect(),
            )
        }
        AttentionOption::Time => {
            let prev = updates.sorted_previous();
            shared(
                prev.iter()
                    .zip(&cur)
                    .map(|(pj, kj)| dot_unchecked(pj.as_slice(), kj.as_slice()))
                    .collect(),
            )
        }
    }
}

/// Softmax-normalized dot-product similarities between each client's query
/// and every client's current delta.
pub fn attention_scores<T: Scalar>(
    updates: &RoundUpdates<T>,
    option: AttentionOption,
) -> Result<AttentionScores<T>> {
    let sorted = sorted_scores(updates, option)?;
    let n = updates.len();
    let mut rank = vec![0; n];
    for (r, &p) in updates.order.iter().enumerate() {
        rank[p] = r;
    }
    let rows = (0..n)
        .map(|a| (0..n).map(|b| sorted[rank[a]][rank[b]]).collect())
        .collect();
    Ok(AttentionScores { rows })
}

/// Reweighted deltas `sum_j a_ij * delta_j`, one per client, in input order.
pub fn reweighted_deltas<T: Scalar>(
    updates: &RoundUpdates<T>,
    scores: &AttentionScores<T>,
) -> Result<Vec<ParamVector<T>>> {
    if scores.len() != updates.len() {
        return Err(Error::DimensionMismatch {
            left: scores.len(),
            right: updates.len(),
        });
    }
    let cur = updates.sorted_current();
    let mut out = vec![ParamVector::zeros(0); updates.len()];
    for &p in &updates.order {
        let coeffs: Vec<T> = updates.order.iter().map(|&q| scores.row(p)[q]).collect();
        out[p] = combine(&coeffs, &cur)?;
    }
    Ok(out)
}

/// Applies `w <- w + mean_i(sum_j a_ij * delta_j)` for a given score matrix.
/// When all rows are identical the step is computed directly as
/// `sum_j a_j * delta_j`.
pub fn aggregate_with_scores<T: Scalar>(
    state: &ServerState<T>,
    updates: &RoundUpdates<T>,
    scores: &AttentionScores<T>,
) -> Result<ServerState<T>> {
    state.check(updates)?;
    let step = if scores.rows_identical() {
        let first = updates.order[0];
        let coeffs: Vec<T> = updates.order.iter().map(|&q| scores.row(first)[q]).collect();
        combine(&coeffs, &updates.sorted_current())?
    } else {
        let hat = reweighted_deltas(updates, scores)?;
        let sorted: Vec<&ParamVector<T>> = updates.order.iter().map(|&p| &hat[p]).collect();
        mean(&sorted)?
    };
    Ok(state.applied(step))
}

/// Attention-based aggregation with the given query option.
pub fn igfl_server_aggregate<T: Scalar>(
    state: &ServerState<T>,
    updates: &RoundUpdates<T>,
    option: AttentionOption,
) -> Result<(ServerState<T>, AttentionScores<T>)> {
    let scores = attention_scores(updates, option)?;
    let next = aggregate_with_scores(state, updates, &scores)?;
    Ok((next, scores))
}
