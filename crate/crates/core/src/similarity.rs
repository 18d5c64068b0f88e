//! The incremental client-similarity matrix and update-bias diagnostics.
//!
//! Similarities are `s(a, b) = 1 + cos(a, b)`, which lies in `[0, 2]`.
//! After each round, pairs involving a client whose update was just stored
//! are (re)computed against every other update in memory; all other
//! entries keep their previous value and freshness round.

use crate::error::{FlicError, Result};
use crate::federation::UpdateMemory;
use crate::params::ParamVector;

const ZERO_NORM: f64 = 1e-12;

/// `1 + cos(a, b)`; `1` (neutral) when either vector has norm below `1e-12`.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlicError::Shape { what: "similarity operand", expected: a.len(), actual: b.len() });
    }
    let (aa, bb) = (a.dot(a)?, b.dot(b)?);
    if aa.sqrt() < ZERO_NORM || bb.sqrt() < ZERO_NORM {
        return Ok(1.0);
    }
    // sqrt(aa · aa) == aa, so identical and opposite vectors give exactly 2 and 0
    let denom = match (aa * bb).sqrt() {
        d if d.is_finite() => d,
        _ => aa.sqrt() * bb.sqrt(),
    };
    let cos = a.dot(b)? / denom;
    Ok((1.0 + cos).clamp(0.0, 2.0))
}

/// Symmetric `K × K` similarity matrix with per-entry freshness.
///
/// `values` has a zero diagonal; the similarity of each stored update with
/// itself is kept separately in `self_similarity` for graph construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    k: usize,
    values: Vec<f64>,
    entry_round: Vec<i64>,
    self_similarity: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, values: vec![0.0; k * k], entry_round: vec![-1; k * k], self_similarity: vec![0.0; k] }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    /// Round at which `(i, j)` was last computed, `-1` if never.
    pub fn entry_round(&self, i: usize, j: usize) -> i64 {
        self.entry_round[i * self.k + j]
    }

    pub fn self_similarity(&self, i: usize) -> f64 {
        self.self_similarity[i]
    }

    /// Clients with at least one computed entry (or a stored self-similarity).
    pub fn observed(&self, i: usize) -> bool {
        self.self_similarity[i] > 0.0 || (0..self.k).any(|j| self.entry_round(i, j) >= 0)
    }

    fn set(&mut self, i: usize, j: usize, value: f64, round: i64) {
        let k = self.k;
        self.values[i * k + j] = value;
        self.values[j * k + i] = value;
        self.entry_round[i * k + j] = round;
        self.entry_round[j * k + i] = round;
    }

    /// Recomputes every entry incident to a newly stored client.
    ///
    /// Returns the number of pairwise similarity evaluations performed,
    /// which is at most `|newly_stored| · |memory|`.
    pub fn ingest_round(&mut self, memory: &UpdateMemory, newly_stored: &[usize], round: usize) -> Result<usize> {
        let mut evaluations = 0;
        for &i in newly_stored {
            if i >= self.k {
                return Err(FlicError::Precondition(format!("client {i} outside a {0}x{0} matrix", self.k)));
            }
            let Some(rec_i) = memory.get(&i) else {
                return Err(FlicError::Precondition(format!("client {i} has no stored update")));
            };
            self.self_similarity[i] = cosine_similarity(&rec_i.delta, &rec_i.delta)?;
            for (&j, rec_j) in memory {
                if j == i || (j < i && newly_stored.contains(&j)) {
                    continue;
                }
                let s = cosine_similarity(&rec_i.delta, &rec_j.delta)?;
                self.set(i, j, s, round as i64);
                evaluations += 1;
            }
        }
        Ok(evaluations)
    }

    /// All-pairs matrix from one set of updates (every client sent at `round`).
    pub fn from_updates(k: usize, updates: &[(usize, ParamVector)], round: usize) -> Result<Self> {
        let mut m = Self::new(k);
        for (a, (i, di)) in updates.iter().enumerate() {
            m.self_similarity[*i] = cosine_similarity(di, di)?;
            for (j, dj) in &updates[a + 1..] {
                m.set(*i, *j, cosine_similarity(di, dj)?, round as i64);
            }
        }
        Ok(m)
    }

    /// `K` lines of `K` comma-separated values, six significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.k * self.k * 8);
        for i in 0..self.k {
            for j in 0..self.k {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format_significant(self.get(i, j), 6));
            }
            out.push('\n');
        }
        out
    }
}

/// `printf("%.{digits}g")`-style formatting.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Global models `w_0, w_1, …` indexed by round.
#[derive(Debug, Clone, Default)]
pub struct GlobalHistory {
    params: Vec<ParamVector>,
}

impl GlobalHistory {
    pub fn new(w0: ParamVector) -> Self {
        Self { params: vec![w0] }
    }

    pub fn push(&mut self, w: ParamVector) {
        self.params.push(w);
    }

    pub fn get(&self, round: usize) -> Option<&ParamVector> {
        self.params.get(round)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Distances comparing a cross-round pair `(δ_t^i, δ_τ^j)` with the
/// same-round pair `(δ_t^i, δ_t^j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasDiagnostics {
    pub round_i: usize,
    pub round_j: usize,
    /// `‖δ_t^i − δ_τ^j‖_p`
    pub cross_round: f64,
    /// `‖δ_t^i − δ_t^j‖_p`
    pub same_round: f64,
    /// `‖w_{t−1} − w_{τ−1}‖_p`
    pub global_drift: f64,
    /// `‖w_τ^j − w_t^j‖_p`
    pub local_drift: f64,
}

impl BiasDiagnostics {
    /// `cross − same ≤ global_drift + local_drift`, up to rounding.
    pub fn bound_holds(&self) -> bool {
        let scale = self.cross_round + self.same_round + self.global_drift + self.local_drift;
        self.cross_round - self.same_round <= self.global_drift + self.local_drift + 1e-12 * scale.max(1.0)
    }
}

/// Bias terms for clients `i` and `j` as currently held in `memory`.
///
/// `t` and `τ` are the origin rounds of `i`'s and `j`'s stored updates.
/// `retrained_j` is the update client `j` produces when it trains from
/// `w_{t−1}`, which the caller obtains from a re-evaluation pass.
pub fn bias_diagnostics(
    memory: &UpdateMemory,
    history: &GlobalHistory,
    i: usize,
    j: usize,
    retrained_j: &ParamVector,
    p: f64,
) -> Result<BiasDiagnostics> {
    let unavailable = |what: String| FlicError::DiagnosticUnavailable(what);
    let rec_i = memory.get(&i).ok_or_else(|| unavailable(format!("client {i} not in memory")))?;
    let rec_j = memory.get(&j).ok_or_else(|| unavailable(format!("client {j} not in memory")))?;
    let (t, tau) = (rec_i.origin_round, rec_j.origin_round);
    let global = |r: usize| {
        r.checked_sub(1)
            .and_then(|r| history.get(r))
            .ok_or_else(|| unavailable(format!("global model before round {r} not archived")))
    };
    let (w_t_prev, w_tau_prev) = (global(t)?, global(tau)?);

    // w_t^j = w_{t−1} − δ_t^j and w_τ^j = w_{τ−1} − δ_τ^j
    let local_t = w_t_prev.sub(retrained_j)?;
    let local_tau = w_tau_prev.sub(&rec_j.delta)?;

    Ok(BiasDiagnostics {
        round_i: t,
        round_j: tau,
        cross_round: rec_i.delta.sub(&rec_j.delta)?.p_norm(p),
        same_round: rec_i.delta.sub(retrained_j)?.p_norm(p),
        global_drift: w_t_prev.sub(w_tau_prev)?.p_norm(p),
        local_drift: local_tau.sub(&local_t)?.p_norm(p),
    })
}
