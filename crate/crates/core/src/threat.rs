//! Model-poisoning attacks applied to client updates before the server sees them.

use std::collections::BTreeSet;

use crate::error::{FlicError, Result};
use crate::model::ClientUpdate;
use crate::params::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub enum AttackKind {
    /// Attackers send the negation of their honest update.
    MinusGrad,
    /// The lowest-id sampled attacker forces the weighted-mean aggregate
    /// update to equal `target`; other sampled attackers behave honestly.
    Omniscient { target: ParamVector },
}

/// A fixed set of malicious clients for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreatModel {
    attackers: BTreeSet<usize>,
    kind: AttackKind,
}

impl ThreatModel {
    pub fn new(attackers: impl IntoIterator<Item = usize>, kind: AttackKind, clients: usize) -> Result<Self> {
        let attackers: BTreeSet<usize> = attackers.into_iter().collect();
        if let Some(&bad) = attackers.iter().find(|&&a| a >= clients) {
            return Err(FlicError::config(format!("attacker id {bad} is outside the {clients} clients")));
        }
        Ok(Self { attackers, kind })
    }

    pub fn attackers(&self) -> &BTreeSet<usize> {
        &self.attackers
    }

    pub fn is_attacker(&self, client: usize) -> bool {
        self.attackers.contains(&client)
    }

    pub fn kind(&self) -> &AttackKind {
        &self.kind
    }

    /// Replaces attackers' updates in a cohort (ascending client ids).
    /// Honest clients pass through untouched.
    pub fn intercept(&self, cohort: &mut [(usize, ClientUpdate)]) -> Result<()> {
        match &self.kind {
            AttackKind::MinusGrad => {
                for (k, update) in cohort.iter_mut() {
                    if self.is_attacker(*k) {
                        update.delta = apply_minus_grad(&update.delta);
                    }
                }
            }
            AttackKind::Omniscient { target } => {
                let Some(pos) = cohort.iter().position(|(k, _)| self.is_attacker(*k)) else {
                    return Ok(());
                };
                let others: Vec<(ParamVector, usize)> = cohort
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != pos)
                    .map(|(_, (_, u))| (u.delta.clone(), u.num_samples))
                    .collect();
                let own_n = cohort[pos].1.num_samples;
                cohort[pos].1.delta = craft_omniscient_update(target, &others, own_n)?;
            }
        }
        Ok(())
    }
}

pub fn apply_minus_grad(honest: &ParamVector) -> ParamVector {
    honest.scaled(-1.0)
}

/// `δ_k = U/λ_k − Σ_{i≠k} (λ_i/λ_k) δ_i`, so that the cohort's weighted-mean
/// update `Σ λ δ` equals `target`.
pub fn craft_omniscient_update(
    target: &ParamVector,
    others: &[(ParamVector, usize)],
    own_n: usize,
) -> Result<ParamVector> {
    let total = own_n + others.iter().map(|(_, n)| n).sum::<usize>();
    if own_n == 0 || total == 0 {
        return Err(FlicError::config("omniscient attacker needs a non-zero sample weight"));
    }
    let own_weight = own_n as f64 / total as f64;
    let mut delta = target.scaled(1.0 / own_weight);
    for (d, n) in others {
        let weight = *n as f64 / total as f64;
        delta.axpy(-weight / own_weight, d)?;
    }
    Ok(delta)
}
