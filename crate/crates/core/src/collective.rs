//! Collective behaviors over a shared correction-budget pool.
//!
//! Budget amounts are held internally as integer nano-units so that every
//! transfer conserves the total exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorKind;
use crate::identity::ContractStatus;

/// Nano-units per budget unit.
pub const SCALE: f64 = 1e9;

pub fn to_units(x: f64) -> i64 {
    (x * SCALE).round() as i64
}

pub fn from_units(u: i64) -> f64 {
    u as f64 / SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SocialBehavior {
    Neutral,
    Individualistic,
    Cooperative,
}

impl SocialBehavior {
    pub fn as_str(self) -> &'static str {
        match self {
            SocialBehavior::Neutral => "neutral",
            SocialBehavior::Individualistic => "individualistic",
            SocialBehavior::Cooperative => "cooperative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum SocialAction {
    Join,
    Leave,
    Grab { amount: f64 },
    Assist { target: usize, amount: f64 },
}

impl SocialAction {
    pub fn name(&self) -> &'static str {
        match self {
            SocialAction::Join => "join",
            SocialAction::Leave => "leave",
            SocialAction::Grab { .. } => "grab",
            SocialAction::Assist { .. } => "assist",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("node {0} is already a member")]
    AlreadyMember(usize),
    #[error("node {0} is not a member")]
    NotMember(usize),
    #[error("amount must be positive and finite, got {0}")]
    Amount(f64),
    #[error("node {0} cannot assist itself")]
    SelfAssist(usize),
    #[error("requested {requested} but only {available} is available")]
    Insufficient { requested: f64, available: f64 },
}

/// Shared correction budget. Reserve is whatever the members do not hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePool {
    total: i64,
    join_share: i64,
    allocations: BTreeMap<usize, i64>,
    /// Current need per member; allocation above need is slack.
    needs: BTreeMap<usize, i64>,
    /// `debts[(debtor, creditor)]`: assistance received and not yet returned.
    debts: BTreeMap<(usize, usize), i64>,
}

impl ResourcePool {
    /// `join_share` is granted from the reserve (as far as it goes) on Join.
    pub fn new(total: f64, join_share: f64) -> Self {
        ResourcePool {
            total: to_units(total).max(0),
            join_share: to_units(join_share).max(0),
            allocations: BTreeMap::new(),
            needs: BTreeMap::new(),
            debts: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> f64 {
        from_units(self.total)
    }

    pub fn total_units(&self) -> i64 {
        self.total
    }

    pub fn reserve_units(&self) -> i64 {
        self.total - self.allocations.values().sum::<i64>()
    }

    pub fn reserve(&self) -> f64 {
        from_units(self.reserve_units())
    }

    pub fn is_member(&self, node: usize) -> bool {
        self.allocations.contains_key(&node)
    }

    pub fn members(&self) -> BTreeSet<usize> {
        self.allocations.keys().copied().collect()
    }

    pub fn allocation(&self, node: usize) -> f64 {
        from_units(self.allocation_units(node))
    }

    pub fn allocation_units(&self, node: usize) -> i64 {
        self.allocations.get(&node).copied().unwrap_or(0)
    }

    pub fn allocations_units(&self) -> &BTreeMap<usize, i64> {
        &self.allocations
    }

    /// Declares how much of its allocation a member currently needs.
    pub fn set_need(&mut self, node: usize, need: f64) {
        if self.is_member(node) {
            self.needs.insert(node, to_units(need.max(0.0)));
        }
    }

    pub fn slack_units(&self, node: usize) -> i64 {
        let need = self.needs.get(&node).copied().unwrap_or(0);
        (self.allocation_units(node) - need).max(0)
    }

    /// Outstanding assistance `debtor` received from `creditor`.
    pub fn debt(&self, debtor: usize, creditor: usize) -> f64 {
        from_units(self.debts.get(&(debtor, creditor)).copied().unwrap_or(0))
    }

    /// Largest feasible Grab for `actor`: reserve plus everyone else's slack.
    pub fn max_grab_units(&self, actor: usize) -> i64 {
        self.reserve_units()
            + self
                .allocations
                .keys()
                .filter(|&&m| m != actor)
                .map(|&m| self.slack_units(m))
                .sum::<i64>()
    }

    pub fn max_grab(&self, actor: usize) -> f64 {
        from_units(self.max_grab_units(actor))
    }

    /// Applies `action` on behalf of `actor`. On error the pool is untouched.
    pub fn apply(&mut self, actor: usize, action: &SocialAction) -> Result<(), PoolError> {
        match *action {
            SocialAction::Join => {
                if self.is_member(actor) {
                    return Err(PoolError::AlreadyMember(actor));
                }
                let grant = self.join_share.min(self.reserve_units());
                self.allocations.insert(actor, grant);
                Ok(())
            }
            SocialAction::Leave => {
                if self.allocations.remove(&actor).is_none() {
                    return Err(PoolError::NotMember(actor));
                }
                self.needs.remove(&actor);
                Ok(())
            }
            SocialAction::Grab { amount } => {
                if !self.is_member(actor) {
                    return Err(PoolError::NotMember(actor));
                }
                let want = positive_units(amount)?;
                let available = self.max_grab_units(actor);
                if want > available {
                    return Err(PoolError::Insufficient {
                        requested: amount,
                        available: from_units(available),
                    });
                }
                let from_reserve = want.min(self.reserve_units());
                let rest = want - from_reserve;
                let donors: Vec<(usize, i64)> = self
                    .allocations
                    .keys()
                    .filter(|&&m| m != actor)
                    .map(|&m| (m, self.slack_units(m)))
                    .filter(|&(_, s)| s > 0)
                    .collect();
                let weights: Vec<i64> = donors.iter().map(|&(_, s)| s).collect();
                let cuts = proportional_split(rest, &weights);
                for ((m, _), cut) in donors.iter().zip(cuts) {
                    *self.allocations.get_mut(m).expect("donor is a member") -= cut;
                }
                *self.allocations.get_mut(&actor).expect("actor is a member") += want;
                Ok(())
            }
            SocialAction::Assist { target, amount } => {
                if target == actor {
                    return Err(PoolError::SelfAssist(actor));
                }
                if !self.is_member(actor) {
                    return Err(PoolError::NotMember(actor));
                }
                if !self.is_member(target) {
                    return Err(PoolError::NotMember(target));
                }
                let give = positive_units(amount)?;
                let held = self.allocation_units(actor);
                if give > held {
                    return Err(PoolError::Insufficient {
                        requested: amount,
                        available: from_units(held),
                    });
                }
                *self.allocations.get_mut(&actor).expect("member") -= give;
                *self.allocations.get_mut(&target).expect("member") += give;
                // Repaying first cancels what the actor owed the target.
                let owed = self.debts.remove(&(actor, target)).unwrap_or(0);
                let repaid = owed.min(give);
                if owed > repaid {
                    self.debts.insert((actor, target), owed - repaid);
                }
                if give > repaid {
                    *self.debts.entry((target, actor)).or_insert(0) += give - repaid;
                }
                Ok(())
            }
        }
    }

    /// Lists every broken pool invariant; empty when the pool is sound.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let held: i64 = self.allocations.values().sum();
        if held > self.total {
            out.push(format!("allocations {held} exceed total {}", self.total));
        }
        for (m, a) in &self.allocations {
            if *a < 0 {
                out.push(format!("node {m} holds negative allocation {a}"));
            }
        }
        if self.reserve_units() + held != self.total {
            out.push("reserve plus allocations differs from total".into());
        }
        out
    }
}

fn positive_units(amount: f64) -> Result<i64, PoolError> {
    if !(amount.is_finite() && amount > 0.0) {
        return Err(PoolError::Amount(amount));
    }
    let u = to_units(amount);
    if u <= 0 {
        return Err(PoolError::Amount(amount));
    }
    Ok(u)
}

/// Splits `amount` over `weights` proportionally using largest remainders;
/// leftover units go to the largest remainders, ties to the lowest index.
/// The parts always sum to `amount` and never exceed their weight when
/// `amount <= sum(weights)`.
pub fn proportional_split(amount: i64, weights: &[i64]) -> Vec<i64> {
    let sum: i128 = weights.iter().map(|&w| w.max(0) as i128).sum();
    if weights.is_empty() || sum == 0 || amount <= 0 {
        return vec![0; weights.len()];
    }
    let mut parts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = amount as i128 * w.max(0) as i128;
        parts.push((num / sum) as i64);
        rems.push((num % sum, i));
    }
    let mut left = amount - parts.iter().sum::<i64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rems {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SocialConfig {
    /// Ticks of uninterrupted Holding before a Neutral member leaves.
    pub calm_window: usize,
    pub assist_quantum: f64,
    /// Preference multiplier for neighbors the actor owes assistance to.
    pub reciprocity_weight: f64,
    /// A Cooperative node assists only while its own utilization is below this.
    pub assist_below: f64,
}

impl Default for SocialConfig {
    fn default() -> Self {
        SocialConfig {
            calm_window: 50,
            assist_quantum: 0.1,
            reciprocity_weight: 2.0,
            assist_below: 0.5,
        }
    }
}

/// What a node knows about itself when deciding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeView {
    pub id: usize,
    pub status: ContractStatus,
    pub utilization: f64,
    /// Consecutive Holding ticks up to now.
    pub holding_streak: usize,
}

pub fn decide_social_action(
    me: &NodeView,
    neighbors: &[NodeView],
    behavior: SocialBehavior,
    pool: &ResourcePool,
    config: &SocialConfig,
) -> Option<SocialAction> {
    let member = pool.is_member(me.id);
    let distressed = !me.status.is_holding();
    match behavior {
        SocialBehavior::Neutral => {
            if !member && distressed {
                Some(SocialAction::Join)
            } else if member && me.holding_streak >= config.calm_window {
                Some(SocialAction::Leave)
            } else {
                None
            }
        }
        SocialBehavior::Individualistic => {
            if !member {
                return Some(SocialAction::Join);
            }
            if !distressed {
                return None;
            }
            let max = pool.max_grab_units(me.id);
            (max > 0).then(|| SocialAction::Grab { amount: from_units(max) })
        }
        SocialBehavior::Cooperative => {
            if !member {
                return Some(SocialAction::Join);
            }
            if !(me.utilization < config.assist_below) {
                return None;
            }
            let held = pool.allocation_units(me.id);
            if held <= 0 {
                return None;
            }
            let mut best: Option<(f64, usize)> = None;
            for n in neighbors {
                if n.id == me.id || n.status.is_holding() || !pool.is_member(n.id) {
                    continue;
                }
                let weight = if pool.debt(me.id, n.id) > 0.0 {
                    config.reciprocity_weight
                } else {
                    1.0
                };
                let score = n.utilization * weight;
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, n.id));
                }
            }
            let (_, target) = best?;
            let amount = to_units(config.assist_quantum).min(held);
            (amount > 0).then(|| SocialAction::Assist {
                target,
                amount: from_units(amount),
            })
        }
    }
}

/// Normalized Shannon entropy of (behavior, social) variant pairs over a
/// declared variant space of `space` combinations.
pub fn diversity_score(population: &[(BehaviorKind, SocialBehavior)], space: usize) -> f64 {
    if population.is_empty() || space < 2 {
        return 0.0;
    }
    let mut counts: BTreeMap<(BehaviorKind, SocialBehavior), usize> = BTreeMap::new();
    for p in population {
        *counts.entry(*p).or_insert(0) += 1;
    }
    let n = population.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    (h / (space as f64).ln()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: usize, status: ContractStatus, utilization: f64) -> NodeView {
        NodeView {
            id,
            status,
            utilization,
            holding_streak: 0,
        }
    }

    #[test]
    fn join_leave_roundtrip() {
        let start = ResourcePool::new(5.0, 1.0);
        let mut p = start.clone();
        p.apply(0, &SocialAction::Join).unwrap();
        assert_eq!(p.allocation(0), 1.0);
        p.apply(0, &SocialAction::Leave).unwrap();
        assert_eq!(p, start);
    }

    #[test]
    fn grab_splits_slack_proportionally() {
        let mut p = ResourcePool::new(4.0, 0.0);
        for m in 0..4 {
            p.apply(m, &SocialAction::Join).unwrap();
        }
        // Hand out 2, 1, 1 to nodes 1..=3 by letting them grab the reserve.
        p.apply(1, &SocialAction::Grab { amount: 2.0 }).unwrap();
        p.apply(2, &SocialAction::Grab { amount: 1.0 }).unwrap();
        p.apply(3, &SocialAction::Grab { amount: 1.0 }).unwrap();
        assert_eq!(p.reserve_units(), 0);
        p.apply(0, &SocialAction::Grab { amount: 1.0 }).unwrap();
        assert_eq!(p.allocation(1), 1.5);
        assert_eq!(p.allocation(2), 0.75);
        assert_eq!(p.allocation(3), 0.75);
        assert_eq!(p.allocation(0), 1.0);
        assert!(p.violations().is_empty());
    }

    #[test]
    fn rejected_action_is_atomic() {
        let mut p = ResourcePool::new(1.0, 0.5);
        p.apply(0, &SocialAction::Join).unwrap();
        let before = p.clone();
        assert!(p.apply(0, &SocialAction::Grab { amount: 0.6 }).is_err());
        assert!(p.apply(0, &SocialAction::Join).is_err());
        assert!(p.apply(0, &SocialAction::Assist { target: 1, amount: 0.1 }).is_err());
        assert!(p.apply(0, &SocialAction::Assist { target: 0, amount: 0.1 }).is_err());
        assert!(p.apply(1, &SocialAction::Leave).is_err());
        assert!(p.apply(0, &SocialAction::Grab { amount: -1.0 }).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn assist_records_and_repays_debt() {
        let mut p = ResourcePool::new(2.0, 1.0);
        p.apply(0, &SocialAction::Join).unwrap();
        p.apply(1, &SocialAction::Join).unwrap();
        p.apply(0, &SocialAction::Assist { target: 1, amount: 0.25 }).unwrap();
        assert_eq!(p.debt(1, 0), 0.25);
        p.apply(1, &SocialAction::Assist { target: 0, amount: 0.25 }).unwrap();
        assert_eq!(p.debt(1, 0), 0.0);
        assert_eq!(p.debt(0, 1), 0.0);
        assert_eq!(p.allocation(0), 1.0);
    }

    #[test]
    fn split_is_exact() {
        assert_eq!(proportional_split(10, &[1, 1, 1]), vec![4, 3, 3]);
        assert_eq!(proportional_split(0, &[1, 2]), vec![0, 0]);
        assert_eq!(proportional_split(3, &[0, 0]), vec![0, 0]);
    }

    #[test]
    fn neutral_rules() {
        let mut p = ResourcePool::new(1.0, 0.1);
        let cfg = SocialConfig::default();
        let calm = NodeView {
            holding_streak: cfg.calm_window,
            ..view(0, ContractStatus::Holding, 0.1)
        };
        assert_eq!(decide_social_action(&calm, &[], SocialBehavior::Neutral, &p, &cfg), None);
        let hurt = view(0, ContractStatus::AtRisk, 0.9);
        assert_eq!(
            decide_social_action(&hurt, &[], SocialBehavior::Neutral, &p, &cfg),
            Some(SocialAction::Join)
        );
        p.apply(0, &SocialAction::Join).unwrap();
        assert_eq!(
            decide_social_action(&calm, &[], SocialBehavior::Neutral, &p, &cfg),
            Some(SocialAction::Leave)
        );
    }

    #[test]
    fn individualist_grabs_everything_free() {
        let mut p = ResourcePool::new(1.0, 0.0);
        p.apply(0, &SocialAction::Join).unwrap();
        let me = view(0, ContractStatus::AtRisk, 0.9);
        let cfg = SocialConfig::default();
        assert_eq!(
            decide_social_action(&me, &[], SocialBehavior::Individualistic, &p, &cfg),
            Some(SocialAction::Grab { amount: 1.0 })
        );
    }

    #[test]
    fn cooperator_assists_worst_neighbor() {
        let mut p = ResourcePool::new(3.0, 1.0);
        for m in 0..3 {
            p.apply(m, &SocialAction::Join).unwrap();
        }
        let cfg = SocialConfig::default();
        let me = view(0, ContractStatus::Holding, 1.0 / 3.0);
        let others = [
            view(1, ContractStatus::AtRisk, 0.85),
            view(2, ContractStatus::Violated, 1.4),
        ];
        assert_eq!(
            decide_social_action(&me, &others, SocialBehavior::Cooperative, &p, &cfg),
            Some(SocialAction::Assist {
                target: 2,
                amount: cfg.assist_quantum
            })
        );
        // Owing node 1 tips the choice under the reciprocity weight.
        p.apply(1, &SocialAction::Assist { target: 0, amount: 0.5 }).unwrap();
        assert_eq!(
            decide_social_action(&me, &others, SocialBehavior::Cooperative, &p, &cfg),
            Some(SocialAction::Assist {
                target: 1,
                amount: cfg.assist_quantum
            })
        );
        let busy = view(0, ContractStatus::Holding, 0.6);
        assert_eq!(decide_social_action(&busy, &others, SocialBehavior::Cooperative, &p, &cfg), None);
    }

    #[test]
    fn entropy_examples() {
        use BehaviorKind::*;
        use SocialBehavior::*;
        let mono = vec![(Reactive, Neutral); 5];
        assert_eq!(diversity_score(&mono, 6), 0.0);
        let half = vec![(Reactive, Neutral), (Passive, Neutral)];
        assert!((diversity_score(&half, 2) - 1.0).abs() < 1e-15);
    }
}
