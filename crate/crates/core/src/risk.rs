//! Discrete conditional value at risk and its nested composition over a tree.
//!
//! `alpha` is the tail mass: `alpha = 1` is the expectation and `alpha -> 0`
//! approaches the worst case. In the `CVaR_{1-alpha}` notation a planner
//! configured with `alpha = 0.9` optimizes `CVaR_{0.1}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tree::ScenarioTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    #[default]
    Expectation,
    Cvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RiskFields")]
pub struct RiskSpec {
    pub kind: RiskKind,
    #[serde(default = "unit_alpha")]
    pub alpha: f64,
}

/// Unchecked form; deserialization rejects out-of-range levels.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskFields {
    kind: RiskKind,
    #[serde(default = "unit_alpha")]
    alpha: f64,
}

impl TryFrom<RiskFields> for RiskSpec {
    type Error = Error;

    fn try_from(f: RiskFields) -> Result<Self> {
        check_alpha(f.alpha)?;
        Ok(Self {
            kind: f.kind,
            alpha: f.alpha,
        })
    }
}

fn unit_alpha() -> f64 {
    1.0
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            kind: RiskKind::Expectation,
            alpha: 1.0,
        }
    }
}

impl RiskSpec {
    pub fn cvar(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            kind: RiskKind::Cvar,
            alpha,
        })
    }

    /// Tail mass actually used; expectation behaves as `alpha = 1`.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            RiskKind::Expectation => 1.0,
            RiskKind::Cvar => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    outcomes: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(outcomes: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if outcomes.len() != probs.len() || outcomes.is_empty() {
            return invalid("outcomes and probabilities must be non-empty and equally long");
        }
        if outcomes.iter().any(|x| !x.is_finite()) {
            return invalid("outcomes must be finite");
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return invalid("probabilities must be non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self { outcomes, probs })
    }

    pub fn uniform(outcomes: Vec<f64>) -> Result<Self> {
        let n = outcomes.len();
        Self::new(outcomes, vec![1.0 / n as f64; n])
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn expectation(&self) -> f64 {
        self.outcomes.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }
}

/// Result of the sorted-tail CVaR evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarSolution {
    pub value: f64,
    /// Worst-case distribution attaining the value.
    pub q: Vec<f64>,
    /// Value at risk: the outcome where the tail mass is exhausted.
    pub var: f64,
}

/// Closed-form CVaR: fill the worst outcomes with mass `p_i / alpha` until
/// the unit mass is spent.
pub fn cvar(dist: &DiscreteDistribution, alpha: f64) -> Result<f64> {
    Ok(cvar_solution(dist, alpha)?.value)
}

pub fn cvar_solution(dist: &DiscreteDistribution, alpha: f64) -> Result<CvarSolution> {
    check_alpha(alpha)?;
    let n = dist.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist.outcomes[b].total_cmp(&dist.outcomes[a]));
    let mut q = vec![0.0; n];
    let mut remaining = 1.0_f64;
    let mut var = dist.outcomes[order[0]];
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = (dist.probs[i] / alpha).min(remaining);
        if take > 0.0 {
            q[i] = take;
            remaining -= take;
            var = dist.outcomes[i];
        }
    }
    let value = q.iter().zip(&dist.outcomes).map(|(q, x)| q * x).sum();
    Ok(CvarSolution { value, q, var })
}

/// Largest support handled by [`cvar_dual_oracle`].
pub const ORACLE_MAX_OUTCOMES: usize = 12;

/// Maximizes `E_q[xi]` over `{q >= 0, sum q = 1, q <= p / alpha}` by
/// enumerating every vertex of that polytope.
///
/// A vertex has all but at most one coordinate at a bound; the free
/// coordinate is fixed by the unit-mass equality. Independent of the sorted
/// closed form in [`cvar`].
pub fn cvar_dual_oracle(dist: &DiscreteDistribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = dist.len();
    if n > ORACLE_MAX_OUTCOMES {
        return Err(Error::Unsupported(format!(
            "vertex enumeration supports at most {ORACLE_MAX_OUTCOMES} outcomes, got {n}"
        )));
    }
    let upper: Vec<f64> = dist.probs.iter().map(|p| p / alpha).collect();
    let tol = 1e-12;
    let mut best = f64::NEG_INFINITY;
    for free in 0..n {
        for mask in 0u32..(1 << (n - 1)) {
            let mut q = vec![0.0; n];
            let mut bit = 0;
            for i in 0..n {
                if i == free {
                    continue;
                }
                if mask & (1 << bit) != 0 {
                    q[i] = upper[i];
                }
                bit += 1;
            }
            let rest: f64 = q.iter().sum();
            let qf = 1.0 - rest;
            if qf < -tol || qf > upper[free] + tol {
                continue;
            }
            q[free] = qf.clamp(0.0, upper[free]);
            let value: f64 = q.iter().zip(&dist.outcomes).map(|(q, x)| q * x).sum();
            best = best.max(value);
        }
    }
    Ok(best)
}

/// Nested risk over a scenario tree.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedRisk {
    /// `J_0 + rho_0`.
    pub total: f64,
    /// Risk of the subtree cost below each branch; zero at leaves.
    pub rho: Vec<f64>,
    /// Worst-case conditional probability of each branch (1 at the root).
    pub worst_q: Vec<f64>,
    /// Value at risk at each non-leaf branch (0 at leaves).
    pub var: Vec<f64>,
}

/// `rho_i = CVaR over children of (J_child + rho_child)`, using the
/// conditional probabilities stored in the tree.
pub fn nested_risk(tree: &ScenarioTree, branch_costs: &[f64], alpha: f64) -> Result<NestedRisk> {
    check_alpha(alpha)?;
    if branch_costs.len() != tree.len() {
        return invalid("one cost per branch is required");
    }
    if branch_costs.iter().any(|c| !c.is_finite()) {
        return invalid("branch costs must be finite");
    }
    let n = tree.len();
    let mut rho = vec![0.0; n];
    let mut worst_q = vec![0.0; n];
    let mut var = vec![0.0; n];
    worst_q[0] = 1.0;
    for b in tree.branches.iter().rev() {
        if b.is_leaf() {
            continue;
        }
        let outcomes: Vec<f64> = b.children.iter().map(|&c| branch_costs[c] + rho[c]).collect();
        let mut probs: Vec<f64> = b.children.iter().map(|&c| tree.branches[c].cond_prob).collect();
        // renormalize rounding drift from the softmax
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let sol = cvar_solution(&DiscreteDistribution::new(outcomes, probs)?, alpha)?;
        rho[b.id] = sol.value;
        var[b.id] = sol.var;
        for (k, &c) in b.children.iter().enumerate() {
            worst_q[c] = sol.q[k];
        }
    }
    Ok(NestedRisk {
        total: branch_costs[0] + rho[0],
        rho,
        worst_q,
        var,
    })
}

/// Sensitivity of the nested risk to each branch's conditional probability.
///
/// At a node with value at risk `v` the local derivative is
/// `[J_c + rho_c - v]_+ / alpha`; it is scaled by the worst-case mass of
/// reaching the node. Only differences across siblings matter, since the
/// probabilities of a sibling set always sum to one.
pub fn nested_risk_sensitivity(
    tree: &ScenarioTree,
    branch_costs: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    let nested = nested_risk(tree, branch_costs, alpha)?;
    let n = tree.len();
    let mut reach = vec![0.0; n];
    reach[0] = 1.0;
    let mut sens = vec![0.0; n];
    for b in &tree.branches {
        for &c in &b.children {
            reach[c] = reach[b.id] * nested.worst_q[c];
            let excess = (branch_costs[c] + nested.rho[c] - nested.var[b.id]).max(0.0);
            sens[c] = reach[b.id] * excess / alpha;
        }
    }
    Ok(sens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution {
        let outcomes: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += drift;
        DiscreteDistribution::new(outcomes, probs).unwrap()
    }

    #[test]
    fn worked_examples() {
        let d = DiscreteDistribution::uniform(vec![1., 2., 3., 4.]).unwrap();
        assert!((cvar(&d, 0.5).unwrap() - 3.5).abs() < 1e-15);
        assert!((cvar_dual_oracle(&d, 0.5).unwrap() - 3.5).abs() < 1e-15);
        assert!((cvar(&d, 1.0).unwrap() - 2.5).abs() < 1e-15);
        assert!((cvar(&d, 0.25).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_distributions() {
        let single = DiscreteDistribution::new(vec![7.5], vec![1.0]).unwrap();
        let twin = DiscreteDistribution::uniform(vec![-2.0, -2.0]).unwrap();
        for alpha in [0.05, 0.3, 1.0] {
            assert_eq!(cvar_dual_oracle(&single, alpha).unwrap(), 7.5);
            assert_eq!(cvar(&single, alpha).unwrap(), 7.5);
            assert!((cvar_dual_oracle(&twin, alpha).unwrap() + 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(DiscreteDistribution::new(vec![1.0, 2.0], vec![0.6, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0], vec![-0.0, 1.0]).is_err());
        let d = DiscreteDistribution::uniform(vec![1.0, 2.0]).unwrap();
        assert!(cvar(&d, 0.0).is_err());
        assert!(cvar(&d, 1.5).is_err());
        let big = DiscreteDistribution::uniform(vec![0.0; 13]).unwrap();
        assert!(matches!(cvar_dual_oracle(&big, 0.5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn closed_form_agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let d = random_dist(&mut rng, n);
            let alpha = rng.random_range(1..=10) as f64 / 10.0;
            let a = cvar(&d, alpha).unwrap();
            let b = cvar_dual_oracle(&d, alpha).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn coherence_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let n = rng.random_range(1..=8);
            let d = random_dist(&mut rng, n);
            let alpha = rng.random_range(0.01..1.0);
            let base = cvar(&d, alpha).unwrap();
            let shift = rng.random_range(-5.0..5.0);
            let shifted = DiscreteDistribution::new(
                d.outcomes().iter().map(|x| x + shift).collect(),
                d.probs().to_vec(),
            )
            .unwrap();
            assert!((cvar(&shifted, alpha).unwrap() - base - shift).abs() < 1e-10);
            let t = rng.random_range(0.1..10.0);
            let scaled = DiscreteDistribution::new(
                d.outcomes().iter().map(|x| x * t).collect(),
                d.probs().to_vec(),
            )
            .unwrap();
            assert!((cvar(&scaled, alpha).unwrap() - t * base).abs() < 1e-9 * t.max(1.0));
            let larger = DiscreteDistribution::new(
                d.outcomes().iter().map(|x| x + rng.random_range(0.0..1.0)).collect(),
                d.probs().to_vec(),
            )
            .unwrap();
            assert!(cvar(&larger, alpha).unwrap() >= base - 1e-12);
            let other = DiscreteDistribution::new(
                d.outcomes().iter().map(|_| rng.random_range(-10.0..10.0)).collect(),
                d.probs().to_vec(),
            )
            .unwrap();
            let lam = rng.random_range(0.0..1.0);
            let mix = DiscreteDistribution::new(
                d.outcomes()
                    .iter()
                    .zip(other.outcomes())
                    .map(|(a, b)| lam * a + (1.0 - lam) * b)
                    .collect(),
                d.probs().to_vec(),
            )
            .unwrap();
            assert!(
                cvar(&mix, alpha).unwrap()
                    <= lam * base + (1.0 - lam) * cvar(&other, alpha).unwrap() + 1e-10
            );
            let max = d.outcomes().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(d.expectation() <= base + 1e-10 && base <= max + 1e-10);
            let looser = cvar(&d, (alpha + 0.1).min(1.0)).unwrap();
            assert!(looser <= base + 1e-10);
        }
    }

    #[test]
    fn nested_two_children_example() {
        let mut tree = ScenarioTree::build_topology(2, 1, 1, 0.1).unwrap();
        tree.branches[1].cond_prob = 0.5;
        tree.branches[2].cond_prob = 0.5;
        let r = nested_risk(&tree, &[0.0, 0.0, 1.0], 0.5).unwrap();
        assert!((r.rho[0] - 1.0).abs() < 1e-15);
    }

    fn fig2_tree(rng: &mut ChaCha8Rng) -> ScenarioTree {
        let mut tree = ScenarioTree::build_topology(2, 3, 2, 0.1).unwrap();
        for parent in [0usize, 1, 2] {
            let p = rng.random_range(0.05..0.95);
            let kids = tree.branches[parent].children.clone();
            tree.branches[kids[0]].cond_prob = p;
            tree.branches[kids[1]].cond_prob = 1.0 - p;
        }
        for id in 1..tree.len() {
            let parent = tree.branches[id].parent.unwrap();
            tree.branches[id].weight = tree.branches[parent].weight * tree.branches[id].cond_prob;
        }
        tree
    }

    #[test]
    fn nested_expectation_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let tree = fig2_tree(&mut rng);
            let costs: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..50.0)).collect();
            let expected: f64 = tree.branches.iter().map(|b| b.weight * costs[b.id]).sum();
            let r = nested_risk(&tree, &costs, 1.0).unwrap();
            assert!((r.total - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn nested_constant_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tree = fig2_tree(&mut rng);
        for alpha in [0.1, 0.5, 1.0] {
            let r = nested_risk(&tree, &[2.5; 7], alpha).unwrap();
            assert!((r.total - 3.0 * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sensitivity_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let tree = fig2_tree(&mut rng);
            let costs: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..50.0)).collect();
            let alpha = rng.random_range(0.2..1.0);
            let sens = nested_risk_sensitivity(&tree, &costs, alpha).unwrap();
            // move probability mass between the two children of each node
            for parent in [0usize, 1, 2] {
                let kids = tree.branches[parent].children.clone();
                let h = 1e-7;
                let mut plus = tree.clone();
                let mut minus = tree.clone();
                plus.branches[kids[0]].cond_prob += h;
                plus.branches[kids[1]].cond_prob -= h;
                minus.branches[kids[0]].cond_prob -= h;
                minus.branches[kids[1]].cond_prob += h;
                let fd = (nested_risk(&plus, &costs, alpha).unwrap().total
                    - nested_risk(&minus, &costs, alpha).unwrap().total)
                    / (2.0 * h);
                let an = sens[kids[0]] - sens[kids[1]];
                assert!((fd - an).abs() < 1e-4 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }
}
