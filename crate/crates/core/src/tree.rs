//! Scenario trees, trajectory trees and the branch-weight recursion.
//!
//! Branches are numbered breadth first, so a parent always precedes its
//! children. The root spans steps `0..M`, and every branching layer adds `m`
//! children of `M` steps each. The `m` children of a branch share their first
//! ego state: the ego cannot react before the agent reveals its policy.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::error::{invalid, Result};
use crate::policies::PolicySet;
use crate::prediction::PredictiveModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    /// Policy followed by the agent in this branch.
    pub policy_id: usize,
    /// First and last node step, inclusive.
    pub t0: usize,
    pub tf: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Probability of reaching this branch.
    pub weight: f64,
    /// Probability of this branch given its parent.
    pub cond_prob: f64,
    /// Number of branchings between the root and this branch.
    pub layer: usize,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.tf - self.t0 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    /// Children per branching node.
    pub m: usize,
    /// Steps per branch.
    pub branch_len: usize,
    /// Number of branching layers below the root.
    pub depth: usize,
    pub dt: f64,
    pub branches: Vec<Branch>,
    /// Agent states per branch, filled by [`ScenarioTree::propagate_scenarios`].
    pub z: Vec<Vec<AgentState>>,
}

/// Closed-form branch count of a full tree.
pub fn branch_count(m: usize, depth: usize) -> usize {
    if m == 1 {
        depth + 1
    } else {
        (m.pow(depth as u32 + 1) - 1) / (m - 1)
    }
}

impl ScenarioTree {
    /// Builds the branch topology; agent trajectories are left empty.
    pub fn build_topology(m: usize, branch_len: usize, depth: usize, dt: f64) -> Result<Self> {
        if m == 0 || branch_len == 0 {
            return invalid("m and M must be at least 1");
        }
        if !(dt > 0.0) {
            return invalid("dt must be positive");
        }
        let mut branches = vec![Branch {
            id: 0,
            policy_id: 0,
            t0: 0,
            tf: branch_len - 1,
            parent: None,
            children: Vec::new(),
            weight: 1.0,
            cond_prob: 1.0,
            layer: 0,
        }];
        let mut frontier = vec![0usize];
        for layer in 1..=depth {
            let mut next = Vec::with_capacity(frontier.len() * m);
            for &parent in &frontier {
                let t0 = branches[parent].tf + 1;
                for policy_id in 0..m {
                    let id = branches.len();
                    branches.push(Branch {
                        id,
                        policy_id,
                        t0,
                        tf: t0 + branch_len - 1,
                        parent: Some(parent),
                        children: Vec::new(),
                        weight: 1.0,
                        cond_prob: 1.0 / m as f64,
                        layer,
                    });
                    branches[parent].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        let n = branches.len();
        Ok(Self {
            m,
            branch_len,
            depth,
            dt,
            branches,
            z: vec![Vec::new(); n],
        })
    }

    /// Steps on any root-to-leaf path.
    pub fn horizon(&self) -> usize {
        (self.depth + 1) * self.branch_len
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.is_leaf())
    }

    /// Rolls the agent forward: the root continues `root_policy`, every child
    /// continues from its parent's last state under its own policy.
    pub fn propagate_scenarios(
        &mut self,
        z0: &AgentState,
        policies: &PolicySet,
        root_policy: usize,
    ) -> Result<()> {
        if policies.len() != self.m {
            return invalid(format!(
                "tree has {} children per node but the policy set has {} policies",
                self.m,
                policies.len()
            ));
        }
        if root_policy >= policies.len() {
            return invalid(format!("root policy {root_policy} out of range"));
        }
        self.branches[0].policy_id = root_policy;
        self.z[0] = policies.rollout(root_policy, z0, self.branch_len - 1, self.dt)?;
        for id in 1..self.branches.len() {
            let parent = self.branches[id].parent.expect("non-root has a parent");
            let start = self.z[parent].last().expect("parent propagated").clone();
            let mut traj = policies.rollout(self.branches[id].policy_id, &start, self.branch_len, self.dt)?;
            traj.remove(0);
            self.z[id] = traj;
        }
        Ok(())
    }

    /// Root-to-leaf branch paths with their probabilities (leaf weights).
    pub fn evaluations(&self) -> Vec<(Vec<usize>, f64)> {
        self.leaves()
            .map(|leaf| {
                let mut path = vec![leaf.id];
                let mut cur = leaf.parent;
                while let Some(p) = cur {
                    path.push(p);
                    cur = self.branches[p].parent;
                }
                path.reverse();
                (path, leaf.weight)
            })
            .collect()
    }

    /// Copies weights and conditional probabilities into the branches.
    pub fn set_weights(&mut self, weights: &BranchWeights) {
        for (b, (&w, &c)) in self.branches.iter_mut().zip(weights.w.iter().zip(&weights.cond)) {
            b.weight = w;
            b.cond_prob = c;
        }
    }

    pub fn layout(&self) -> TreeLayout {
        TreeLayout::new(self)
    }
}

/// Maps `(branch, local step)` to an ego state slot; sibling branches share
/// the slot of their first node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeLayout {
    pub slots: Vec<Vec<usize>>,
    pub n_slots: usize,
}

impl TreeLayout {
    pub fn new(tree: &ScenarioTree) -> Self {
        let mut slots = vec![Vec::new(); tree.len()];
        let mut next = 0usize;
        for b in &tree.branches {
            if b.parent.is_none() {
                slots[b.id] = (next..next + b.len()).collect();
                next += b.len();
            }
            if b.is_leaf() {
                continue;
            }
            let shared = next;
            next += 1;
            for &c in &b.children {
                let len = tree.branches[c].len();
                let mut s = Vec::with_capacity(len);
                s.push(shared);
                s.extend(next..next + len - 1);
                next += len - 1;
                slots[c] = s;
            }
        }
        Self { slots, n_slots: next }
    }

    pub fn slot(&self, branch: usize, step: usize) -> usize {
        self.slots[branch][step]
    }
}

/// Ego plan in tree form: one state and input sequence per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTree {
    pub layout: TreeLayout,
    pub states: Vec<Vec<AgentState>>,
    pub inputs: Vec<Vec<AgentState>>,
}

impl TrajectoryTree {
    /// Tree with every node at `x` and every input at `u`.
    pub fn constant(tree: &ScenarioTree, x: &AgentState, u: &AgentState) -> Self {
        let layout = tree.layout();
        let states = tree.branches.iter().map(|b| vec![x.clone(); b.len()]).collect();
        let inputs = tree.branches.iter().map(|b| vec![u.clone(); b.len()]).collect();
        Self {
            layout,
            states,
            inputs,
        }
    }

    /// Distinct states, one per slot.
    pub fn slot_states(&self) -> Vec<AgentState> {
        let mut out = vec![None; self.layout.n_slots];
        for (b, seq) in self.states.iter().enumerate() {
            for (k, x) in seq.iter().enumerate() {
                out[self.layout.slot(b, k)].get_or_insert_with(|| x.clone());
            }
        }
        out.into_iter().map(|x| x.expect("every slot is used")).collect()
    }

    /// Writes `x` into every branch copy of `slot`.
    pub fn set_slot_state(&mut self, slot: usize, x: &AgentState) {
        for (b, slots) in self.layout.slots.iter().enumerate() {
            for (k, &s) in slots.iter().enumerate() {
                if s == slot {
                    self.states[b][k] = x.clone();
                }
            }
        }
    }

    /// `true` when all copies of every shared slot agree exactly.
    pub fn is_causal(&self) -> bool {
        let slots = self.slot_states();
        self.states.iter().enumerate().all(|(b, seq)| {
            seq.iter()
                .enumerate()
                .all(|(k, x)| *x == slots[self.layout.slot(b, k)])
        })
    }
}

/// Weights of all branches and their gradients with respect to the ego
/// slot states (flattened, `n_slots * n_x`).
#[derive(Debug, Clone)]
pub struct BranchWeights {
    pub w: Vec<f64>,
    pub cond: Vec<f64>,
    pub grad: Vec<DVector<f64>>,
    pub cond_grad: Vec<DVector<f64>>,
}

/// Weight recursion `w_child = w_parent * P(child | plan, rollouts)`.
///
/// At each branching node the predictive model sees the first
/// `min(T, M)` nodes of every child branch.
pub fn compute_weights(
    tree: &ScenarioTree,
    plan: &TrajectoryTree,
    model: &PredictiveModel,
) -> Result<BranchWeights> {
    if plan.states.len() != tree.len() || tree.z.iter().any(|z| z.is_empty()) {
        return invalid("trajectory tree does not match the propagated scenario tree");
    }
    let nx = plan.states[0][0].len();
    let dim = plan.layout.n_slots * nx;
    let n = tree.len();
    let mut w = vec![0.0; n];
    let mut cond = vec![0.0; n];
    let mut grad = vec![DVector::zeros(dim); n];
    let mut cond_grad = vec![DVector::zeros(dim); n];
    w[0] = 1.0;
    cond[0] = 1.0;
    for b in &tree.branches {
        if b.is_leaf() {
            continue;
        }
        let horizon = model.horizon.min(tree.branch_len);
        let xs: Vec<&[AgentState]> = b.children.iter().map(|&c| &plan.states[c][..horizon]).collect();
        let zs: Vec<&[AgentState]> = b.children.iter().map(|&c| &tree.z[c][..horizon]).collect();
        let bp = model.branch_probabilities(&xs, &zs)?;
        for (i, &c) in b.children.iter().enumerate() {
            let mut g = DVector::zeros(dim);
            for (j, &cj) in b.children.iter().enumerate() {
                for k in 0..horizon {
                    let slot = plan.layout.slot(cj, k);
                    let d = bp.dp_dx(i, j, k);
                    let mut seg = g.rows_mut(slot * nx, nx);
                    seg += d;
                }
            }
            cond[c] = bp.p[i];
            w[c] = w[b.id] * bp.p[i];
            grad[c] = &grad[b.id] * bp.p[i] + &g * w[b.id];
            cond_grad[c] = g;
        }
    }
    Ok(BranchWeights {
        w,
        cond,
        grad,
        cond_grad,
    })
}
