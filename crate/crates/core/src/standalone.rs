//! Per-subsystem planning. Each subsystem is solved as a small stand-alone
//! MDP whose states are its internal assignments and whose actions are its
//! external assignments, with the reward adjusted by the current separator
//! messages: credits received from children minus the price paid to the
//! parent. Solving happens in occupancy-flow form so the optimal local
//! policy's flow marginals fall out directly.

use thiserror::Error;

use crate::lp::{LpError, LpProblem, LpStatus};
use crate::model::{Model, Projection, RelevanceWeights, Scope, SubsystemTree};

/// Bank rows closer than this in every coordinate are considered duplicates.
pub const DUP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StandaloneError {
    #[error("message table for subsystem {j} has {got} entries, separator needs {want}")]
    MessageLength { j: usize, got: usize, want: usize },
    #[error("stand-alone LP for subsystem {j} did not solve to optimality")]
    NotOptimal { j: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Zero message tables shaped for the tree: one entry per separator
/// assignment for every non-root subsystem, empty at the root.
pub fn zero_messages(tree: &SubsystemTree) -> Vec<Vec<f64>> {
    (0..tree.len())
        .map(|j| {
            if tree.parent[j].is_some() {
                vec![0.0; tree.model.scope_count(tree.sepset(j))]
            } else {
                Vec::new()
            }
        })
        .collect()
}

fn check_message_shape(tree: &SubsystemTree, j: usize, msg: &[f64]) -> Result<(), StandaloneError> {
    let want = if tree.parent[j].is_some() { tree.model.scope_count(tree.sepset(j)) } else { 0 };
    if msg.len() != want {
        return Err(StandaloneError::MessageLength { j, got: msg.len(), want });
    }
    Ok(())
}

/// The net reward adjustment for subsystem j over its scope assignments:
/// child messages enter positively, the message owed to the parent is
/// subtracted.
pub fn reward_adjustment(
    tree: &SubsystemTree,
    j: usize,
    messages: &[Vec<f64>],
) -> Result<Vec<f64>, StandaloneError> {
    let model = &tree.model;
    let sub = &tree.subsystems[j];
    check_message_shape(tree, j, &messages[j])?;
    let n = model.scope_count(&sub.scope);
    let mut u = vec![0.0; n];
    for &k in tree.children(j) {
        check_message_shape(tree, k, &messages[k])?;
        let proj = Projection::new(model, &sub.scope, tree.sepset(k)).unwrap();
        for (z, entry) in u.iter_mut().enumerate() {
            *entry += messages[k][proj.apply(z)];
        }
    }
    if tree.parent[j].is_some() {
        let proj = Projection::new(model, &sub.scope, tree.sepset(j)).unwrap();
        for (z, entry) in u.iter_mut().enumerate() {
            *entry -= messages[j][proj.apply(z)];
        }
    }
    Ok(u)
}

/// Outcome of a stand-alone solve: the local value table over internal
/// assignments, the occupancy flows over scope assignments, and the optimal
/// adjusted objective (state weights dotted with the values).
#[derive(Debug, Clone)]
pub struct StandaloneSolution {
    pub v: Vec<f64>,
    pub flows: Vec<f64>,
    pub objective: f64,
}

/// Solves subsystem j's stand-alone MDP under the given messages, in flow
/// form: maximize adjusted reward dot flows, subject to one conservation row
/// per internal assignment. Values are the conservation duals.
pub fn solve_standalone(
    tree: &SubsystemTree,
    j: usize,
    messages: &[Vec<f64>],
    weights: &RelevanceWeights,
) -> Result<StandaloneSolution, StandaloneError> {
    let model = &tree.model;
    let sub = &tree.subsystems[j];
    let adjustment = reward_adjustment(tree, j, messages)?;
    let n_scope = model.scope_count(&sub.scope);
    let n_int = model.scope_count(&sub.internal);
    let to_int = Projection::new(model, &sub.scope, &sub.internal).unwrap();

    let mut lp = LpProblem::new(n_scope);
    lp.set_objective((0..n_scope).map(|z| -(sub.reward[z] + adjustment[z])).collect());
    for z in 0..n_scope {
        lp.set_lower(z, 0.0);
    }
    for x_next in 0..n_int {
        let mut row = vec![0.0; n_scope];
        for z in 0..n_scope {
            if to_int.apply(z) == x_next {
                row[z] += 1.0;
            }
            row[z] -= tree.discount * sub.cpt_row(model, z)[x_next];
        }
        lp.add_eq(row, weights.per_subsystem[j][x_next]);
    }
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(StandaloneError::NotOptimal { j });
    }
    let v: Vec<f64> = sol.dual_eq.iter().map(|y| -y).collect();
    Ok(StandaloneSolution { v, flows: sol.primal, objective: -sol.objective })
}

/// Discounted reward the local policy actually earns: original rewards
/// dotted with the flows, before any message adjustment.
pub fn local_value_entry(tree: &SubsystemTree, j: usize, flows: &[f64]) -> f64 {
    tree.subsystems[j].reward.iter().zip(flows).map(|(r, f)| r * f).sum()
}

/// Sums flows over a scope onto one of its separators.
pub fn marginalize_flow(model: &Model, scope: &Scope, flows: &[f64], sep: &Scope) -> Vec<f64> {
    Projection::new(model, scope, sep).unwrap().marginalize(flows)
}

/// One recorded local policy: its reward entry and its flow marginals onto
/// the subsystem's own separator and each child separator (in child order).
#[derive(Debug, Clone)]
pub struct LocalPolicy {
    pub l: f64,
    pub phi_own: Vec<f64>,
    pub phi_child: Vec<Vec<f64>>,
}

impl LocalPolicy {
    /// Builds the row for subsystem j from a stand-alone solve's flows.
    pub fn from_flows(tree: &SubsystemTree, j: usize, flows: &[f64]) -> LocalPolicy {
        let model = &tree.model;
        let scope = &tree.subsystems[j].scope;
        let phi_own = if tree.parent[j].is_some() {
            marginalize_flow(model, scope, flows, tree.sepset(j))
        } else {
            Vec::new()
        };
        let phi_child = tree
            .children(j)
            .iter()
            .map(|&k| marginalize_flow(model, scope, flows, tree.sepset(k)))
            .collect();
        LocalPolicy { l: flows.iter().zip(&tree.subsystems[j].reward).map(|(f, r)| f * r).sum(), phi_own, phi_child }
    }

    fn close_to(&self, other: &LocalPolicy, tol: f64) -> bool {
        let near = |a: f64, b: f64| (a - b).abs() <= tol;
        near(self.l, other.l)
            && self.phi_own.len() == other.phi_own.len()
            && self.phi_own.iter().zip(&other.phi_own).all(|(a, b)| near(*a, *b))
            && self.phi_child.len() == other.phi_child.len()
            && self
                .phi_child
                .iter()
                .zip(&other.phi_child)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(a, b)| near(*a, *b)))
    }
}

/// Grows one subsystem's collection of distinct local policies.
#[derive(Debug, Clone, Default)]
pub struct LocalPolicyBank {
    pub rows: Vec<LocalPolicy>,
}

impl LocalPolicyBank {
    pub fn new() -> LocalPolicyBank {
        LocalPolicyBank { rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends the policy unless an existing row matches every coordinate
    /// within `DUP_TOL`; returns whether it was appended.
    pub fn record_policy(&mut self, policy: LocalPolicy) -> bool {
        if self.rows.iter().any(|r| r.close_to(&policy, DUP_TOL)) {
            return false;
        }
        self.rows.push(policy);
        true
    }
}
