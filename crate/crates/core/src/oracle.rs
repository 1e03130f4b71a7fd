//! Ground-truth solvers on flattened small instances: the exact Bellman LP,
//! its dual flow LP, and the centralized coupled LP over all subsystem value
//! functions and separator messages. These are referees for the distributed
//! planner, exponential on purpose and guarded by size caps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lp::{LpError, LpProblem, LpStatus};
use crate::model::{Projection, RelevanceWeights, SubsystemTree};
use crate::validate::EquivalentMdp;

/// Feasibility enumeration switches to sampling above this many constraints.
pub const FEAS_ENUM_CAP: usize = 1 << 16;
/// Default cap on state-action pairs for the exact LPs.
pub const EXACT_LP_CAP: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance has {pairs} state-action pairs, over the oracle cap of {cap}")]
    TooLarge { pairs: usize, cap: usize },
    #[error("state relevance weights must be strictly positive for the exact LP")]
    NonPositiveWeights,
    #[error("oracle LP did not solve to optimality: {0}")]
    NotOptimal(&'static str),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Exact solution of a flattened MDP.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub v: Vec<f64>,
    /// alpha dot v at the optimum.
    pub objective: f64,
    /// Greedy action per state, lowest index on ties.
    pub policy: Vec<usize>,
    /// Occupancy flows phi[s * n_actions + a] when solved via the dual.
    pub flows: Option<Vec<f64>>,
}

/// Solves min alpha.V subject to V(s) >= R(s,a) + discount * P V for every
/// pair, by simplex on the primal.
pub fn exact_bellman_lp(mdp: &EquivalentMdp, alpha: &[f64], cap: usize) -> Result<ExactSolution, OracleError> {
    let pairs = mdp.n_states * mdp.n_actions;
    if pairs > cap {
        return Err(OracleError::TooLarge { pairs, cap });
    }
    assert_eq!(alpha.len(), mdp.n_states);
    if alpha.iter().any(|&w| !(w > 0.0)) {
        return Err(OracleError::NonPositiveWeights);
    }
    let mut lp = LpProblem::new(mdp.n_states);
    lp.set_objective(alpha.to_vec());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut row = vec![0.0; mdp.n_states];
            row[s] += 1.0;
            let p = mdp.transition_row(s, a);
            for sn in 0..mdp.n_states {
                row[sn] -= mdp.discount * p[sn];
            }
            lp.add_ge(row, mdp.reward_at(s, a));
        }
    }
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(OracleError::NotOptimal("exact Bellman LP"));
    }
    let policy = greedy_policy(mdp, &sol.primal);
    Ok(ExactSolution { v: sol.primal, objective: sol.objective, policy, flows: None })
}

/// Greedy action per state against a value function, lowest index on ties.
pub fn greedy_policy(mdp: &EquivalentMdp, v: &[f64]) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let mut best = 0usize;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                let p = mdp.transition_row(s, a);
                let q = mdp.reward_at(s, a)
                    + mdp.discount * p.iter().zip(v).map(|(p, v)| p * v).sum::<f64>();
                if q > best_q {
                    best_q = q;
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Occupancy flows from the dual LP: maximize sum R.phi subject to flow
/// conservation sum_a phi_a - discount * sum_a P_a^T phi_a = alpha, phi >= 0.
#[derive(Debug, Clone)]
pub struct ExactFlows {
    /// phi[s * n_actions + a]
    pub phi: Vec<f64>,
    pub objective: f64,
}

pub fn exact_dual_flows(mdp: &EquivalentMdp, alpha: &[f64], cap: usize) -> Result<ExactFlows, OracleError> {
    let pairs = mdp.n_states * mdp.n_actions;
    if pairs > cap {
        return Err(OracleError::TooLarge { pairs, cap });
    }
    assert_eq!(alpha.len(), mdp.n_states);
    let mut lp = LpProblem::new(pairs);
    lp.set_objective((0..pairs).map(|i| -mdp.reward[i]).collect());
    for i in 0..pairs {
        lp.set_lower(i, 0.0);
    }
    for sn in 0..mdp.n_states {
        let mut row = vec![0.0; pairs];
        for a in 0..mdp.n_actions {
            row[sn * mdp.n_actions + a] += 1.0;
        }
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                row[s * mdp.n_actions + a] -= mdp.discount * mdp.transition_row(s, a)[sn];
            }
        }
        lp.add_eq(row, alpha[sn]);
    }
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(OracleError::NotOptimal("exact flow LP"));
    }
    Ok(ExactFlows { phi: sol.primal, objective: -sol.objective })
}

/// Value of a fixed deterministic policy, by direct linear solve of
/// (I - discount * P_pi) V = R_pi with partial-pivot elimination.
pub fn policy_evaluation(mdp: &EquivalentMdp, policy: &[usize]) -> Vec<f64> {
    let n = mdp.n_states;
    let mut a = vec![0.0; n * (n + 1)];
    for s in 0..n {
        let p = mdp.transition_row(s, policy[s]);
        for sn in 0..n {
            a[s * (n + 1) + sn] = if s == sn { 1.0 } else { 0.0 } - mdp.discount * p[sn];
        }
        a[s * (n + 1) + n] = mdp.reward_at(s, policy[s]);
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                a[i * (n + 1) + col]
                    .abs()
                    .partial_cmp(&a[j * (n + 1) + col].abs())
                    .unwrap()
            })
            .unwrap();
        if piv != col {
            for k in 0..n + 1 {
                a.swap(col * (n + 1) + k, piv * (n + 1) + k);
            }
        }
        let d = a[col * (n + 1) + col];
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i * (n + 1) + col] / d;
            if f != 0.0 {
                for k in col..n + 1 {
                    a[i * (n + 1) + k] -= f * a[col * (n + 1) + k];
                }
            }
        }
    }
    (0..n).map(|s| a[s * (n + 1) + n] / a[s * (n + 1) + s]).collect()
}

/// Column/row layout of the centralized coupled LP: all message columns
/// first (per non-root subsystem, one per separator assignment), then each
/// subsystem's value columns; one row block per subsystem.
#[derive(Debug, Clone)]
pub struct CentralizedLayout {
    pub s_cols: Vec<std::ops::Range<usize>>,
    pub v_cols: Vec<std::ops::Range<usize>>,
    pub row_blocks: Vec<std::ops::Range<usize>>,
}

/// The one-shot coupled LP: minimize sum_j alpha_j.V_j subject to, for every
/// subsystem j and scope assignment, V_j >= R_j + U_j + discount * P_j V_j,
/// where U_j = sum of child messages minus the message to j's parent. The
/// message influence is substituted inline rather than materialized as U
/// columns; message variables carry the planner's box bounds so results stay
/// comparable when the unbounded case arises.
pub fn build_centralized_lp(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    m_box: f64,
) -> (LpProblem, CentralizedLayout) {
    let model = &tree.model;
    let mut s_cols = Vec::with_capacity(tree.len());
    let mut next = 0usize;
    for j in 0..tree.len() {
        if tree.parent[j].is_some() {
            let n = model.scope_count(tree.sepset(j));
            s_cols.push(next..next + n);
            next += n;
        } else {
            s_cols.push(next..next);
        }
    }
    let mut v_cols = Vec::with_capacity(tree.len());
    for j in 0..tree.len() {
        let n = model.scope_count(&tree.subsystems[j].internal);
        v_cols.push(next..next + n);
        next += n;
    }
    let mut lp = LpProblem::new(next);
    for j in 0..tree.len() {
        for (col, &w) in v_cols[j].clone().zip(&weights.per_subsystem[j]) {
            lp.set_objective_coef(col, w);
        }
        for col in s_cols[j].clone() {
            lp.set_bounds(col, -m_box, m_box);
        }
    }
    let mut row_blocks = Vec::with_capacity(tree.len());
    let mut row_at = 0usize;
    for j in 0..tree.len() {
        let sub = &tree.subsystems[j];
        let n_scope = model.scope_count(&sub.scope);
        let to_int = Projection::new(model, &sub.scope, &sub.internal).unwrap();
        let to_own_sep = Projection::new(model, &sub.scope, tree.sepset(j)).unwrap();
        let child_seps: Vec<(usize, Projection)> = tree
            .children(j)
            .iter()
            .map(|&k| (k, Projection::new(model, &sub.scope, tree.sepset(k)).unwrap()))
            .collect();
        for i in 0..n_scope {
            let mut row = vec![0.0; next];
            row[v_cols[j].start + to_int.apply(i)] += 1.0;
            let p = sub.cpt_row(model, i);
            for (x_next, &prob) in p.iter().enumerate() {
                row[v_cols[j].start + x_next] -= tree.discount * prob;
            }
            // V_j - gamma P V_j - sum_k S_k + S_j >= R_j
            for (k, proj) in &child_seps {
                row[s_cols[*k].start + proj.apply(i)] -= 1.0;
            }
            if tree.parent[j].is_some() {
                row[s_cols[j].start + to_own_sep.apply(i)] += 1.0;
            }
            lp.add_ge(row, sub.reward[i]);
        }
        row_blocks.push(row_at..row_at + n_scope);
        row_at += n_scope;
    }
    (lp, CentralizedLayout { s_cols, v_cols, row_blocks })
}

#[derive(Debug, Clone)]
pub struct CentralizedFactoredSolution {
    /// Value table per subsystem, over internal assignments.
    pub v: Vec<Vec<f64>>,
    /// Message values per subsystem, over separator assignments (empty at
    /// the root).
    pub s: Vec<Vec<f64>>,
    /// Net reward adjustment per subsystem, over scope assignments.
    pub u: Vec<Vec<f64>>,
    pub objective: f64,
}

pub fn centralized_factored_lp(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    m_box: f64,
) -> Result<CentralizedFactoredSolution, OracleError> {
    let (lp, layout) = build_centralized_lp(tree, weights, m_box);
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(OracleError::NotOptimal("centralized coupled LP"));
    }
    let model = &tree.model;
    let v: Vec<Vec<f64>> = (0..tree.len()).map(|j| sol.primal[layout.v_cols[j].clone()].to_vec()).collect();
    let s: Vec<Vec<f64>> = (0..tree.len()).map(|j| sol.primal[layout.s_cols[j].clone()].to_vec()).collect();
    let mut u = Vec::with_capacity(tree.len());
    for j in 0..tree.len() {
        let sub = &tree.subsystems[j];
        let n_scope = model.scope_count(&sub.scope);
        let to_own_sep = Projection::new(model, &sub.scope, tree.sepset(j)).unwrap();
        let child_seps: Vec<(usize, Projection)> = tree
            .children(j)
            .iter()
            .map(|&k| (k, Projection::new(model, &sub.scope, tree.sepset(k)).unwrap()))
            .collect();
        let mut uj = vec![0.0; n_scope];
        for (i, entry) in uj.iter_mut().enumerate() {
            for (k, proj) in &child_seps {
                *entry += s[*k][proj.apply(i)];
            }
            if tree.parent[j].is_some() {
                *entry -= s[j][to_own_sep.apply(i)];
            }
        }
        u.push(uj);
    }
    Ok(CentralizedFactoredSolution { v, s, u, objective: sol.objective })
}

/// Result of checking the joint Bellman constraints for a decomposed value
/// function. `max_violation` is the largest (rhs - lhs); nonpositive means
/// every checked constraint holds.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub constraints_checked: usize,
    pub sampled: bool,
    pub max_violation: f64,
    /// State and action values (per state/action scope order) of the worst
    /// constraint.
    pub worst: Option<(Vec<usize>, Vec<usize>)>,
}

/// Checks sum_j V_j(x_j) >= sum_j R_j(z_j) + discount * sum_j E[V_j | z_j]
/// over joint state-action pairs: exhaustively when the joint space is at
/// most `enum_cap` pairs, otherwise on `sample_budget` seeded uniform draws.
/// Everything is computed from the factored tables, so no joint MDP is built.
pub fn check_global_feasibility(
    tree: &SubsystemTree,
    v: &[Vec<f64>],
    enum_cap: usize,
    sample_budget: usize,
    seed: u64,
) -> FeasibilityReport {
    let model = &tree.model;
    let state_scope = tree.tree_internal();
    let action_scope = tree.tree_external();
    let joint = state_scope.union(&action_scope);
    let subs: Vec<(Projection, Projection)> = tree
        .subsystems
        .iter()
        .map(|sub| {
            (
                Projection::new(model, &joint, &sub.scope).unwrap(),
                Projection::new(model, &state_scope, &sub.internal).unwrap(),
            )
        })
        .collect();

    let residual = |sv: &[usize], av: &[usize]| -> f64 {
        let mut vals = vec![0usize; joint.len()];
        for (pos, &id) in state_scope.ids().iter().enumerate() {
            vals[joint.position(id).unwrap()] = sv[pos];
        }
        for (pos, &id) in action_scope.ids().iter().enumerate() {
            vals[joint.position(id).unwrap()] = av[pos];
        }
        let joint_idx = model.index_of_values(&joint, &vals);
        let state_idx = model.index_of_values(&state_scope, sv);
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for (j, sub) in tree.subsystems.iter().enumerate() {
            let (to_scope, to_int) = &subs[j];
            let z = to_scope.apply(joint_idx);
            lhs += v[j][to_int.apply(state_idx)];
            rhs += sub.reward[z];
            let p = sub.cpt_row(model, z);
            rhs += tree.discount * p.iter().zip(&v[j]).map(|(p, v)| p * v).sum::<f64>();
        }
        rhs - lhs
    };

    let n_states = model.scope_count_checked(&state_scope).ok();
    let n_actions = model.scope_count_checked(&action_scope).ok();
    let pairs = match (n_states, n_actions) {
        (Some(s), Some(a)) => s.checked_mul(a),
        _ => None,
    };

    let mut max_violation = f64::NEG_INFINITY;
    let mut worst = None;
    let mut checked = 0usize;
    if let Some(pairs) = pairs.filter(|&p| p <= enum_cap) {
        let n_actions = n_actions.unwrap();
        for s in 0..n_states.unwrap() {
            let sv = model.values_at(&state_scope, s);
            for a in 0..n_actions {
                let av = model.values_at(&action_scope, a);
                let r = residual(&sv, &av);
                checked += 1;
                if r > max_violation {
                    max_violation = r;
                    worst = Some((sv.clone(), av.clone()));
                }
            }
        }
        debug_assert_eq!(checked, pairs);
        FeasibilityReport { constraints_checked: checked, sampled: false, max_violation, worst }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..sample_budget {
            let sv: Vec<usize> =
                state_scope.ids().iter().map(|&id| rng.gen_range(0..model.card(id))).collect();
            let av: Vec<usize> =
                action_scope.ids().iter().map(|&id| rng.gen_range(0..model.card(id))).collect();
            let r = residual(&sv, &av);
            checked += 1;
            if r > max_violation {
                max_violation = r;
                worst = Some((sv, av));
            }
        }
        FeasibilityReport { constraints_checked: checked, sampled: true, max_violation, worst }
    }
}
