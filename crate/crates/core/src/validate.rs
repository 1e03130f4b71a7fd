//! Structural and numerical validation of subsystem trees.
//!
//! Three families of checks:
//!
//! * Running intersection: any variable shared by two subsystems' scopes must
//!   appear in the scope of every subsystem on the tree path between them,
//!   and the same must hold for internal sets. Without this, separator
//!   messages cannot carry all the coupling.
//! * Consistent dynamics: when a child and its parent both own a variable,
//!   their next-step marginals on the shared variables must agree whenever
//!   their scope assignments agree on the separator. This is what makes the
//!   tree describe one well-defined joint MDP.
//! * Weight consistency: separator messages can only trade value between
//!   subsystems if every subsystem carries the same total state-relevance
//!   mass, and marginals on shared internal variables agree. Unequal totals
//!   make the coupled planning LP unbounded along uniform message shifts.

use crate::model::{Projection, RelevanceWeights, Scope, SubsystemTree};
use thiserror::Error;

/// Tolerance for comparing next-step marginals.
pub const DYN_TOL: f64 = 1e-9;
/// Tolerance for comparing weight totals and marginals.
pub const WEIGHT_TOL: f64 = 1e-9;
/// Default refusal threshold for flattening: joint states times joint actions.
pub const DEFAULT_FLAT_CAP: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum FlattenError {
    #[error("joint space has {pairs} state-action pairs, over the cap of {cap}")]
    TooLarge { pairs: usize, cap: usize },
    #[error(
        "degenerate model: subsystem {subsystem:?} has zero next-step mass on its shared \
         variables at ({assignment}) while the joint numerator is positive"
    )]
    Degenerate { subsystem: String, assignment: String },
    #[error("joint transition row for state {state}, action {action} sums to {sum}; the tree's dynamics are inconsistent")]
    RowSum { state: usize, action: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    ScopeIntersection,
    InternalIntersection,
    InconsistentDynamics,
    WeightTotals,
    WeightMarginals,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Runs every applicable check. Weight checks run only when weights are given.
pub fn validate(tree: &SubsystemTree, weights: Option<&RelevanceWeights>) -> ValidationReport {
    let mut violations = check_running_intersection(tree);
    violations.extend(check_consistent_dynamics(tree));
    if let Some(w) = weights {
        violations.extend(check_relevance_weights(tree, w));
    }
    ValidationReport { violations }
}

/// Tree path between two nodes, endpoints excluded.
fn path_between(tree: &SubsystemTree, mut a: usize, mut b: usize) -> Vec<usize> {
    let mut up_a = Vec::new();
    let mut up_b = Vec::new();
    while tree.depth(a) > tree.depth(b) {
        a = tree.parent[a].unwrap();
        up_a.push(a);
    }
    while tree.depth(b) > tree.depth(a) {
        b = tree.parent[b].unwrap();
        up_b.push(b);
    }
    while a != b {
        a = tree.parent[a].unwrap();
        b = tree.parent[b].unwrap();
        up_a.push(a);
        up_b.push(b);
    }
    // The meeting point was pushed twice (or is an endpoint's ancestor).
    let mut path = up_a;
    if path.last() == Some(&a) && up_b.last() == Some(&a) {
        up_b.pop();
    }
    up_b.reverse();
    path.extend(up_b);
    path
}

/// Running intersection for scopes and for internal sets.
pub fn check_running_intersection(tree: &SubsystemTree) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..tree.len() {
        for j in i + 1..tree.len() {
            let path = path_between(tree, i, j);
            let shared_scope = tree.subsystems[i].scope.intersect(&tree.subsystems[j].scope);
            for &v in shared_scope.ids() {
                for &k in &path {
                    if !tree.subsystems[k].scope.contains(v) {
                        out.push(Violation {
                            kind: ViolationKind::ScopeIntersection,
                            message: format!(
                                "variable {:?} is in the scopes of {:?} and {:?} but not of {:?} on the path between them",
                                tree.model.decl(v).name,
                                tree.subsystems[i].name,
                                tree.subsystems[j].name,
                                tree.subsystems[k].name
                            ),
                        });
                    }
                }
            }
            let shared_int = tree.subsystems[i].internal.intersect(&tree.subsystems[j].internal);
            for &v in shared_int.ids() {
                for &k in &path {
                    if !tree.subsystems[k].internal.contains(v) {
                        out.push(Violation {
                            kind: ViolationKind::InternalIntersection,
                            message: format!(
                                "variable {:?} is internal to {:?} and {:?} but not to {:?} on the path between them",
                                tree.model.decl(v).name,
                                tree.subsystems[i].name,
                                tree.subsystems[j].name,
                                tree.subsystems[k].name
                            ),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Next-step marginals of a subsystem's CPT onto `w`, one distribution per
/// scope assignment.
fn next_marginals(tree: &SubsystemTree, j: usize, w: &crate::model::Scope) -> Vec<Vec<f64>> {
    let model = &tree.model;
    let sub = &tree.subsystems[j];
    let proj = Projection::new(model, &sub.internal, w).expect("w is a subset of the internal scope");
    let n_scope = model.scope_count(&sub.scope);
    (0..n_scope).map(|i| proj.marginalize(sub.cpt_row(model, i))).collect()
}

/// Marginal agreement on shared internal variables across each tree edge.
pub fn check_consistent_dynamics(tree: &SubsystemTree) -> Vec<Violation> {
    let model = &tree.model;
    let mut out = Vec::new();
    for c in 0..tree.len() {
        let Some(p) = tree.parent[c] else { continue };
        let w = tree.subsystems[c].internal.intersect(&tree.subsystems[p].internal);
        if w.is_empty() {
            continue;
        }
        let sep = tree.sepset(c);
        let m_c = next_marginals(tree, c, &w);
        let m_p = next_marginals(tree, p, &w);
        let proj_c = Projection::new(model, &tree.subsystems[c].scope, sep).unwrap();
        let proj_p = Projection::new(model, &tree.subsystems[p].scope, sep).unwrap();
        let n_sep = model.scope_count(sep);
        let n_w = model.scope_count(&w);
        // Reference marginal per separator assignment: the first scope
        // assignment (child rows first) that restricts to it. Everything
        // else agreeing on the separator must match the reference.
        let mut reference: Vec<Option<(usize, bool)>> = vec![None; n_sep];
        for (is_child, margs, proj) in [(true, &m_c, &proj_c), (false, &m_p, &proj_p)] {
            let node = if is_child { c } else { p };
            for (i, marg) in margs.iter().enumerate() {
                let s = proj.apply(i);
                let Some((ri, ref_is_child)) = reference[s] else {
                    reference[s] = Some((i, is_child));
                    continue;
                };
                let ref_node = if ref_is_child { c } else { p };
                let ref_marg = if ref_is_child { &m_c[ri] } else { &m_p[ri] };
                for wi in 0..n_w {
                    if (marg[wi] - ref_marg[wi]).abs() > DYN_TOL {
                        out.push(Violation {
                            kind: ViolationKind::InconsistentDynamics,
                            message: format!(
                                "edge {:?} -> {:?}: next-step marginal on ({}) at ({}) is {} for {:?} at ({}) but {} for {:?} at ({})",
                                tree.subsystems[p].name,
                                tree.subsystems[c].name,
                                w.names(model).join(", "),
                                model.assignment_at(&w, wi).display(model),
                                marg[wi],
                                tree.subsystems[node].name,
                                model.assignment_at(&tree.subsystems[node].scope, i).display(model),
                                ref_marg[wi],
                                tree.subsystems[ref_node].name,
                                model
                                    .assignment_at(&tree.subsystems[ref_node].scope, ri)
                                    .display(model),
                            ),
                        });
                        break;
                    }
                }
            }
        }
    }
    out
}

/// Weight totals must agree globally and weight marginals must agree on
/// shared internal variables across each edge. The empty shared set makes the
/// marginal a single total, so the totals check is the edge check at W = {}.
pub fn check_relevance_weights(tree: &SubsystemTree, weights: &RelevanceWeights) -> Vec<Violation> {
    let model = &tree.model;
    let mut out = Vec::new();
    let totals: Vec<f64> = (0..tree.len()).map(|j| weights.total(j)).collect();
    for j in 1..tree.len() {
        if (totals[j] - totals[0]).abs() > WEIGHT_TOL * (1.0 + totals[0].abs()) {
            out.push(Violation {
                kind: ViolationKind::WeightTotals,
                message: format!(
                    "total relevance mass of {:?} is {} but {:?} has {}; separator messages cannot balance unequal totals",
                    tree.subsystems[j].name, totals[j], tree.subsystems[0].name, totals[0]
                ),
            });
        }
    }
    for c in 0..tree.len() {
        let Some(p) = tree.parent[c] else { continue };
        let w = tree.subsystems[c].internal.intersect(&tree.subsystems[p].internal);
        if w.is_empty() {
            continue; // covered by the totals check
        }
        let proj_c = Projection::new(model, &tree.subsystems[c].internal, &w).unwrap();
        let proj_p = Projection::new(model, &tree.subsystems[p].internal, &w).unwrap();
        let marg_c = proj_c.marginalize(&weights.per_subsystem[c]);
        let marg_p = proj_p.marginalize(&weights.per_subsystem[p]);
        for wi in 0..marg_c.len() {
            if (marg_c[wi] - marg_p[wi]).abs() > WEIGHT_TOL * (1.0 + marg_p[wi].abs()) {
                out.push(Violation {
                    kind: ViolationKind::WeightMarginals,
                    message: format!(
                        "weight marginal on ({}) at ({}) is {} in {:?} but {} in {:?}",
                        w.names(model).join(", "),
                        model.assignment_at(&w, wi).display(model),
                        marg_c[wi],
                        tree.subsystems[c].name,
                        marg_p[wi],
                        tree.subsystems[p].name
                    ),
                });
            }
        }
    }
    out
}

/// The flattened joint MDP a consistent subsystem tree describes. States are
/// assignments to the union of internal scopes, actions are assignments to
/// everything else in scope. Exponential by construction: an oracle, not a
/// planner.
#[derive(Debug, Clone)]
pub struct EquivalentMdp {
    pub state_scope: Scope,
    pub action_scope: Scope,
    pub n_states: usize,
    pub n_actions: usize,
    /// reward[s * n_actions + a]
    pub reward: Vec<f64>,
    /// transition[(s * n_actions + a) * n_states + s']
    pub transition: Vec<f64>,
    pub discount: f64,
}

impl EquivalentMdp {
    pub fn reward_at(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }
}

/// Builds the joint MDP by the product/quotient formula: the product of all
/// local CPTs, divided for each non-root subsystem by its next-step marginal
/// on the variables it shares with its parent's internal set. Zero numerator
/// gives a zero entry; a zero denominator under positive numerator is a
/// degenerate model and is refused. Rows are checked to sum to 1, never
/// renormalized.
pub fn build_equivalent_mdp(tree: &SubsystemTree, cap: usize) -> Result<EquivalentMdp, FlattenError> {
    let model = &tree.model;
    let state_scope = tree.tree_internal();
    let action_scope = tree.tree_external();
    let n_states = model.scope_count_checked(&state_scope).map_err(|_| FlattenError::TooLarge {
        pairs: usize::MAX,
        cap,
    })?;
    let n_actions = model.scope_count_checked(&action_scope).map_err(|_| FlattenError::TooLarge {
        pairs: usize::MAX,
        cap,
    })?;
    let pairs = n_states.checked_mul(n_actions).ok_or(FlattenError::TooLarge { pairs: usize::MAX, cap })?;
    if pairs > cap {
        return Err(FlattenError::TooLarge { pairs, cap });
    }

    let joint = state_scope.union(&action_scope);
    // scope_idx[j][s * n_actions + a]: index into subsystem j's tables.
    let mut scope_idx: Vec<Vec<usize>> = Vec::with_capacity(tree.len());
    for sub in &tree.subsystems {
        let proj = Projection::new(model, &joint, &sub.scope).unwrap();
        let mut map = vec![0usize; pairs];
        for s in 0..n_states {
            let sv = model.values_at(&state_scope, s);
            for a in 0..n_actions {
                let av = model.values_at(&action_scope, a);
                // Merge state and action values into joint scope order.
                let mut vals = vec![0usize; joint.len()];
                for (pos, &id) in state_scope.ids().iter().enumerate() {
                    vals[joint.position(id).unwrap()] = sv[pos];
                }
                for (pos, &id) in action_scope.ids().iter().enumerate() {
                    vals[joint.position(id).unwrap()] = av[pos];
                }
                map[s * n_actions + a] = proj.apply(model.index_of_values(&joint, &vals));
            }
        }
        scope_idx.push(map);
    }

    // Next-state lookups: internal index of each subsystem per joint next state.
    let next_idx: Vec<Vec<usize>> = tree
        .subsystems
        .iter()
        .map(|sub| {
            let proj = Projection::new(model, &state_scope, &sub.internal).unwrap();
            (0..n_states).map(|s| proj.apply(s)).collect()
        })
        .collect();

    // Denominator data per non-root subsystem with shared internals: the
    // marginal of its CPT onto w = internal ∩ parent internal, per scope
    // assignment, plus the joint-next-state lookup into w.
    struct Denominator {
        sub: usize,
        marginals: Vec<Vec<f64>>,
        next_w: Vec<usize>,
    }
    let mut denoms = Vec::new();
    for k in 0..tree.len() {
        let Some(p) = tree.parent[k] else { continue };
        let w = tree.subsystems[k].internal.intersect(&tree.subsystems[p].internal);
        if w.is_empty() {
            continue;
        }
        let marg = Projection::new(model, &tree.subsystems[k].internal, &w).unwrap();
        let n_scope = model.scope_count(&tree.subsystems[k].scope);
        let marginals = (0..n_scope)
            .map(|i| marg.marginalize(tree.subsystems[k].cpt_row(model, i)))
            .collect();
        let proj = Projection::new(model, &state_scope, &w).unwrap();
        denoms.push(Denominator {
            sub: k,
            marginals,
            next_w: (0..n_states).map(|s| proj.apply(s)).collect(),
        });
    }

    let mut reward = vec![0.0; pairs];
    let mut transition = vec![0.0; pairs * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let pair = s * n_actions + a;
            for j in 0..tree.len() {
                reward[pair] += tree.subsystems[j].reward[scope_idx[j][pair]];
            }
            let mut sum = 0.0;
            for s_next in 0..n_states {
                let mut num = 1.0;
                for j in 0..tree.len() {
                    num *= tree.subsystems[j].cpt_row(model, scope_idx[j][pair])[next_idx[j][s_next]];
                    if num == 0.0 {
                        break;
                    }
                }
                let mut p = 0.0;
                if num > 0.0 {
                    let mut den = 1.0;
                    for d in &denoms {
                        den *= d.marginals[scope_idx[d.sub][pair]][d.next_w[s_next]];
                    }
                    if den <= 0.0 {
                        let sub = &tree.subsystems[denoms
                            .iter()
                            .find(|d| d.marginals[scope_idx[d.sub][pair]][d.next_w[s_next]] <= 0.0)
                            .unwrap()
                            .sub];
                        return Err(FlattenError::Degenerate {
                            subsystem: sub.name.clone(),
                            assignment: format!(
                                "{}",
                                model.assignment_at(&sub.scope, scope_idx[tree.index_of(&sub.name).unwrap()][pair]).display(model)
                            ),
                        });
                    }
                    p = num / den;
                }
                transition[pair * n_states + s_next] = p;
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(FlattenError::RowSum { state: s, action: a, sum });
            }
        }
    }

    Ok(EquivalentMdp {
        state_scope,
        action_scope,
        n_states,
        n_actions,
        reward,
        transition,
        discount: tree.discount,
    })
}
