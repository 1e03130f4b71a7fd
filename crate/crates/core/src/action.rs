//! Greedy action selection from converged local value functions.
//!
//! The sum of the local Q tables is the joint Q function, so the greedy joint
//! action is the argmax of a sum of small tables. Because the subsystems form
//! a tree whose scopes satisfy the running intersection property, that argmax
//! needs only two passes: going up, each subsystem hands its parent the best
//! achievable value of its whole subtree for every assignment of the action
//! variables they share; coming down, each parent's choice pins those shared
//! variables and the recorded argmaxes resolve the rest. No subsystem ever
//! observes a state variable outside its own scope.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Assignment, Projection, Scope, SubsystemTree, VarId};
use crate::validate::{build_equivalent_mdp, FlattenError};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("expected one table per subsystem ({want}), got {got}")]
    TableCount { want: usize, got: usize },
    #[error("table for subsystem {name:?} has {got} entries, expected {want}")]
    TableLength { name: String, want: usize, got: usize },
    #[error("state does not assign variable {0:?}")]
    MissingStateVariable(String),
    #[error("state value {value} out of range for variable {var:?}")]
    StateValueOutOfRange { var: String, value: usize },
    #[error(
        "action variable {var:?} is shared by subsystems {from:?} and {to:?} but missing \
         from a scope on the tree path between them"
    )]
    SharedActionOffPath { var: String, from: String, to: String },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Flatten(#[from] FlattenError),
}

/// One subsystem's Q table over its scope assignments:
/// Q_j(z) = R_j(z) + gamma * sum over next internal assignments of P_j * V_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalQ {
    pub table: Vec<f64>,
}

/// Q tables for every subsystem from per-subsystem value tables, using the
/// original rewards (separator messages cancel in the sum and play no role
/// at execution time).
pub fn compute_q(tree: &SubsystemTree, v: &[Vec<f64>]) -> Result<Vec<LocalQ>, ActionError> {
    if v.len() != tree.len() {
        return Err(ActionError::TableCount { want: tree.len(), got: v.len() });
    }
    let model = &tree.model;
    let mut out = Vec::with_capacity(tree.len());
    for (j, sub) in tree.subsystems.iter().enumerate() {
        let n_int = model.scope_count(&sub.internal);
        if v[j].len() != n_int {
            return Err(ActionError::TableLength {
                name: sub.name.clone(),
                want: n_int,
                got: v[j].len(),
            });
        }
        let n_scope = model.scope_count(&sub.scope);
        let table = (0..n_scope)
            .map(|z| {
                let future: f64 =
                    sub.cpt_row(model, z).iter().zip(&v[j]).map(|(p, vj)| p * vj).sum();
                sub.reward[z] + tree.discount * future
            })
            .collect();
        out.push(LocalQ { table });
    }
    Ok(out)
}

/// What a subsystem offers its parent: for every assignment of the action
/// variables they share, the best value its subtree can add, and the
/// assignment of its own action variables achieving it (the lexicographically
/// smallest one on ties). At the root the shared scope is empty and the
/// single row is the global choice.
#[derive(Debug, Clone)]
pub struct ConditionalStrategy {
    pub subsystem: usize,
    /// Action variables in this subsystem's scope.
    pub action_vars: Scope,
    /// Action variables shared with the parent's scope; empty at the root.
    pub shared: Scope,
    /// Best subtree value per shared assignment.
    pub values: Vec<f64>,
    /// Chosen assignment to `action_vars` per shared assignment.
    pub argmax: Vec<Vec<usize>>,
}

/// Everything the two passes did, for inspection: the per-subsystem
/// strategies, which state variables each subsystem read, and how many table
/// entries the upward maximizations processed.
#[derive(Debug, Clone)]
pub struct SelectionTrace {
    pub strategies: Vec<ConditionalStrategy>,
    pub observed: Vec<Vec<VarId>>,
    pub max_ops: usize,
}

fn check_tables(tree: &SubsystemTree, qs: &[LocalQ]) -> Result<(), ActionError> {
    if qs.len() != tree.len() {
        return Err(ActionError::TableCount { want: tree.len(), got: qs.len() });
    }
    for (j, sub) in tree.subsystems.iter().enumerate() {
        let want = tree.model.scope_count(&sub.scope);
        if qs[j].table.len() != want {
            return Err(ActionError::TableLength {
                name: sub.name.clone(),
                want,
                got: qs[j].table.len(),
            });
        }
    }
    Ok(())
}

/// Every action variable must live on a connected piece of the tree, or the
/// upward pass would maximize over it in one branch while another branch picks
/// its own value independently. Guaranteed by running intersection on scopes,
/// but checked here rather than assumed.
fn check_action_connectivity(tree: &SubsystemTree) -> Result<(), ActionError> {
    let model = &tree.model;
    for &var in tree.tree_external().ids() {
        let holders: Vec<usize> =
            (0..tree.len()).filter(|&j| tree.subsystems[j].scope.contains(var)).collect();
        let &top = holders.iter().min_by_key(|&&j| tree.depth(j)).expect("external var in some scope");
        for &j in &holders {
            let mut cur = j;
            while cur != top {
                let Some(p) = tree.parent[cur] else {
                    return Err(ActionError::SharedActionOffPath {
                        var: model.decl(var).name.clone(),
                        from: tree.subsystems[j].name.clone(),
                        to: tree.subsystems[top].name.clone(),
                    });
                };
                if !tree.subsystems[p].scope.contains(var) {
                    return Err(ActionError::SharedActionOffPath {
                        var: model.decl(var).name.clone(),
                        from: tree.subsystems[j].name.clone(),
                        to: tree.subsystems[top].name.clone(),
                    });
                }
                cur = p;
            }
        }
    }
    Ok(())
}

/// The greedy joint action for `state`, which must assign every tree-internal
/// variable. Returns the assignment over the tree's action variables.
pub fn select_action(
    tree: &SubsystemTree,
    qs: &[LocalQ],
    state: &Assignment,
) -> Result<Assignment, ActionError> {
    select_action_traced(tree, qs, state).map(|(action, _)| action)
}

/// `select_action`, also returning the trace of both passes.
pub fn select_action_traced(
    tree: &SubsystemTree,
    qs: &[LocalQ],
    state: &Assignment,
) -> Result<(Assignment, SelectionTrace), ActionError> {
    check_tables(tree, qs)?;
    check_action_connectivity(tree)?;
    let model = &tree.model;
    let tree_internal = tree.tree_internal();
    let mut observed: Vec<Vec<VarId>> = vec![Vec::new(); tree.len()];
    let mut max_ops = 0usize;

    // Upward pass, leaves first.
    let mut strategies: Vec<Option<ConditionalStrategy>> = (0..tree.len()).map(|_| None).collect();
    for &j in &tree.depth_descending() {
        let sub = &tree.subsystems[j];
        let state_vars = sub.scope.intersect(&tree_internal);
        let action_vars = sub.scope.difference(&tree_internal);

        // Observe exactly the state variables in this subsystem's scope.
        let mut local_state = Vec::with_capacity(state_vars.len());
        for &id in state_vars.ids() {
            let decl = model.decl(id);
            observed[j].push(id);
            let value = state
                .value_of(id)
                .ok_or_else(|| ActionError::MissingStateVariable(decl.name.clone()))?;
            if value >= decl.values.len() {
                return Err(ActionError::StateValueOutOfRange { var: decl.name.clone(), value });
            }
            local_state.push(value);
        }

        // Q_j with the state pinned: a table over this subsystem's action
        // variables, plus each child's offer at the actions it shares with us.
        let n_act = model.scope_count(&action_vars);
        let mut scope_values = vec![0usize; sub.scope.len()];
        for (pos, &id) in state_vars.ids().iter().enumerate() {
            scope_values[sub.scope.position(id).unwrap()] = local_state[pos];
        }
        let action_pos: Vec<usize> =
            action_vars.ids().iter().map(|&id| sub.scope.position(id).unwrap()).collect();
        let child_offers: Vec<(&ConditionalStrategy, Projection)> = tree
            .children(j)
            .iter()
            .map(|&k| {
                let strat = strategies[k].as_ref().expect("children precede parents");
                let proj = Projection::new(model, &action_vars, &strat.shared).unwrap();
                (strat, proj)
            })
            .collect();
        let mut instantiated = Vec::with_capacity(n_act);
        for a_idx in 0..n_act {
            let a_values = model.values_at(&action_vars, a_idx);
            for (pos, &sp) in action_pos.iter().enumerate() {
                scope_values[sp] = a_values[pos];
            }
            let mut total = qs[j].table[model.index_of_values(&sub.scope, &scope_values)];
            for (strat, proj) in &child_offers {
                total += strat.values[proj.apply(a_idx)];
            }
            instantiated.push(total);
        }

        // Maximize within each assignment of the actions shared with the
        // parent. Ascending index order plus a strict comparison makes every
        // argmax the lexicographically smallest maximizer.
        let shared = match tree.parent[j] {
            Some(p) => action_vars.intersect(&tree.subsystems[p].scope),
            None => Scope::empty(),
        };
        let to_shared = Projection::new(model, &action_vars, &shared).unwrap();
        let n_shared = model.scope_count(&shared);
        let mut values = vec![f64::NEG_INFINITY; n_shared];
        let mut argmax = vec![Vec::new(); n_shared];
        for (a_idx, &total) in instantiated.iter().enumerate() {
            max_ops += 1;
            let s_idx = to_shared.apply(a_idx);
            if total > values[s_idx] {
                values[s_idx] = total;
                argmax[s_idx] = model.values_at(&action_vars, a_idx);
            }
        }
        strategies[j] = Some(ConditionalStrategy { subsystem: j, action_vars, shared, values, argmax });
    }
    let strategies: Vec<ConditionalStrategy> =
        strategies.into_iter().map(|s| s.unwrap()).collect();

    // Downward pass: the root picks its row outright, children look up theirs
    // at whatever their parent chose for the shared variables.
    let external = tree.tree_external();
    let mut action_values = vec![usize::MAX; external.len()];
    let mut stack = vec![(tree.root, 0usize)];
    while let Some((j, row)) = stack.pop() {
        let strat = &strategies[j];
        let chosen = &strat.argmax[row];
        for (pos, &id) in strat.action_vars.ids().iter().enumerate() {
            let slot = &mut action_values[external.position(id).unwrap()];
            debug_assert!(*slot == usize::MAX || *slot == chosen[pos]);
            *slot = chosen[pos];
        }
        for &k in tree.children(j) {
            let child_shared = &strategies[k].shared;
            let values: Vec<usize> = child_shared
                .ids()
                .iter()
                .map(|&id| chosen[strat.action_vars.position(id).unwrap()])
                .collect();
            stack.push((k, model.index_of_values(child_shared, &values)));
        }
    }
    debug_assert!(action_values.iter().all(|&v| v != usize::MAX));
    let action = Assignment { scope: external, values: action_values };
    Ok((action, SelectionTrace { strategies, observed, max_ops }))
}

/// Sum of the local Q tables at one (state, action) pair.
pub fn joint_q_value(
    tree: &SubsystemTree,
    qs: &[LocalQ],
    state: &Assignment,
    action: &Assignment,
) -> Result<f64, ActionError> {
    check_tables(tree, qs)?;
    let model = &tree.model;
    let mut total = 0.0;
    for (j, sub) in tree.subsystems.iter().enumerate() {
        let mut values = Vec::with_capacity(sub.scope.len());
        for &id in sub.scope.ids() {
            let v = state.value_of(id).or_else(|| action.value_of(id)).ok_or_else(|| {
                ActionError::MissingStateVariable(model.decl(id).name.clone())
            })?;
            values.push(v);
        }
        total += qs[j].table[model.index_of_values(&sub.scope, &values)];
    }
    Ok(total)
}

/// Referee for the two-pass selection: enumerate every joint action and keep
/// the first maximizer, which is the lexicographically smallest one.
pub fn brute_force_action(
    tree: &SubsystemTree,
    qs: &[LocalQ],
    state: &Assignment,
    cap: usize,
) -> Result<(Assignment, f64), ActionError> {
    check_tables(tree, qs)?;
    let model = &tree.model;
    let external = tree.tree_external();
    let n = model
        .scope_count_checked(&external)
        .map_err(|_| FlattenError::TooLarge { pairs: usize::MAX, cap })?;
    if n > cap {
        return Err(ActionError::Flatten(FlattenError::TooLarge { pairs: n, cap }));
    }
    let mut best: Option<(Assignment, f64)> = None;
    for a_idx in 0..n {
        let action = model.assignment_at(&external, a_idx);
        let value = joint_q_value(tree, qs, state, &action)?;
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((action, value));
        }
    }
    Ok(best.expect("at least the empty action assignment"))
}

/// One executed step: the state it started from, the action taken, and the
/// immediate joint reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// Values over the tree-internal scope, canonical order.
    pub state: Vec<usize>,
    /// Values over the tree-external scope, canonical order.
    pub action: Vec<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub discounted_return: f64,
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    // Row sums can fall a few ulps short of 1; the draw then lands on the
    // last assignment with mass.
    last
}

/// Runs the greedy policy for `horizon` steps from `start`, sampling next
/// states from the joint transition the tree describes. Flattening the joint
/// MDP keeps the sampler exactly faithful to the model, so this refuses trees
/// over the flattening cap.
pub fn simulate_episode(
    tree: &SubsystemTree,
    qs: &[LocalQ],
    start: &Assignment,
    horizon: usize,
    seed: u64,
    cap: usize,
) -> Result<Episode, ActionError> {
    if horizon == 0 {
        return Err(ActionError::ZeroHorizon);
    }
    check_tables(tree, qs)?;
    let mdp = build_equivalent_mdp(tree, cap)?;
    let model = &tree.model;
    let mut state_values = Vec::with_capacity(mdp.state_scope.len());
    for &id in mdp.state_scope.ids() {
        let decl = model.decl(id);
        let value = start
            .value_of(id)
            .ok_or_else(|| ActionError::MissingStateVariable(decl.name.clone()))?;
        if value >= decl.values.len() {
            return Err(ActionError::StateValueOutOfRange { var: decl.name.clone(), value });
        }
        state_values.push(value);
    }
    let mut s_idx = model.index_of_values(&mdp.state_scope, &state_values);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(horizon);
    let mut discounted_return = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let state = model.assignment_at(&mdp.state_scope, s_idx);
        let action = select_action(tree, qs, &state)?;
        let a_idx = model.index_of_values(&mdp.action_scope, &action.values);
        let reward = mdp.reward_at(s_idx, a_idx);
        discounted_return += discount * reward;
        discount *= tree.discount;
        steps.push(EpisodeStep { state: state.values, action: action.values, reward });
        s_idx = sample_row(mdp.transition_row(s_idx, a_idx), rng.gen::<f64>());
    }
    Ok(Episode { steps, discounted_return })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasicSubsystem, Model, VariableDecl};
    use crate::models;
    use crate::validate::DEFAULT_FLAT_CAP;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    /// The two-subsystem series model with its per-subsystem value tables at
    /// the optimum: V_up = (54, 60) over x, V_down = (0, 10) over y.
    fn tandem_qs() -> (SubsystemTree, Vec<LocalQ>) {
        let tree = models::tandem();
        let qs = compute_q(&tree, &[vec![54.0, 60.0], vec![0.0, 10.0]]).unwrap();
        (tree, qs)
    }

    fn state_of(tree: &SubsystemTree, values: Vec<usize>) -> Assignment {
        Assignment::new(&tree.model, tree.tree_internal(), values).unwrap()
    }

    #[test]
    fn q_tables_pin_the_golden_numbers() {
        let (_, qs) = tandem_qs();
        // upstream over (x, a): R - 3x plus 0.9 * V_up(a)
        let up = &qs[0].table;
        assert_close(up[0], 48.6, 1e-12); // x=0 a=0
        assert_close(up[1], 54.0, 1e-12); // x=0 a=1
        assert_close(up[2], 45.6, 1e-12); // x=1 a=0
        assert_close(up[3], 51.0, 1e-12); // x=1 a=1
        // downstream over (x, y, b): 10y plus 0.9 * V_down(b AND x)
        let down = &qs[1].table;
        assert_eq!(
            down,
            &vec![0.0, 0.0, 10.0, 10.0, 0.0, 9.0, 10.0, 19.0],
        );
    }

    #[test]
    fn zero_discount_or_zero_values_reduce_q_to_rewards() {
        let t = models::tandem();
        let zero_v = vec![vec![0.0; 2], vec![0.0; 2]];
        let qs = compute_q(&t, &zero_v).unwrap();
        for (j, q) in qs.iter().enumerate() {
            assert_eq!(q.table, t.subsystems[j].reward);
        }
        let t0 = SubsystemTree::new(
            t.model.clone(),
            t.subsystems.clone(),
            t.parent.clone(),
            0.0,
        )
        .unwrap();
        let qs = compute_q(&t0, &[vec![54.0, 60.0], vec![0.0, 10.0]]).unwrap();
        for (j, q) in qs.iter().enumerate() {
            assert_eq!(q.table, t0.subsystems[j].reward);
        }
    }

    #[test]
    fn q_table_shape_is_checked() {
        let t = models::tandem();
        assert!(matches!(
            compute_q(&t, &[vec![0.0; 2]]),
            Err(ActionError::TableCount { want: 2, got: 1 })
        ));
        assert!(matches!(
            compute_q(&t, &[vec![0.0; 3], vec![0.0; 2]]),
            Err(ActionError::TableLength { .. })
        ));
    }

    #[test]
    fn golden_pair_actions_follow_the_exact_policy() {
        let (tree, qs) = tandem_qs();
        let cases = [
            (vec![0, 0], vec![1, 0]), // push x up; y unreachable this step, b ties to 0
            (vec![0, 1], vec![1, 0]),
            (vec![1, 0], vec![1, 1]), // keep x up and claim y
            (vec![1, 1], vec![1, 1]),
        ];
        for (state, want) in cases {
            let action = select_action(&tree, &qs, &state_of(&tree, state.clone())).unwrap();
            assert_eq!(action.values, want, "state {:?}", state);
        }
    }

    #[test]
    fn single_subsystem_is_a_plain_argmax_with_lexicographic_ties() {
        let model = Model::new(vec![
            VariableDecl::numbered("s", 2),
            VariableDecl::numbered("u", 3),
        ])
        .unwrap();
        // scope (s, u): at s=0 the maximum is shared by u=1 and u=2
        let sub = BasicSubsystem::new(
            &model,
            "only",
            model.scope_of(&["s"]).unwrap(),
            model.scope_of(&["u"]).unwrap(),
            vec![0.0, 4.0, 4.0, 1.0, 0.0, 7.0],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let tree = SubsystemTree::new(model, vec![sub], vec![None], 0.9).unwrap();
        let qs = compute_q(&tree, &[vec![0.0, 0.0]]).unwrap();
        let action = select_action(&tree, &qs, &state_of(&tree, vec![0])).unwrap();
        assert_eq!(action.values, vec![1]);
        let action = select_action(&tree, &qs, &state_of(&tree, vec![1])).unwrap();
        assert_eq!(action.values, vec![2]);
    }

    /// Two subsystems steering one shared lever, the child with a private
    /// knob on top. The parent alone would flip the lever; the child's stake
    /// outweighs it.
    fn lever_tree(child_reward: Vec<f64>) -> SubsystemTree {
        let model = Model::new(vec![
            VariableDecl::numbered("x", 2),
            VariableDecl::numbered("y", 2),
            VariableDecl::numbered("lever", 2),
            VariableDecl::numbered("m", 2),
        ])
        .unwrap();
        let parent = BasicSubsystem::new(
            &model,
            "front",
            model.scope_of(&["x"]).unwrap(),
            model.scope_of(&["lever"]).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        // scope (y, lever, m): y' = lever XOR m
        let mut cpt = Vec::new();
        for _y in 0..2 {
            for lever in 0..2 {
                for m in 0..2 {
                    if lever != m {
                        cpt.extend([0.0, 1.0]);
                    } else {
                        cpt.extend([1.0, 0.0]);
                    }
                }
            }
        }
        let child = BasicSubsystem::new(
            &model,
            "back",
            model.scope_of(&["y"]).unwrap(),
            model.scope_of(&["lever", "m"]).unwrap(),
            child_reward,
            cpt,
        )
        .unwrap();
        SubsystemTree::new(model, vec![parent, child], vec![None, Some(0)], 0.9).unwrap()
    }

    #[test]
    fn shared_action_weighs_both_subsystems() {
        // child at y=0: lever=0 pays 4 (m=0); lever=1 pays at most 2.2 (m=1)
        let tree = lever_tree(vec![4.0, 0.0, 2.0, 2.2, 4.0, 0.0, 2.0, 2.2]);
        let qs = compute_q(&tree, &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let state = state_of(&tree, vec![0, 0]);
        let (action, trace) = select_action_traced(&tree, &qs, &state).unwrap();
        // parent alone prefers lever=1 (reward 1 vs 0); jointly 0+4 beats 1+2.2
        assert_eq!(action.values, vec![0, 0]);
        let strat = &trace.strategies[1];
        assert_eq!(strat.shared.names(&tree.model), vec!["lever"]);
        assert_eq!(strat.values, vec![4.0, 2.2]);
        assert_eq!(strat.argmax, vec![vec![0, 0], vec![1, 1]]);
        assert_eq!(trace.strategies[0].values, vec![4.0]);

        // raising the lever=1 branch to an exact joint tie keeps lever=0
        let tree = lever_tree(vec![4.0, 0.0, 3.0, 3.0, 4.0, 0.0, 3.0, 3.0]);
        let qs = compute_q(&tree, &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let action = select_action(&tree, &qs, &state).unwrap();
        assert_eq!(action.values, vec![0, 0]);
    }

    #[test]
    fn two_pass_selection_matches_brute_force_on_every_fixture() {
        use rand::Rng;
        let fixtures: Vec<SubsystemTree> = vec![
            models::tandem(),
            models::chain3(),
            models::engine(),
            models::duplex(),
            models::uniform_chain(4),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for tree in &fixtures {
            for _round in 0..5 {
                let v: Vec<Vec<f64>> = tree
                    .subsystems
                    .iter()
                    .map(|s| {
                        (0..tree.model.scope_count(&s.internal))
                            .map(|_| rng.gen_range(-10.0..10.0))
                            .collect()
                    })
                    .collect();
                let qs = compute_q(tree, &v).unwrap();
                let internal = tree.tree_internal();
                for s_idx in 0..tree.model.scope_count(&internal) {
                    let state = tree.model.assignment_at(&internal, s_idx);
                    let chosen = select_action(tree, &qs, &state).unwrap();
                    let value = joint_q_value(tree, &qs, &state, &chosen).unwrap();
                    let (_, best) = brute_force_action(tree, &qs, &state, 1 << 12).unwrap();
                    assert_eq!(value, best, "tree with {} subsystems, state {}", tree.len(), s_idx);
                }
            }
        }
    }

    #[test]
    fn each_subsystem_observes_only_its_scope() {
        let tree = models::engine();
        let qs = compute_q(&tree, &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let state = state_of(&tree, vec![1, 0, 1]);
        let (_, trace) = select_action_traced(&tree, &qs, &state).unwrap();
        let internal = tree.tree_internal();
        for (j, sub) in tree.subsystems.iter().enumerate() {
            for &id in &trace.observed[j] {
                assert!(sub.scope.contains(id), "{} read {}", sub.name, tree.model.decl(id).name);
            }
            // and it read its whole slice of the state, nothing less
            assert_eq!(trace.observed[j].len(), sub.scope.intersect(&internal).len());
        }
    }

    #[test]
    fn missing_state_variable_is_an_input_error() {
        let (tree, qs) = tandem_qs();
        let partial =
            Assignment::new(&tree.model, tree.model.scope_of(&["x"]).unwrap(), vec![0]).unwrap();
        match select_action(&tree, &qs, &partial) {
            Err(ActionError::MissingStateVariable(var)) => assert_eq!(var, "y"),
            other => panic!("expected a missing-variable error, got {:?}", other),
        }
    }

    #[test]
    fn disconnected_shared_action_is_rejected() {
        // t is shared by the two ends of a three-link chain but absent from
        // the middle scope; tree construction allows it, selection must not.
        let model = Model::new(vec![
            VariableDecl::numbered("x1", 2),
            VariableDecl::numbered("x2", 2),
            VariableDecl::numbered("x3", 2),
            VariableDecl::numbered("t", 2),
        ])
        .unwrap();
        let copy_cpt = |n: usize| -> Vec<f64> {
            (0..n).flat_map(|_| [1.0, 0.0]).collect()
        };
        let m1 = BasicSubsystem::new(
            &model,
            "m1",
            model.scope_of(&["x1"]).unwrap(),
            model.scope_of(&["t"]).unwrap(),
            vec![0.0; 4],
            copy_cpt(4),
        )
        .unwrap();
        let m2 = BasicSubsystem::new(
            &model,
            "m2",
            model.scope_of(&["x2"]).unwrap(),
            model.scope_of(&["x1"]).unwrap(),
            vec![0.0; 4],
            copy_cpt(4),
        )
        .unwrap();
        let m3 = BasicSubsystem::new(
            &model,
            "m3",
            model.scope_of(&["x3"]).unwrap(),
            model.scope_of(&["x2", "t"]).unwrap(),
            vec![0.0; 8],
            copy_cpt(8),
        )
        .unwrap();
        let tree =
            SubsystemTree::new(model, vec![m1, m2, m3], vec![None, Some(0), Some(1)], 0.9).unwrap();
        let qs = compute_q(&tree, &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let state = state_of(&tree, vec![0, 0, 0]);
        assert!(matches!(
            select_action(&tree, &qs, &state),
            Err(ActionError::SharedActionOffPath { .. })
        ));
    }

    #[test]
    fn upward_max_work_grows_linearly_with_chain_length() {
        let mut ops = Vec::new();
        for n in 2..=12 {
            let tree = models::uniform_chain(n);
            let v: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; 2]).collect();
            let qs = compute_q(&tree, &v).unwrap();
            let state = state_of(&tree, vec![0; n]);
            let (_, trace) = select_action_traced(&tree, &qs, &state).unwrap();
            ops.push(trace.max_ops);
        }
        let per_link = ops[1] - ops[0];
        assert!(per_link > 0);
        for w in ops.windows(2) {
            assert_eq!(w[1] - w[0], per_link, "op counts {:?}", ops);
        }
    }

    #[test]
    fn golden_episode_accumulates_the_start_state_value() {
        let (tree, qs) = tandem_qs();
        let start = state_of(&tree, vec![0, 0]);
        let ep = simulate_episode(&tree, &qs, &start, 50, 0, DEFAULT_FLAT_CAP).unwrap();
        assert_eq!(ep.steps.len(), 50);
        // x' = a and y' = b AND x are deterministic, so the path is exact:
        // one free step, one -3 step to raise x, then 7 per step at (1,1).
        assert_eq!(ep.steps[0].state, vec![0, 0]);
        assert_eq!(ep.steps[0].action, vec![1, 0]);
        assert_eq!(ep.steps[0].reward, 0.0);
        assert_eq!(ep.steps[1].state, vec![1, 0]);
        assert_eq!(ep.steps[1].action, vec![1, 1]);
        assert_eq!(ep.steps[1].reward, -3.0);
        for step in &ep.steps[2..] {
            assert_eq!(step.state, vec![1, 1]);
            assert_eq!(step.reward, 7.0);
        }
        let truncation = 0.9f64.powi(50) * 70.0;
        assert_close(ep.discounted_return, 54.0, truncation + 1e-9);
        // and the exact truncated sum, for good measure
        let exact = 54.0 - truncation;
        assert_close(ep.discounted_return, exact, 1e-9);
    }

    #[test]
    fn horizon_one_returns_the_immediate_reward() {
        let (tree, qs) = tandem_qs();
        let start = state_of(&tree, vec![1, 1]);
        let ep = simulate_episode(&tree, &qs, &start, 1, 42, DEFAULT_FLAT_CAP).unwrap();
        assert_eq!(ep.steps.len(), 1);
        assert_eq!(ep.discounted_return, 7.0);
    }

    #[test]
    fn zero_rewards_return_zero() {
        let tree = models::tandem();
        let mut subs = tree.subsystems.clone();
        for s in &mut subs {
            s.reward.iter_mut().for_each(|r| *r = 0.0);
        }
        let tree = SubsystemTree::new(tree.model.clone(), subs, tree.parent.clone(), 0.9).unwrap();
        let qs = compute_q(&tree, &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let start = state_of(&tree, vec![0, 1]);
        let ep = simulate_episode(&tree, &qs, &start, 10, 3, DEFAULT_FLAT_CAP).unwrap();
        assert_eq!(ep.discounted_return, 0.0);
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let tree = models::engine();
        let qs = compute_q(&tree, &[vec![0.0, 4.0], vec![1.0, 2.0], vec![0.0, 8.0]]).unwrap();
        let start = state_of(&tree, vec![0, 0, 0]);
        let a = simulate_episode(&tree, &qs, &start, 30, 7, DEFAULT_FLAT_CAP).unwrap();
        let b = simulate_episode(&tree, &qs, &start, 30, 7, DEFAULT_FLAT_CAP).unwrap();
        assert_eq!(a, b);
        let c = simulate_episode(&tree, &qs, &start, 30, 8, DEFAULT_FLAT_CAP).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn episode_refusals() {
        let (tree, qs) = tandem_qs();
        let start = state_of(&tree, vec![0, 0]);
        assert!(matches!(
            simulate_episode(&tree, &qs, &start, 0, 0, DEFAULT_FLAT_CAP),
            Err(ActionError::ZeroHorizon)
        ));
        assert!(matches!(
            simulate_episode(&tree, &qs, &start, 5, 0, 3),
            Err(ActionError::Flatten(FlattenError::TooLarge { pairs: 16, cap: 3 }))
        ));
    }
}
