//! Seeded random instances for property tests: consistent subsystem trees in
//! several shapes, matching relevance weights, and small feasible LPs.
//!
//! Everything is driven by a caller-supplied RNG, so a fixed seed pins the
//! instance. Generated trees always pass `validate`:
//!
//! * variables spread only along tree edges (a child picks up variables from
//!   its parent's scope and nowhere else), so both running-intersection
//!   properties hold by construction;
//! * a variable internal to several subsystems evolves by one global
//!   per-variable table wherever it appears, so next-step marginals agree;
//! * weights are products of per-variable tables under a common total, which
//!   keeps totals equal and weight marginals consistent on shared variables.

use rand::Rng;

use crate::lp::LpProblem;
use crate::model::{
    BasicSubsystem, Model, Projection, RelevanceWeights, Scope, SubsystemTree, VariableDecl,
};

/// Tree skeleton used for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// parent[j] = j - 1
    Chain,
    /// parent[j] = 0
    Star,
    /// parent[j] drawn uniformly from 0..j
    RandomParent,
}

/// Knobs for `random_tree`. All probabilities are per opportunity, not per
/// instance; set one to 0 or 1 to forbid or force the feature.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub min_subsystems: usize,
    pub max_subsystems: usize,
    /// Hard cap on total variables; all variables are binary, so the joint
    /// assignment space is 2^max_vars at worst.
    pub max_vars: usize,
    /// Fixed skeleton; `None` picks one per instance.
    pub shape: Option<Shape>,
    /// Chance a subsystem gets a second fresh internal variable.
    pub p_second_internal: f64,
    /// Chance a child co-owns one of its parent's internal variables.
    pub p_shared_internal: f64,
    /// Chance a subsystem gets a private action variable.
    pub p_private_action: f64,
    /// Chance a child also observes one of its parent's external inputs.
    pub p_adopt_parent_external: f64,
    /// Chance a child shares no variable with its parent at all.
    pub p_decoupled: f64,
}

impl Default for GenConfig {
    /// Desk-scale defaults: 2..=4 subsystems over at most 12 binary
    /// variables, so the joint space stays enumerable for the exact oracles.
    fn default() -> GenConfig {
        GenConfig {
            min_subsystems: 2,
            max_subsystems: 4,
            max_vars: 12,
            shape: None,
            p_second_internal: 0.35,
            p_shared_internal: 0.25,
            p_private_action: 0.6,
            p_adopt_parent_external: 0.4,
            p_decoupled: 0.1,
        }
    }
}

struct VarPool {
    decls: Vec<VariableDecl>,
    internal_count: Vec<usize>,
    max_vars: usize,
}

impl VarPool {
    fn fresh(&mut self, prefix: &str) -> Option<usize> {
        if self.decls.len() >= self.max_vars {
            return None;
        }
        let id = self.decls.len();
        self.decls.push(VariableDecl::numbered(format!("{}{}", prefix, id), 2));
        self.internal_count.push(0);
        Some(id)
    }
}

/// Draws one consistent subsystem tree and matching weights.
pub fn random_tree<R: Rng>(rng: &mut R, cfg: &GenConfig) -> (SubsystemTree, RelevanceWeights) {
    assert!(cfg.min_subsystems >= 1 && cfg.min_subsystems <= cfg.max_subsystems);
    assert!(cfg.max_vars >= 1);
    let n = rng.gen_range(cfg.min_subsystems..=cfg.max_subsystems);
    let shape = cfg.shape.unwrap_or_else(|| {
        [Shape::Chain, Shape::Star, Shape::RandomParent][rng.gen_range(0..3)]
    });
    let mut parent: Vec<Option<usize>> = vec![None];
    for j in 1..n {
        parent.push(Some(match shape {
            Shape::Chain => j - 1,
            Shape::Star => 0,
            Shape::RandomParent => rng.gen_range(0..j),
        }));
    }

    // Structure first, tables second: whether a variable's dynamics must use
    // the shared per-variable table is only known once every subsystem has
    // claimed its internal set.
    let mut pool = VarPool { decls: Vec::new(), internal_count: Vec::new(), max_vars: cfg.max_vars };
    let mut internals: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut externals: Vec<Vec<usize>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut int_j: Vec<usize> = Vec::new();
        let mut ext_j: Vec<usize> = Vec::new();
        let decoupled = parent[j].is_some() && rng.gen_bool(cfg.p_decoupled);
        if let Some(p) = parent[j] {
            if !decoupled && rng.gen_bool(cfg.p_shared_internal) {
                int_j.push(internals[p][rng.gen_range(0..internals[p].len())]);
            }
        }
        let want = 1 + usize::from(rng.gen_bool(cfg.p_second_internal));
        while int_j.len() < want {
            match pool.fresh("x") {
                Some(id) => int_j.push(id),
                None => break,
            }
        }
        if int_j.is_empty() {
            // Variable budget exhausted: co-own something of the parent's
            // rather than emit an empty internal set. The root never lands
            // here because it draws before anyone else.
            let p = parent[j].expect("the root always gets a fresh variable");
            int_j.push(internals[p][rng.gen_range(0..internals[p].len())]);
        }

        if let Some(p) = parent[j] {
            if !decoupled {
                let co_owned = int_j.iter().any(|v| internals[p].contains(v));
                let mut picks: Vec<usize> =
                    internals[p].iter().copied().filter(|v| !int_j.contains(v)).collect();
                let mut k = if picks.is_empty() { 0 } else { rng.gen_range(0..=picks.len().min(2)) };
                if !co_owned && k == 0 && !picks.is_empty() {
                    // Not decoupled means at least one parent variable in scope.
                    k = 1;
                }
                for i in 0..k {
                    let r = rng.gen_range(i..picks.len());
                    picks.swap(i, r);
                }
                ext_j.extend_from_slice(&picks[..k]);
                if !externals[p].is_empty() && rng.gen_bool(cfg.p_adopt_parent_external) {
                    let v = externals[p][rng.gen_range(0..externals[p].len())];
                    if !ext_j.contains(&v) {
                        ext_j.push(v);
                    }
                }
            }
        }
        if rng.gen_bool(cfg.p_private_action) {
            if let Some(id) = pool.fresh("a") {
                ext_j.push(id);
            }
        }
        for &v in &int_j {
            pool.internal_count[v] += 1;
        }
        internals.push(int_j);
        externals.push(ext_j);
    }

    let shared: Vec<bool> = pool.internal_count.iter().map(|&c| c >= 2).collect();
    let model = Model::new(pool.decls).unwrap();
    // Self-dynamics for co-owned variables: next value depends only on the
    // current value, identically wherever the variable lives.
    let mut self_table = vec![[0.0f64; 2]; model.num_vars()];
    for (v, table) in self_table.iter_mut().enumerate() {
        if shared[v] {
            *table = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        }
    }

    let mut subsystems = Vec::with_capacity(n);
    for j in 0..n {
        let internal = Scope::new(&model, internals[j].clone()).unwrap();
        let external = Scope::new(&model, externals[j].clone()).unwrap();
        let scope = internal.union(&external);
        let n_scope = model.scope_count(&scope);
        let n_int = model.scope_count(&internal);
        let scale = rng.gen_range(0.5..4.0);
        let reward: Vec<f64> = (0..n_scope).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut cpt = Vec::with_capacity(n_scope * n_int);
        for i in 0..n_scope {
            let vals = model.values_at(&scope, i);
            let p_one: Vec<f64> = internal
                .ids()
                .iter()
                .map(|&v| {
                    if shared[v] {
                        self_table[v][vals[scope.position(v).unwrap()]]
                    } else {
                        rng.gen_range(0.05..0.95)
                    }
                })
                .collect();
            // Internal variables step independently given the current scope
            // assignment, so each row is an outer product of binary factors.
            for col in 0..n_int {
                let next = model.values_at(&internal, col);
                let mut p = 1.0;
                for (pos, &nv) in next.iter().enumerate() {
                    p *= if nv == 1 { p_one[pos] } else { 1.0 - p_one[pos] };
                }
                cpt.push(p);
            }
        }
        subsystems
            .push(BasicSubsystem::new(&model, format!("s{}", j), internal, external, reward, cpt).unwrap());
    }

    let discount = rng.gen_range(0.6..0.96);
    let tree = SubsystemTree::new(model, subsystems, parent, discount).unwrap();
    let weights = random_product_weights(rng, &tree);
    (tree, weights)
}

/// Random weights that always pass validation: one normalized table per
/// variable, each subsystem's entry the product of its variables' tables
/// times a common total. Totals agree exactly and marginals onto co-owned
/// variables coincide from both sides of every edge.
pub fn random_product_weights<R: Rng>(rng: &mut R, tree: &SubsystemTree) -> RelevanceWeights {
    let model = &tree.model;
    let q: Vec<[f64; 2]> = (0..model.num_vars())
        .map(|_| {
            let u = rng.gen_range(0.2..0.8);
            [u, 1.0 - u]
        })
        .collect();
    let total = rng.gen_range(0.5..2.0);
    let per = (0..tree.len())
        .map(|j| {
            let internal = &tree.subsystems[j].internal;
            (0..model.scope_count(internal))
                .map(|i| {
                    let vals = model.values_at(internal, i);
                    let mut w = total;
                    for (pos, &id) in internal.ids().iter().enumerate() {
                        w *= q[id][vals[pos]];
                    }
                    w
                })
                .collect()
        })
        .collect();
    RelevanceWeights::new(tree, per).unwrap()
}

/// A joint state-relevance vector over the tree-internal scope whose marginal
/// onto each subsystem's internal space reproduces that subsystem's weights,
/// for use as the exact oracle's objective. Assumes each weight table factors
/// across its variables, which holds for `random_product_weights`, all-ones,
/// and uniform weights; the per-variable factors are recovered by
/// marginalizing out of whichever subsystem owns the variable.
pub fn joint_alpha(tree: &SubsystemTree, weights: &RelevanceWeights) -> Vec<f64> {
    let model = &tree.model;
    let state = tree.tree_internal();
    let total = weights.total(tree.root);
    let mut q: Vec<Option<Vec<f64>>> = vec![None; model.num_vars()];
    for j in 0..tree.len() {
        let internal = &tree.subsystems[j].internal;
        for &v in internal.ids() {
            if q[v].is_some() {
                continue;
            }
            let onto = Scope::new(model, vec![v]).unwrap();
            let proj = Projection::new(model, internal, &onto).unwrap();
            let marg = proj.marginalize(&weights.per_subsystem[j]);
            let sum: f64 = marg.iter().sum();
            q[v] = Some(marg.iter().map(|m| m / sum).collect());
        }
    }
    (0..model.scope_count(&state))
        .map(|i| {
            let vals = model.values_at(&state, i);
            let mut a = total;
            for (pos, &v) in state.ids().iter().enumerate() {
                a *= q[v].as_ref().unwrap()[vals[pos]];
            }
            a
        })
        .collect()
}

/// A coupled chain of `n` subsystems, each with one state variable, one
/// private action variable, and its predecessor's state in scope. Local scope
/// size is constant along the chain, which makes these the yardstick for
/// checking that action selection work grows linearly with length.
pub fn random_chain<R: Rng>(rng: &mut R, n: usize) -> (SubsystemTree, RelevanceWeights) {
    random_tree(
        rng,
        &GenConfig {
            min_subsystems: n,
            max_subsystems: n,
            max_vars: 2 * n,
            shape: Some(Shape::Chain),
            p_second_internal: 0.0,
            p_shared_internal: 0.0,
            p_private_action: 1.0,
            p_adopt_parent_external: 0.0,
            p_decoupled: 0.0,
        },
    )
}

/// A hub with `n - 1` leaves, each observing the hub's state and steering a
/// private action variable.
pub fn random_star<R: Rng>(rng: &mut R, n: usize) -> (SubsystemTree, RelevanceWeights) {
    random_tree(
        rng,
        &GenConfig {
            min_subsystems: n,
            max_subsystems: n,
            max_vars: 2 * n,
            shape: Some(Shape::Star),
            p_second_internal: 0.0,
            p_shared_internal: 0.0,
            p_private_action: 1.0,
            p_adopt_parent_external: 0.0,
            p_decoupled: 0.0,
        },
    )
}

/// A root with two structurally identical branches: same shapes, same table
/// values, different variables. The branch roots sit at indices 1 and
/// 1 + depth and head interchangeable subtrees, which is exactly what the
/// planner's reuse machinery feeds on. Weights are all-ones, so the branches
/// also share a solve convention.
pub fn random_twin_tree<R: Rng>(rng: &mut R) -> (SubsystemTree, RelevanceWeights) {
    let depth = rng.gen_range(1..=2usize);
    struct Level {
        has_action: bool,
        p_one: Vec<f64>,
        reward: Vec<f64>,
    }
    let levels: Vec<Level> = (0..depth)
        .map(|_| {
            let has_action = rng.gen_bool(0.5);
            let n_scope = if has_action { 8 } else { 4 };
            let scale = rng.gen_range(0.5..4.0);
            Level {
                has_action,
                p_one: (0..n_scope).map(|_| rng.gen_range(0.05..0.95)).collect(),
                reward: (0..n_scope).map(|_| rng.gen_range(-scale..scale)).collect(),
            }
        })
        .collect();
    let root_p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let root_scale = rng.gen_range(0.5..4.0);
    let root_reward = vec![rng.gen_range(-root_scale..root_scale), rng.gen_range(-root_scale..root_scale)];
    let discount = rng.gen_range(0.6..0.96);

    let mut decls: Vec<VariableDecl> = Vec::new();
    let fresh = |decls: &mut Vec<VariableDecl>, prefix: &str| {
        let id = decls.len();
        decls.push(VariableDecl::numbered(format!("{}{}", prefix, id), 2));
        id
    };
    let x_root = fresh(&mut decls, "x");
    // A branch node's variables are created parent-first, so within each
    // scope the id order is (predecessor state, own state, own action). One
    // table in that layout therefore serves both branches verbatim.
    let mut branch_vars: Vec<Vec<(usize, Option<usize>)>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut vars = Vec::with_capacity(depth);
        for level in &levels {
            let x = fresh(&mut decls, "x");
            let a = level.has_action.then(|| fresh(&mut decls, "a"));
            vars.push((x, a));
        }
        branch_vars.push(vars);
    }
    let model = Model::new(decls).unwrap();

    let root_cpt = vec![1.0 - root_p[0], root_p[0], 1.0 - root_p[1], root_p[1]];
    let mut subsystems = vec![BasicSubsystem::new(
        &model,
        "s0",
        Scope::new(&model, vec![x_root]).unwrap(),
        Scope::empty(),
        root_reward,
        root_cpt,
    )
    .unwrap()];
    let mut parent = vec![None];
    for (b, vars) in branch_vars.iter().enumerate() {
        for (lev, &(x, a)) in vars.iter().enumerate() {
            let prev = if lev == 0 { x_root } else { vars[lev - 1].0 };
            let mut ext = vec![prev];
            ext.extend(a);
            let mut cpt = Vec::with_capacity(2 * levels[lev].p_one.len());
            for &p in &levels[lev].p_one {
                cpt.push(1.0 - p);
                cpt.push(p);
            }
            subsystems.push(
                BasicSubsystem::new(
                    &model,
                    format!("s{}", subsystems.len()),
                    Scope::new(&model, vec![x]).unwrap(),
                    Scope::new(&model, ext).unwrap(),
                    levels[lev].reward.clone(),
                    cpt,
                )
                .unwrap(),
            );
            parent.push(Some(if lev == 0 { 0 } else { 1 + b * depth + lev - 1 }));
        }
    }
    let tree = SubsystemTree::new(model, subsystems, parent, discount).unwrap();
    let weights = RelevanceWeights::all_ones(&tree);
    (tree, weights)
}

/// Per-subsystem value tables with entries in [-5, 5], shaped like the
/// planner's output.
pub fn random_value_tables<R: Rng>(rng: &mut R, tree: &SubsystemTree) -> Vec<Vec<f64>> {
    (0..tree.len())
        .map(|j| {
            let n = tree.model.scope_count(&tree.subsystems[j].internal);
            (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
        })
        .collect()
}

/// A uniform random assignment over the tree-internal scope.
pub fn random_state<R: Rng>(rng: &mut R, tree: &SubsystemTree) -> crate::model::Assignment {
    let scope = tree.tree_internal();
    let n = tree.model.scope_count(&scope);
    tree.model.assignment_at(&scope, rng.gen_range(0..n))
}

/// A feasible bounded minimization with up to `max_vars` variables: integer
/// coefficients, a planted nonnegative point kept feasible by slack on every
/// inequality, nonnegative costs over nonnegative variables for boundedness.
/// Roughly a third of the rows are pinned as equalities through the planted
/// point.
pub fn random_feasible_lp<R: Rng>(rng: &mut R, max_vars: usize) -> LpProblem {
    let nv = rng.gen_range(1..=max_vars);
    let nr = rng.gen_range(1..=2 * nv);
    let mut lp = LpProblem::new(nv);
    let xhat: Vec<f64> = (0..nv).map(|_| rng.gen_range(0..=3) as f64).collect();
    for j in 0..nv {
        lp.set_lower(j, 0.0);
        lp.set_objective_coef(j, rng.gen_range(0..=4) as f64);
    }
    for _ in 0..nr {
        let row: Vec<f64> = (0..nv).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let at_xhat: f64 = row.iter().zip(&xhat).map(|(a, x)| a * x).sum();
        if rng.gen_bool(1.0 / 3.0) {
            lp.add_eq(row, at_xhat);
        } else {
            lp.add_ge(row, at_xhat - rng.gen_range(0..=2) as f64);
        }
    }
    lp
}
