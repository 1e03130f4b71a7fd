//! Core model types: variables, scopes, assignments, subsystems, and
//! subsystem trees.
//!
//! A model is a set of named finite-domain variables. A subsystem is a small
//! MDP fragment over a subset of those variables: it owns the dynamics of its
//! internal variables and treats the rest of its scope as externally supplied
//! inputs. Subsystems are arranged in a tree; the separator between a node and
//! its parent is the intersection of their scopes.
//!
//! All tables in the crate are laid out in a single canonical order: scopes
//! keep their variables in global declaration order, and assignments to a
//! scope are enumerated row-major with the last variable varying fastest.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for CPT row sums.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate variable name {0:?}")]
    DuplicateVariable(String),
    #[error("variable {0:?} has an empty domain")]
    EmptyDomain(String),
    #[error("variable {0:?} has duplicate domain value {1:?}")]
    DuplicateDomainValue(String, String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("duplicate variable in scope: {0:?}")]
    DuplicateInScope(String),
    #[error("scope {sub} is not a subset of {sup}")]
    NotSubscope { sub: String, sup: String },
    #[error("assignment value {value} out of range for variable {var:?}")]
    ValueOutOfRange { var: String, value: usize },
    #[error("assignment length {got} does not match scope size {want}")]
    AssignmentLength { got: usize, want: usize },
    #[error("scope assignment space too large to enumerate")]
    ScopeTooLarge,
    #[error("subsystem {name:?}: internal and external scopes overlap on {var:?}")]
    ScopesOverlap { name: String, var: String },
    #[error("subsystem {name:?}: internal scope is empty")]
    EmptyInternal { name: String },
    #[error("subsystem {name:?}: expected {want} reward entries, got {got}")]
    RewardLength { name: String, want: usize, got: usize },
    #[error("subsystem {name:?}: expected {want} cpt entries, got {got}")]
    CptLength { name: String, want: usize, got: usize },
    #[error("subsystem {name:?}: non-finite reward entry at index {index}")]
    RewardNotFinite { name: String, index: usize },
    #[error("subsystem {name:?}: cpt entry at index {index} is not a probability ({value})")]
    CptEntryInvalid { name: String, index: usize, value: f64 },
    #[error("subsystem {name:?}: cpt row {row} sums to {sum}, expected 1")]
    CptRowSum { name: String, row: usize, sum: f64 },
    #[error("duplicate subsystem name {0:?}")]
    DuplicateSubsystem(String),
    #[error("parent map is not a tree: {0}")]
    NotATree(String),
    #[error("discount {0} outside [0, 1)")]
    BadDiscount(f64),
    #[error("group {0:?}: {1}")]
    BadGroup(String, String),
    #[error("weights for subsystem {name:?}: expected {want} entries, got {got}")]
    WeightsLength { name: String, want: usize, got: usize },
    #[error("weights for subsystem {name:?}: entry {index} is {value}, expected finite and nonnegative")]
    WeightsEntry { name: String, index: usize, value: f64 },
}

/// A named finite-domain variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    /// Domain value labels, in domain order.
    pub values: Vec<String>,
}

impl VariableDecl {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> VariableDecl {
        VariableDecl { name: name.into(), values }
    }

    /// Shorthand for a variable with domain {0, 1, ..., n-1}.
    pub fn numbered(name: impl Into<String>, n: usize) -> VariableDecl {
        VariableDecl {
            name: name.into(),
            values: (0..n).map(|v| v.to_string()).collect(),
        }
    }
}

/// Index of a variable in its model's declaration order.
pub type VarId = usize;

/// The variable universe of a model, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    vars: Vec<VariableDecl>,
    #[serde(skip)]
    by_name: BTreeMap<String, VarId>,
}

impl Model {
    pub fn new(vars: Vec<VariableDecl>) -> Result<Model, ModelError> {
        let mut by_name = BTreeMap::new();
        for (i, v) in vars.iter().enumerate() {
            if v.values.is_empty() {
                return Err(ModelError::EmptyDomain(v.name.clone()));
            }
            let mut seen = BTreeMap::new();
            for val in &v.values {
                if seen.insert(val.clone(), ()).is_some() {
                    return Err(ModelError::DuplicateDomainValue(v.name.clone(), val.clone()));
                }
            }
            if by_name.insert(v.name.clone(), i).is_some() {
                return Err(ModelError::DuplicateVariable(v.name.clone()));
            }
        }
        Ok(Model { vars, by_name })
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn decl(&self, id: VarId) -> &VariableDecl {
        &self.vars[id]
    }

    pub fn card(&self, id: VarId) -> usize {
        self.vars[id].values.len()
    }

    pub fn var(&self, name: &str) -> Result<VarId, ModelError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownVariable(name.to_string()))
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.clone(), i))
            .collect();
    }

    pub fn scope_of(&self, names: &[&str]) -> Result<Scope, ModelError> {
        let ids = names.iter().map(|n| self.var(n)).collect::<Result<Vec<_>, _>>()?;
        Scope::new(self, ids)
    }

    /// Number of assignments to a scope (product of domain sizes).
    pub fn scope_count(&self, scope: &Scope) -> usize {
        scope.ids.iter().map(|&id| self.card(id)).product()
    }

    /// Like `scope_count` but refuses to overflow.
    pub fn scope_count_checked(&self, scope: &Scope) -> Result<usize, ModelError> {
        let mut n: usize = 1;
        for &id in &scope.ids {
            n = n.checked_mul(self.card(id)).ok_or(ModelError::ScopeTooLarge)?;
        }
        Ok(n)
    }

    /// Canonical enumeration of all assignments to `scope`: row-major with the
    /// last (highest-declared) variable varying fastest. The position of each
    /// assignment in the returned list is its canonical index.
    pub fn assignments(&self, scope: &Scope) -> Vec<Assignment> {
        let n = self.scope_count(scope);
        (0..n).map(|i| self.assignment_at(scope, i)).collect()
    }

    /// The assignment at canonical index `idx`.
    pub fn assignment_at(&self, scope: &Scope, idx: usize) -> Assignment {
        Assignment { scope: scope.clone(), values: self.values_at(scope, idx) }
    }

    /// Value indices of the assignment at canonical index `idx`.
    pub fn values_at(&self, scope: &Scope, idx: usize) -> Vec<usize> {
        let mut values = vec![0usize; scope.len()];
        let mut rem = idx;
        for pos in (0..scope.len()).rev() {
            let card = self.card(scope.ids[pos]);
            values[pos] = rem % card;
            rem /= card;
        }
        values
    }

    /// Canonical index of an assignment given by value indices in scope order.
    pub fn index_of_values(&self, scope: &Scope, values: &[usize]) -> usize {
        debug_assert_eq!(values.len(), scope.len());
        let mut idx = 0usize;
        for pos in 0..scope.len() {
            idx = idx * self.card(scope.ids[pos]) + values[pos];
        }
        idx
    }
}

/// An ordered set of variables. The order is always global declaration order,
/// so any two scopes over the same variables are identical.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scope {
    ids: Vec<VarId>,
}

impl Scope {
    pub fn new(model: &Model, mut ids: Vec<VarId>) -> Result<Scope, ModelError> {
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(ModelError::DuplicateInScope(model.decl(w[0]).name.clone()));
            }
        }
        Ok(Scope { ids })
    }

    pub fn empty() -> Scope {
        Scope { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: VarId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Position of a variable within this scope, if present.
    pub fn position(&self, id: VarId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn is_subset_of(&self, other: &Scope) -> bool {
        self.ids.iter().all(|id| other.contains(*id))
    }

    pub fn union(&self, other: &Scope) -> Scope {
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().copied());
        ids.sort_unstable();
        ids.dedup();
        Scope { ids }
    }

    pub fn intersect(&self, other: &Scope) -> Scope {
        Scope { ids: self.ids.iter().copied().filter(|id| other.contains(*id)).collect() }
    }

    pub fn difference(&self, other: &Scope) -> Scope {
        Scope { ids: self.ids.iter().copied().filter(|id| !other.contains(*id)).collect() }
    }

    pub fn names<'m>(&self, model: &'m Model) -> Vec<&'m str> {
        self.ids.iter().map(|&id| model.decl(id).name.as_str()).collect()
    }
}

/// An assignment of values (by domain index) to every variable of a scope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub scope: Scope,
    pub values: Vec<usize>,
}

impl Assignment {
    pub fn new(model: &Model, scope: Scope, values: Vec<usize>) -> Result<Assignment, ModelError> {
        if values.len() != scope.len() {
            return Err(ModelError::AssignmentLength { got: values.len(), want: scope.len() });
        }
        for (pos, &v) in values.iter().enumerate() {
            let id = scope.ids[pos];
            if v >= model.card(id) {
                return Err(ModelError::ValueOutOfRange { var: model.decl(id).name.clone(), value: v });
            }
        }
        Ok(Assignment { scope, values })
    }

    pub fn empty() -> Assignment {
        Assignment { scope: Scope::empty(), values: Vec::new() }
    }

    pub fn value_of(&self, id: VarId) -> Option<usize> {
        self.scope.position(id).map(|p| self.values[p])
    }

    /// Restriction onto a subscope. Errors if `sub` is not a subset.
    pub fn restrict(&self, model: &Model, sub: &Scope) -> Result<Assignment, ModelError> {
        if !sub.is_subset_of(&self.scope) {
            return Err(ModelError::NotSubscope {
                sub: format!("{:?}", sub.names(model)),
                sup: format!("{:?}", self.scope.names(model)),
            });
        }
        let values = sub
            .ids
            .iter()
            .map(|&id| self.values[self.scope.position(id).unwrap()])
            .collect();
        Ok(Assignment { scope: sub.clone(), values })
    }

    pub fn index(&self, model: &Model) -> usize {
        model.index_of_values(&self.scope, &self.values)
    }

    pub fn display<'a>(&'a self, model: &'a Model) -> AssignmentDisplay<'a> {
        AssignmentDisplay { a: self, model }
    }
}

pub struct AssignmentDisplay<'a> {
    a: &'a Assignment,
    model: &'a Model,
}

impl fmt::Display for AssignmentDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (pos, &id) in self.a.scope.ids.iter().enumerate() {
            if !first {
                write!(f, " ")?;
            }
            first = false;
            let decl = self.model.decl(id);
            write!(f, "{}={}", decl.name, decl.values[self.a.values[pos]])?;
        }
        if first {
            write!(f, "(empty)")?;
        }
        Ok(())
    }
}

/// Precomputed index map from assignments of one scope onto a subscope.
///
/// `map[i]` is the canonical index, in the subscope, of the restriction of
/// the `from`-scope assignment with canonical index `i`.
#[derive(Debug, Clone)]
pub struct Projection {
    map: Vec<usize>,
    onto_count: usize,
}

impl Projection {
    pub fn new(model: &Model, from: &Scope, onto: &Scope) -> Result<Projection, ModelError> {
        if !onto.is_subset_of(from) {
            return Err(ModelError::NotSubscope {
                sub: format!("{:?}", onto.names(model)),
                sup: format!("{:?}", from.names(model)),
            });
        }
        let n = model.scope_count(from);
        let onto_count = model.scope_count(onto);
        // Stride of each from-position in the onto index (0 when absent).
        let mut stride = vec![0usize; from.len()];
        let mut s = 1usize;
        for pos in (0..onto.len()).rev() {
            let id = onto.ids[pos];
            stride[from.position(id).unwrap()] = s;
            s *= model.card(id);
        }
        let cards: Vec<usize> = from.ids.iter().map(|&id| model.card(id)).collect();
        let mut map = Vec::with_capacity(n);
        let mut values = vec![0usize; from.len()];
        let mut onto_idx = 0usize;
        for _ in 0..n {
            map.push(onto_idx);
            // Advance the odometer (last variable fastest).
            for pos in (0..from.len()).rev() {
                values[pos] += 1;
                onto_idx += stride[pos];
                if values[pos] < cards[pos] {
                    break;
                }
                onto_idx -= stride[pos] * cards[pos];
                values[pos] = 0;
            }
        }
        Ok(Projection { map, onto_count })
    }

    pub fn apply(&self, from_idx: usize) -> usize {
        self.map[from_idx]
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn onto_count(&self) -> usize {
        self.onto_count
    }

    /// Sums `table` (indexed by the from-scope) into a table over the subscope.
    pub fn marginalize(&self, table: &[f64]) -> Vec<f64> {
        debug_assert_eq!(table.len(), self.map.len());
        let mut out = vec![0.0; self.onto_count];
        for (i, &v) in table.iter().enumerate() {
            out[self.map[i]] += v;
        }
        out
    }
}

/// A small MDP fragment.
///
/// * `internal`: variables whose next-step distribution this subsystem owns.
/// * `external`: variables it observes but does not model.
/// * `reward`: one entry per scope assignment (canonical order).
/// * `cpt`: row per scope assignment, `internal_count` columns per row, giving
///   the distribution of the next-step internal assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicSubsystem {
    pub name: String,
    pub internal: Scope,
    pub external: Scope,
    pub scope: Scope,
    pub reward: Vec<f64>,
    pub cpt: Vec<f64>,
}

impl BasicSubsystem {
    pub fn new(
        model: &Model,
        name: impl Into<String>,
        internal: Scope,
        external: Scope,
        reward: Vec<f64>,
        cpt: Vec<f64>,
    ) -> Result<BasicSubsystem, ModelError> {
        let name = name.into();
        if internal.is_empty() {
            return Err(ModelError::EmptyInternal { name });
        }
        for &id in internal.ids() {
            if external.contains(id) {
                return Err(ModelError::ScopesOverlap { name, var: model.decl(id).name.clone() });
            }
        }
        let scope = internal.union(&external);
        let n_scope = model.scope_count_checked(&scope)?;
        let n_int = model.scope_count_checked(&internal)?;
        if reward.len() != n_scope {
            return Err(ModelError::RewardLength { name, want: n_scope, got: reward.len() });
        }
        if let Some(i) = reward.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::RewardNotFinite { name, index: i });
        }
        let want_cpt = n_scope
            .checked_mul(n_int)
            .ok_or(ModelError::ScopeTooLarge)?;
        if cpt.len() != want_cpt {
            return Err(ModelError::CptLength { name, want: want_cpt, got: cpt.len() });
        }
        for (i, &p) in cpt.iter().enumerate() {
            if !p.is_finite() || p < 0.0 || p > 1.0 + PROB_TOL {
                return Err(ModelError::CptEntryInvalid { name, index: i, value: p });
            }
        }
        for row in 0..n_scope {
            let sum: f64 = cpt[row * n_int..(row + 1) * n_int].iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(ModelError::CptRowSum { name, row, sum });
            }
        }
        Ok(BasicSubsystem { name, internal, external, scope, reward, cpt })
    }

    /// CPT row for a scope assignment index: distribution over next-step
    /// internal assignments.
    pub fn cpt_row(&self, model: &Model, scope_idx: usize) -> &[f64] {
        let n_int = model.scope_count(&self.internal);
        &self.cpt[scope_idx * n_int..(scope_idx + 1) * n_int]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0f64, |m, &r| m.max(r.abs()))
    }
}

/// A tree of subsystems with cached separator sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsystemTree {
    pub model: Model,
    pub subsystems: Vec<BasicSubsystem>,
    /// `parent[j] = None` exactly for the root.
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    pub discount: f64,
    #[serde(skip)]
    children: Vec<Vec<usize>>,
    /// `sepsets[j]` = scope(j) ∩ scope(parent(j)); empty scope at the root.
    #[serde(skip)]
    sepsets: Vec<Scope>,
    #[serde(skip)]
    depth: Vec<usize>,
}

impl SubsystemTree {
    pub fn new(
        model: Model,
        subsystems: Vec<BasicSubsystem>,
        parent: Vec<Option<usize>>,
        discount: f64,
    ) -> Result<SubsystemTree, ModelError> {
        if !(0.0..1.0).contains(&discount) {
            return Err(ModelError::BadDiscount(discount));
        }
        if parent.len() != subsystems.len() {
            return Err(ModelError::NotATree(format!(
                "parent map has {} entries for {} subsystems",
                parent.len(),
                subsystems.len()
            )));
        }
        let mut names = BTreeMap::new();
        for s in &subsystems {
            if names.insert(s.name.clone(), ()).is_some() {
                return Err(ModelError::DuplicateSubsystem(s.name.clone()));
            }
        }
        let roots: Vec<usize> = parent
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.is_none().then_some(i))
            .collect();
        if roots.len() != 1 {
            return Err(ModelError::NotATree(format!("{} roots", roots.len())));
        }
        let root = roots[0];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= subsystems.len() {
                    return Err(ModelError::NotATree(format!("parent index {} out of range", p)));
                }
                if p == i {
                    return Err(ModelError::NotATree(format!("subsystem {} is its own parent", i)));
                }
            }
        }
        // Reachability from the root doubles as a cycle check.
        let mut children = vec![Vec::new(); subsystems.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(i);
            }
        }
        let mut depth = vec![usize::MAX; subsystems.len()];
        let mut stack = vec![root];
        depth[root] = 0;
        let mut seen = 1;
        while let Some(j) = stack.pop() {
            for &c in &children[j] {
                if depth[c] != usize::MAX {
                    return Err(ModelError::NotATree("cycle detected".to_string()));
                }
                depth[c] = depth[j] + 1;
                seen += 1;
                stack.push(c);
            }
        }
        if seen != subsystems.len() {
            return Err(ModelError::NotATree(format!(
                "{} of {} subsystems reachable from the root",
                seen,
                subsystems.len()
            )));
        }
        let sepsets = (0..subsystems.len())
            .map(|j| match parent[j] {
                Some(p) => subsystems[j].scope.intersect(&subsystems[p].scope),
                None => Scope::empty(),
            })
            .collect();
        Ok(SubsystemTree { model, subsystems, parent, root, discount, children, sepsets, depth })
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        self.children[j].is_empty()
    }

    pub fn depth(&self, j: usize) -> usize {
        self.depth[j]
    }

    /// Separator between subsystem `j` and its parent; the empty scope at the
    /// root, whose single "assignment" indexes the root's always-zero message.
    pub fn sepset(&self, j: usize) -> &Scope {
        &self.sepsets[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.name == name)
    }

    /// Union of all internal scopes: the tree's state variables.
    pub fn tree_internal(&self) -> Scope {
        let mut s = Scope::empty();
        for sub in &self.subsystems {
            s = s.union(&sub.internal);
        }
        s
    }

    /// Variables in some scope but internal to no subsystem: the tree's
    /// action variables.
    pub fn tree_external(&self) -> Scope {
        let internal = self.tree_internal();
        let mut s = Scope::empty();
        for sub in &self.subsystems {
            s = s.union(&sub.scope);
        }
        s.difference(&internal)
    }

    /// Node indices ordered by decreasing depth (leaves before their parents),
    /// index order within a depth.
    pub fn depth_descending(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.depth[b].cmp(&self.depth[a]).then(a.cmp(&b)));
        order
    }

    /// Default box half-width for reward-message variables: an order of
    /// magnitude above the largest possible discounted reward magnitude, so
    /// the box only binds when the coupled LP is genuinely unbounded.
    pub fn default_message_bound(&self) -> f64 {
        let total: f64 = self.subsystems.iter().map(|s| s.max_abs_reward()).sum();
        10.0 * total.max(1.0) / (1.0 - self.discount)
    }

    /// Rebuilds derived fields after deserialization.
    pub fn rebuild(self) -> Result<SubsystemTree, ModelError> {
        let mut model = self.model;
        model.reindex();
        SubsystemTree::new(model, self.subsystems, self.parent, self.discount)
    }
}

/// A node of a hierarchical model: either a basic subsystem or a named group
/// of nodes with its own internal tree and a designated root member where the
/// group's tree-parent edge attaches.
#[derive(Debug, Clone)]
pub enum HierarchicalNode {
    Subsystem(BasicSubsystem),
    Group {
        name: String,
        members: Vec<HierarchicalNode>,
        /// Parent relation among members; exactly one entry is `None` and it
        /// must be the designated root member.
        member_parent: Vec<Option<usize>>,
        /// The member that receives the group's external parent edge.
        root_member: usize,
    },
}

impl HierarchicalNode {
    pub fn name(&self) -> &str {
        match self {
            HierarchicalNode::Subsystem(s) => &s.name,
            HierarchicalNode::Group { name, .. } => name,
        }
    }

    /// Expands the hierarchy into a flat subsystem tree. Members are emitted
    /// depth-first; each group's tree-parent edge attaches to the designated
    /// root member.
    pub fn flatten(self, model: Model, discount: f64) -> Result<SubsystemTree, ModelError> {
        let mut subs = Vec::new();
        let mut parents = Vec::new();
        self.emit(None, &mut subs, &mut parents)?;
        SubsystemTree::new(model, subs, parents, discount)
    }

    fn emit(
        self,
        parent_flat: Option<usize>,
        subs: &mut Vec<BasicSubsystem>,
        parents: &mut Vec<Option<usize>>,
    ) -> Result<usize, ModelError> {
        match self {
            HierarchicalNode::Subsystem(s) => {
                subs.push(s);
                parents.push(parent_flat);
                Ok(subs.len() - 1)
            }
            HierarchicalNode::Group { name, members, member_parent, root_member } => {
                if member_parent.len() != members.len() {
                    return Err(ModelError::BadGroup(
                        name,
                        "member parent map length mismatch".to_string(),
                    ));
                }
                if root_member >= members.len() {
                    return Err(ModelError::BadGroup(name, "root member out of range".to_string()));
                }
                if member_parent[root_member].is_some() {
                    return Err(ModelError::BadGroup(
                        name,
                        "designated root member has an internal parent".to_string(),
                    ));
                }
                if member_parent.iter().filter(|p| p.is_none()).count() != 1 {
                    return Err(ModelError::BadGroup(
                        name,
                        "group must have exactly one internal root".to_string(),
                    ));
                }
                // Emit members in an order where internal parents come first.
                let n = members.len();
                let mut member_children = vec![Vec::new(); n];
                for (i, p) in member_parent.iter().enumerate() {
                    if let Some(p) = *p {
                        if p >= n {
                            return Err(ModelError::BadGroup(
                                name,
                                format!("member parent index {} out of range", p),
                            ));
                        }
                        member_children[p].push(i);
                    }
                }
                let mut order = Vec::with_capacity(n);
                let mut stack = vec![root_member];
                let mut visited = vec![false; n];
                visited[root_member] = true;
                while let Some(m) = stack.pop() {
                    order.push(m);
                    for &c in member_children[m].iter().rev() {
                        if visited[c] {
                            return Err(ModelError::BadGroup(name, "cycle among members".to_string()));
                        }
                        visited[c] = true;
                        stack.push(c);
                    }
                }
                if order.len() != n {
                    return Err(ModelError::BadGroup(
                        name,
                        "members not connected to the group root".to_string(),
                    ));
                }
                let mut slots: Vec<Option<HierarchicalNode>> = members.into_iter().map(Some).collect();
                let mut attach = vec![usize::MAX; n];
                for &m in &order {
                    let node = slots[m].take().unwrap();
                    let p_flat = match member_parent[m] {
                        Some(p) => Some(attach[p]),
                        None => parent_flat,
                    };
                    attach[m] = node.emit(p_flat, subs, parents)?;
                }
                Ok(attach[root_member])
            }
        }
    }
}

/// Per-subsystem state-relevance weights: one nonnegative entry per internal
/// assignment, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceWeights {
    pub per_subsystem: Vec<Vec<f64>>,
}

impl RelevanceWeights {
    pub fn new(tree: &SubsystemTree, per_subsystem: Vec<Vec<f64>>) -> Result<RelevanceWeights, ModelError> {
        if per_subsystem.len() != tree.len() {
            return Err(ModelError::WeightsLength {
                name: "(tree)".to_string(),
                want: tree.len(),
                got: per_subsystem.len(),
            });
        }
        for (j, w) in per_subsystem.iter().enumerate() {
            let want = tree.model.scope_count(&tree.subsystems[j].internal);
            if w.len() != want {
                return Err(ModelError::WeightsLength {
                    name: tree.subsystems[j].name.clone(),
                    want,
                    got: w.len(),
                });
            }
            for (i, &v) in w.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(ModelError::WeightsEntry {
                        name: tree.subsystems[j].name.clone(),
                        index: i,
                        value: v,
                    });
                }
            }
        }
        Ok(RelevanceWeights { per_subsystem })
    }

    /// Weight 1 on every internal assignment of every subsystem.
    pub fn all_ones(tree: &SubsystemTree) -> RelevanceWeights {
        RelevanceWeights {
            per_subsystem: (0..tree.len())
                .map(|j| vec![1.0; tree.model.scope_count(&tree.subsystems[j].internal)])
                .collect(),
        }
    }

    /// Each subsystem's weights sum to 1 (uniform over its internal space).
    pub fn normalized_uniform(tree: &SubsystemTree) -> RelevanceWeights {
        RelevanceWeights {
            per_subsystem: (0..tree.len())
                .map(|j| {
                    let n = tree.model.scope_count(&tree.subsystems[j].internal);
                    vec![1.0 / n as f64; n]
                })
                .collect(),
        }
    }

    pub fn total(&self, j: usize) -> f64 {
        self.per_subsystem[j].iter().sum()
    }
}
