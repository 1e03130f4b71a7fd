//! Reuse of solved artifacts between subsystems built from the same
//! template. Two subsystems are interchangeable exactly when their tables
//! match position for position once variable names are erased; the byte
//! signatures here make that test cheap and renaming-proof. Everything taken
//! out of a cache is re-validated against the recipient before it may touch
//! a bank, so a stale or foreign cache can slow a run down but never corrupt
//! one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Projection, RelevanceWeights, Scope, SubsystemTree};
use crate::planner::{
    build_message_lp, solve_message_lp, ActiveBound, MessageLpSolution, PlannerError,
    RewardMessage, SubtreePolicyBank,
};
use crate::standalone::{
    reward_adjustment, solve_standalone, LocalPolicy, LocalPolicyBank, StandaloneError,
    StandaloneSolution, DUP_TOL,
};

/// Cached artifacts must pass the recipient's feasibility checks to this
/// absolute residual before they are turned into bank rows.
pub const SHARE_FEAS_TOL: f64 = 1e-8;

/// Cache file format version; files written by any other version are refused.
pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReuseError {
    #[error("cache file is format version {found}, this build reads version {want}")]
    Version { found: u32, want: u32 },
    #[error("cache file holds a malformed signature key")]
    MangledKey,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn push_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_usizes(out: &mut Vec<u8>, xs: &[usize]) {
    push_u64(out, xs.len() as u64);
    for &x in xs {
        push_u64(out, x as u64);
    }
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    push_u64(out, xs.len() as u64);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    push_u64(out, blob.len() as u64);
    out.extend_from_slice(blob);
}

/// Renaming-invariant identity of one subsystem's template: domain sizes in
/// scope order, which scope positions are internal, and the reward and
/// transition tables in canonical assignment order. Two subsystems with equal
/// signatures pose literally the same planning problem over relabeled
/// variables, provided the relabeling preserves the scope's relative order
/// (which is how repeated components are laid out in practice).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClassSignature(Vec<u8>);

pub fn class_signature(tree: &SubsystemTree, j: usize) -> ClassSignature {
    let model = &tree.model;
    let sub = &tree.subsystems[j];
    let mut out = Vec::new();
    let cards: Vec<usize> = sub.scope.ids().iter().map(|&id| model.card(id)).collect();
    push_usizes(&mut out, &cards);
    let internal_positions: Vec<usize> = sub
        .scope
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &id)| sub.internal.contains(id))
        .map(|(pos, _)| pos)
        .collect();
    push_usizes(&mut out, &internal_positions);
    push_f64s(&mut out, &sub.reward);
    push_f64s(&mut out, &sub.cpt);
    ClassSignature(out)
}

/// Identity of the solving convention a flow table depends on beyond the
/// class itself: the discount and the state-weight table. Flows feasible
/// under one convention are generally infeasible under another, so cached
/// rows never cross this boundary.
pub fn convention_signature(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    j: usize,
) -> Vec<u8> {
    let mut out = Vec::new();
    push_f64s(&mut out, &[tree.discount]);
    push_f64s(&mut out, &weights.per_subsystem[j]);
    out
}

fn flow_key(class: &ClassSignature, convention: &[u8]) -> Vec<u8> {
    let mut key = Vec::with_capacity(class.0.len() + convention.len() + 16);
    push_blob(&mut key, &class.0);
    push_blob(&mut key, convention);
    key
}

fn positions_in(scope: &Scope, of: &Scope) -> Vec<usize> {
    of.ids().iter().map(|&id| scope.position(id).unwrap()).collect()
}

/// Identity of the whole subtree hanging at a subsystem, as its parent sees
/// it: the subsystem's class and convention, where its parent-facing
/// separator sits in its scope, and for each child edge where that child's
/// separator sits here, paired with the child's own subtree signature. Child
/// entries are sorted so sibling order never matters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubtreeSignature(Vec<u8>);

pub fn subtree_signature(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    j: usize,
) -> SubtreeSignature {
    SubtreeSignature(subtree_blob(tree, weights, j))
}

fn subtree_blob(tree: &SubsystemTree, weights: &RelevanceWeights, j: usize) -> Vec<u8> {
    let sub = &tree.subsystems[j];
    let mut out = Vec::new();
    push_blob(&mut out, &class_signature(tree, j).0);
    push_blob(&mut out, &convention_signature(tree, weights, j));
    // a root and a fully decoupled child both have no separator positions,
    // but their subtree rows have different widths; keep them apart
    push_u64(&mut out, tree.parent[j].is_some() as u64);
    let own_sep = if tree.parent[j].is_some() {
        positions_in(&sub.scope, tree.sepset(j))
    } else {
        Vec::new()
    };
    push_usizes(&mut out, &own_sep);
    let mut entries: Vec<Vec<u8>> = tree
        .children(j)
        .iter()
        .map(|&k| {
            let mut entry = Vec::new();
            push_usizes(&mut entry, &positions_in(&sub.scope, tree.sepset(k)));
            push_blob(&mut entry, &subtree_blob(tree, weights, k));
            entry
        })
        .collect();
    entries.sort();
    push_u64(&mut out, entries.len() as u64);
    for entry in entries {
        out.extend_from_slice(&entry);
    }
    out
}

/// Largest absolute violation of subsystem j's occupancy-conservation rows
/// by a candidate flow table, measured against j's own weights. Tables of
/// the wrong length or with meaningfully negative or non-finite entries
/// count as infinitely wrong.
pub fn flow_conservation_residual(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    j: usize,
    flows: &[f64],
) -> f64 {
    let model = &tree.model;
    let sub = &tree.subsystems[j];
    if flows.len() != model.scope_count(&sub.scope) {
        return f64::INFINITY;
    }
    if flows.iter().any(|f| !f.is_finite() || *f < -SHARE_FEAS_TOL) {
        return f64::INFINITY;
    }
    let n_int = model.scope_count(&sub.internal);
    let to_int = Projection::new(model, &sub.scope, &sub.internal).unwrap();
    let mut lhs = vec![0.0; n_int];
    for (z, f) in flows.iter().enumerate() {
        lhs[to_int.apply(z)] += f;
        let row = sub.cpt_row(model, z);
        for (x, entry) in lhs.iter_mut().enumerate() {
            *entry -= tree.discount * row[x] * f;
        }
    }
    lhs.iter()
        .zip(&weights.per_subsystem[j])
        .map(|(got, want)| (got - want).abs())
        .fold(0.0, f64::max)
}

/// Whether a (t, phi) subtree row is admissible for subsystem j: finite
/// entries, the right separator width, no meaningfully negative mass, and
/// total mass matching j's weight total spread over the infinite horizon.
pub fn subtree_row_ok(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    j: usize,
    t: f64,
    phi: &[f64],
) -> bool {
    if tree.parent[j].is_none() || !t.is_finite() {
        return false;
    }
    if phi.len() != tree.model.scope_count(tree.sepset(j)) {
        return false;
    }
    if phi.iter().any(|p| !p.is_finite() || *p < -SHARE_FEAS_TOL) {
        return false;
    }
    let mass: f64 = phi.iter().sum();
    let expect = weights.total(j) / (1.0 - tree.discount);
    (mass - expect).abs() <= SHARE_FEAS_TOL * (1.0 + expect.abs())
}

/// One donated row and the bank position it landed in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Donation {
    pub recipient: usize,
    pub row: usize,
}

/// What reuse actually did during one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReuseLedger {
    /// Stand-alone solves answered from the memo instead of running the LP.
    pub standalone_hits: usize,
    /// Message LPs answered from the memo instead of being rebuilt.
    pub message_lp_hits: usize,
    /// Local bank rows created from another subsystem's flows.
    pub donated_local_rows: Vec<Donation>,
    /// Subtree bank rows copied from an equivalent subtree.
    pub donated_subtree_rows: Vec<Donation>,
    /// Cached entries that failed re-validation and were discarded.
    pub rejected_rows: usize,
}

/// Solved artifacts keyed by signature: raw flow tables per (class,
/// convention) and subtree rows per subtree signature. A cache outlives any
/// particular tree, so everything read back out of it is re-validated
/// against the recipient before use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReuseCache {
    flows: BTreeMap<Vec<u8>, Vec<Vec<f64>>>,
    subtree: BTreeMap<Vec<u8>, SubtreePolicyBank>,
}

impl ReuseCache {
    pub fn new() -> ReuseCache {
        ReuseCache::default()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty() && self.subtree.is_empty()
    }

    /// (flow tables, subtree rows) held in total.
    pub fn sizes(&self) -> (usize, usize) {
        (
            self.flows.values().map(Vec::len).sum(),
            self.subtree.values().map(SubtreePolicyBank::len).sum(),
        )
    }

    /// Stores a flow table under its class and convention unless an equal
    /// table (within `DUP_TOL` everywhere) is already present.
    pub fn record_flow(
        &mut self,
        class: &ClassSignature,
        convention: &[u8],
        flows: &[f64],
    ) -> bool {
        let entry = self.flows.entry(flow_key(class, convention)).or_default();
        let dup = entry.iter().any(|e| {
            e.len() == flows.len() && e.iter().zip(flows).all(|(a, b)| (a - b).abs() <= DUP_TOL)
        });
        if dup {
            return false;
        }
        entry.push(flows.to_vec());
        true
    }

    /// Stores a subtree row under its subtree signature, deduplicated.
    pub fn record_subtree_row(&mut self, sig: &SubtreeSignature, t: f64, phi: &[f64]) -> bool {
        self.subtree.entry(sig.0.clone()).or_default().record(t, phi.to_vec())
    }

    /// Turns every cached flow table for j's class and convention into a
    /// local policy row for j, re-validating conservation first and
    /// recomputing the reward entry from j's own table. Returns how many
    /// rows the bank accepted.
    pub fn share_flows(
        &self,
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        j: usize,
        bank: &mut LocalPolicyBank,
        ledger: &mut ReuseLedger,
    ) -> usize {
        let key = flow_key(&class_signature(tree, j), &convention_signature(tree, weights, j));
        let mut accepted = 0;
        for flows in self.flows.get(&key).map(Vec::as_slice).unwrap_or(&[]) {
            if flow_conservation_residual(tree, weights, j, flows) > SHARE_FEAS_TOL {
                ledger.rejected_rows += 1;
                continue;
            }
            if bank.record_policy(LocalPolicy::from_flows(tree, j, flows)) {
                ledger.donated_local_rows.push(Donation { recipient: j, row: bank.len() - 1 });
                accepted += 1;
            }
        }
        accepted
    }

    /// Copies every cached subtree row for j's subtree signature into j's
    /// subtree bank, after mass and nonnegativity checks. Returns how many
    /// rows the bank accepted.
    pub fn share_subtree_rows(
        &self,
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        j: usize,
        bank: &mut SubtreePolicyBank,
        ledger: &mut ReuseLedger,
    ) -> usize {
        if tree.parent[j].is_none() {
            return 0; // nothing consumes a root's subtree rows
        }
        let sig = subtree_signature(tree, weights, j);
        let mut accepted = 0;
        if let Some(rows) = self.subtree.get(&sig.0) {
            for (t, phi) in rows.t.iter().zip(&rows.phi) {
                if !subtree_row_ok(tree, weights, j, *t, phi) {
                    ledger.rejected_rows += 1;
                    continue;
                }
                if bank.record(*t, phi.clone()) {
                    ledger
                        .donated_subtree_rows
                        .push(Donation { recipient: j, row: bank.len() - 1 });
                    accepted += 1;
                }
            }
        }
        accepted
    }

    pub fn save(&self, path: &Path) -> Result<(), ReuseError> {
        let file = CacheFile {
            version: CACHE_FORMAT_VERSION,
            flows: self
                .flows
                .iter()
                .map(|(key, tables)| FlowEntry { key: to_hex(key), tables: tables.clone() })
                .collect(),
            subtree: self
                .subtree
                .iter()
                .map(|(key, bank)| SubtreeEntry {
                    key: to_hex(key),
                    t: bank.t.clone(),
                    phi: bank.phi.clone(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReuseCache, ReuseError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != CACHE_FORMAT_VERSION {
            return Err(ReuseError::Version { found, want: CACHE_FORMAT_VERSION });
        }
        let file: CacheFile = serde_json::from_value(value)?;
        let mut cache = ReuseCache::new();
        for entry in file.flows {
            let key = from_hex(&entry.key).ok_or(ReuseError::MangledKey)?;
            cache.flows.insert(key, entry.tables);
        }
        for entry in file.subtree {
            let key = from_hex(&entry.key).ok_or(ReuseError::MangledKey)?;
            cache.subtree.insert(key, SubtreePolicyBank { t: entry.t, phi: entry.phi });
        }
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    flows: Vec<FlowEntry>,
    subtree: Vec<SubtreeEntry>,
}

#[derive(Serialize, Deserialize)]
struct FlowEntry {
    key: String,
    tables: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SubtreeEntry {
    key: String,
    t: Vec<f64>,
    phi: Vec<Vec<f64>>,
}

fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{:02x}", b);
        s
    })
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2).map(|i| u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()).collect()
}

/// A memoized message-LP solution with child references stored by position
/// rather than by subsystem index, so an equivalent subsystem elsewhere in
/// the tree can adopt it.
struct PortableMessage {
    objective: f64,
    bounded: bool,
    p_local: Vec<f64>,
    price_blocks: Vec<Vec<f64>>,
    p_child_blocks: Vec<Vec<f64>>,
    active: Vec<(usize, usize, bool)>,
}

impl PortableMessage {
    fn pack(sol: &MessageLpSolution, children: &[usize]) -> PortableMessage {
        let pos = |k: usize| children.iter().position(|&c| c == k).unwrap();
        let mut price_blocks = vec![Vec::new(); children.len()];
        for price in &sol.prices {
            price_blocks[pos(price.child)] = price.values.clone();
        }
        let mut p_child_blocks = vec![Vec::new(); children.len()];
        for (k, p) in &sol.p_child {
            p_child_blocks[pos(*k)] = p.clone();
        }
        PortableMessage {
            objective: sol.objective,
            bounded: sol.bounded,
            p_local: sol.p_local.clone(),
            price_blocks,
            p_child_blocks,
            active: sol.active_bounds.iter().map(|b| (pos(b.child), b.index, b.upper)).collect(),
        }
    }

    fn unpack(&self, children: &[usize]) -> MessageLpSolution {
        MessageLpSolution {
            prices: children
                .iter()
                .zip(&self.price_blocks)
                .map(|(&k, values)| RewardMessage { child: k, values: values.clone() })
                .collect(),
            objective: self.objective,
            p_local: self.p_local.clone(),
            p_child: children
                .iter()
                .zip(&self.p_child_blocks)
                .map(|(&k, p)| (k, p.clone()))
                .collect(),
            bounded: self.bounded,
            active_bounds: self
                .active
                .iter()
                .map(|&(pos, index, upper)| ActiveBound { child: children[pos], index, upper })
                .collect(),
        }
    }
}

/// Everything a message LP depends on, as bytes: the local bank, each
/// child's subtree rows in child order, the price owed upward, and the box.
/// Equal keys mean byte-identical LPs, so the memoized solution is exactly
/// what a fresh solve would return.
fn message_key(
    tree: &SubsystemTree,
    j: usize,
    local: &LocalPolicyBank,
    child_banks: &BTreeMap<usize, SubtreePolicyBank>,
    own_price: &[f64],
    m_box: f64,
) -> Vec<u8> {
    let mut key = Vec::new();
    push_u64(&mut key, local.len() as u64);
    for row in &local.rows {
        push_f64s(&mut key, &[row.l]);
        push_f64s(&mut key, &row.phi_own);
        push_u64(&mut key, row.phi_child.len() as u64);
        for phi in &row.phi_child {
            push_f64s(&mut key, phi);
        }
    }
    let children = tree.children(j);
    push_u64(&mut key, children.len() as u64);
    for k in children {
        match child_banks.get(k) {
            Some(bank) => {
                push_f64s(&mut key, &bank.t);
                push_u64(&mut key, bank.phi.len() as u64);
                for phi in &bank.phi {
                    push_f64s(&mut key, phi);
                }
            }
            None => push_u64(&mut key, u64::MAX),
        }
    }
    push_f64s(&mut key, own_price);
    push_f64s(&mut key, &[m_box]);
    key
}

/// The per-run reuse machinery the planner drives: exact-input memos for
/// both LP kinds, peer lists for donating fresh rows to equivalent
/// subsystems, and the backing cache that collects everything for later
/// runs. Memo hits return exactly what the skipped solve would have, so
/// turning reuse on changes solve counts, never results.
pub struct ReuseRuntime<'a> {
    cache: &'a mut ReuseCache,
    pub ledger: ReuseLedger,
    class_sigs: Vec<ClassSignature>,
    conventions: Vec<Vec<u8>>,
    subtree_sigs: Vec<SubtreeSignature>,
    has_parent: Vec<bool>,
    flow_peers: Vec<Vec<usize>>,
    subtree_peers: Vec<Vec<usize>>,
    standalone_memo: BTreeMap<Vec<u8>, StandaloneSolution>,
    message_memo: BTreeMap<Vec<u8>, PortableMessage>,
}

impl<'a> ReuseRuntime<'a> {
    pub fn new(
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        cache: &'a mut ReuseCache,
    ) -> ReuseRuntime<'a> {
        let n = tree.len();
        let class_sigs: Vec<ClassSignature> = (0..n).map(|j| class_signature(tree, j)).collect();
        let conventions: Vec<Vec<u8>> =
            (0..n).map(|j| convention_signature(tree, weights, j)).collect();
        let subtree_sigs: Vec<SubtreeSignature> =
            (0..n).map(|j| subtree_signature(tree, weights, j)).collect();
        let flow_peers = (0..n)
            .map(|j| {
                (0..n)
                    .filter(|&p| {
                        p != j && class_sigs[p] == class_sigs[j] && conventions[p] == conventions[j]
                    })
                    .collect()
            })
            .collect();
        let subtree_peers = (0..n)
            .map(|j| (0..n).filter(|&p| p != j && subtree_sigs[p] == subtree_sigs[j]).collect())
            .collect();
        ReuseRuntime {
            cache,
            ledger: ReuseLedger::default(),
            class_sigs,
            conventions,
            subtree_sigs,
            has_parent: tree.parent.iter().map(Option::is_some).collect(),
            flow_peers,
            subtree_peers,
            standalone_memo: BTreeMap::new(),
            message_memo: BTreeMap::new(),
        }
    }

    /// Subsystems posing the identical stand-alone problem (same class, same
    /// convention), excluding j itself.
    pub fn flow_peers(&self, j: usize) -> &[usize] {
        &self.flow_peers[j]
    }

    /// Subsystems whose entire subtrees are equivalent to j's.
    pub fn subtree_peers(&self, j: usize) -> &[usize] {
        &self.subtree_peers[j]
    }

    /// Seeds j's local bank from the cache; new rows count as donations.
    pub fn seed_local(
        &mut self,
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        j: usize,
        bank: &mut LocalPolicyBank,
    ) -> usize {
        self.cache.share_flows(tree, weights, j, bank, &mut self.ledger)
    }

    /// Seeds j's subtree bank from the cache.
    pub fn seed_subtree(
        &mut self,
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        j: usize,
        bank: &mut SubtreePolicyBank,
    ) -> usize {
        self.cache.share_subtree_rows(tree, weights, j, bank, &mut self.ledger)
    }

    /// Stand-alone solve with an exact-input memo: the key is j's class,
    /// convention, and the message-adjustment table, which together fix the
    /// LP byte for byte. Misses solve, count against `solves`, and feed the
    /// cache; hits replay the stored solution.
    pub fn standalone(
        &mut self,
        tree: &SubsystemTree,
        weights: &RelevanceWeights,
        j: usize,
        messages: &[Vec<f64>],
        solves: &mut usize,
    ) -> Result<StandaloneSolution, StandaloneError> {
        let adjustment = reward_adjustment(tree, j, messages)?;
        let mut key = flow_key(&self.class_sigs[j], &self.conventions[j]);
        push_f64s(&mut key, &adjustment);
        if let Some(hit) = self.standalone_memo.get(&key) {
            self.ledger.standalone_hits += 1;
            return Ok(hit.clone());
        }
        let sol = solve_standalone(tree, j, messages, weights)?;
        *solves += 1;
        self.cache.record_flow(&self.class_sigs[j], &self.conventions[j], &sol.flows);
        self.standalone_memo.insert(key, sol.clone());
        Ok(sol)
    }

    /// Message-LP solve with an exact-input memo over the serialized banks,
    /// own price, and box; stored solutions are keyed by child position so a
    /// twin elsewhere in the tree adopts them with its own child indices.
    pub fn message_lp(
        &mut self,
        tree: &SubsystemTree,
        j: usize,
        local: &LocalPolicyBank,
        child_banks: &BTreeMap<usize, SubtreePolicyBank>,
        own_price: &[f64],
        m_box: f64,
        solves: &mut usize,
    ) -> Result<MessageLpSolution, PlannerError> {
        let key = message_key(tree, j, local, child_banks, own_price, m_box);
        let children = tree.children(j);
        if let Some(hit) = self.message_memo.get(&key) {
            self.ledger.message_lp_hits += 1;
            return Ok(hit.unpack(children));
        }
        let (lp, layout) = build_message_lp(tree, j, local, child_banks, own_price, m_box)?;
        let sol = solve_message_lp(j, &lp, &layout, m_box)?;
        *solves += 1;
        self.message_memo.insert(key, PortableMessage::pack(&sol, children));
        Ok(sol)
    }

    /// Records one subtree row into the cache under j's subtree signature.
    /// Root rows are skipped; nothing can ever consume them.
    pub fn record_subtree(&mut self, j: usize, t: f64, phi: &[f64]) {
        if self.has_parent[j] {
            self.cache.record_subtree_row(&self.subtree_sigs[j], t, phi);
        }
    }

    /// Consumes the runtime, returning what happened.
    pub fn into_ledger(self) -> ReuseLedger {
        self.ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasicSubsystem, Model, SubsystemTree, VariableDecl};
    use crate::models;
    use crate::standalone::zero_messages;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {}", a, b);
    }

    /// One subsystem with fixed tables under configurable variable names.
    fn solo(x: &str, a: &str) -> SubsystemTree {
        let model = Model::new(vec![
            VariableDecl::numbered(x, 2),
            VariableDecl::numbered(a, 2),
        ])
        .unwrap();
        let sub = BasicSubsystem::new(
            &model,
            "solo",
            model.scope_of(&[x]).unwrap(),
            model.scope_of(&[a]).unwrap(),
            vec![1.0, 0.0, 3.0, -1.0],
            vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.1, 0.9],
        )
        .unwrap();
        SubsystemTree::new(model, vec![sub], vec![None], 0.8).unwrap()
    }

    #[test]
    fn renaming_variables_keeps_the_class() {
        let a = solo("x", "a");
        let b = solo("machine_state", "switch");
        assert_eq!(class_signature(&a, 0), class_signature(&b, 0));
        let wa = RelevanceWeights::all_ones(&a);
        let wb = RelevanceWeights::all_ones(&b);
        assert_eq!(subtree_signature(&a, &wa, 0), subtree_signature(&b, &wb, 0));
    }

    #[test]
    fn any_table_entry_separates_classes() {
        let base = solo("x", "a");
        let mut reward_tweak = solo("x", "a");
        reward_tweak.subsystems[0].reward[2] += 0.25;
        assert_ne!(class_signature(&base, 0), class_signature(&reward_tweak, 0));
        let mut cpt_tweak = solo("x", "a");
        cpt_tweak.subsystems[0].cpt[1] += 0.05;
        cpt_tweak.subsystems[0].cpt[0] -= 0.05;
        assert_ne!(class_signature(&base, 0), class_signature(&cpt_tweak, 0));
    }

    #[test]
    fn twins_share_a_class_and_unrelated_subsystems_do_not() {
        let duplex = models::duplex();
        assert_eq!(class_signature(&duplex, 1), class_signature(&duplex, 2));
        assert_ne!(class_signature(&duplex, 0), class_signature(&duplex, 1));
        let tandem = models::tandem();
        assert_ne!(class_signature(&tandem, 0), class_signature(&tandem, 1));
        // structurally identical links with different reward scales are
        // different classes
        let chain = models::uniform_chain(3);
        assert_ne!(class_signature(&chain, 1), class_signature(&chain, 2));
    }

    #[test]
    fn subtree_signatures_recurse_through_descendants() {
        let tree = models::twin_chains();
        let w = RelevanceWeights::all_ones(&tree);
        // whole twin subtrees match: mid+leaf vs mid+leaf
        assert_eq!(subtree_signature(&tree, &w, 1), subtree_signature(&tree, &w, 3));
        assert_eq!(subtree_signature(&tree, &w, 2), subtree_signature(&tree, &w, 4));
        assert_ne!(subtree_signature(&tree, &w, 1), subtree_signature(&tree, &w, 2));
        // a change buried in one leaf splits the subtrees above it while the
        // mids themselves stay one class
        let mut bent = models::twin_chains();
        bent.subsystems[4].reward[0] += 0.1;
        let wb = RelevanceWeights::all_ones(&bent);
        assert_eq!(class_signature(&bent, 1), class_signature(&bent, 3));
        assert_ne!(subtree_signature(&bent, &wb, 1), subtree_signature(&bent, &wb, 3));
    }

    #[test]
    fn convention_covers_discount_and_weights() {
        let tree = models::duplex();
        let ones = RelevanceWeights::all_ones(&tree);
        assert_eq!(
            convention_signature(&tree, &ones, 1),
            convention_signature(&tree, &ones, 2)
        );
        let mut skewed = RelevanceWeights::all_ones(&tree);
        skewed.per_subsystem[2] = vec![0.9, 1.1];
        assert_ne!(
            convention_signature(&tree, &skewed, 1),
            convention_signature(&tree, &skewed, 2)
        );
        let mut other_discount = models::duplex();
        other_discount.discount = 0.8;
        let w2 = RelevanceWeights::all_ones(&other_discount);
        assert_ne!(
            convention_signature(&tree, &ones, 1),
            convention_signature(&other_discount, &w2, 1)
        );
    }

    #[test]
    fn donated_flows_become_rows_without_solving_again() {
        let tree = models::duplex();
        let w = RelevanceWeights::all_ones(&tree);
        let sol = solve_standalone(&tree, 1, &zero_messages(&tree), &w).unwrap();
        let mut cache = ReuseCache::new();
        assert!(cache.record_flow(
            &class_signature(&tree, 1),
            &convention_signature(&tree, &w, 1),
            &sol.flows
        ));
        // recording the same table again is a no-op
        assert!(!cache.record_flow(
            &class_signature(&tree, 1),
            &convention_signature(&tree, &w, 1),
            &sol.flows
        ));
        let mut ledger = ReuseLedger::default();
        let mut bank = LocalPolicyBank::new();
        assert_eq!(cache.share_flows(&tree, &w, 2, &mut bank, &mut ledger), 1);
        assert_eq!(ledger.donated_local_rows, vec![Donation { recipient: 2, row: 0 }]);
        assert_eq!(ledger.rejected_rows, 0);
        // the donated row is exactly what line2 would have solved for itself
        let own = solve_standalone(&tree, 2, &zero_messages(&tree), &w).unwrap();
        let own_row = LocalPolicy::from_flows(&tree, 2, &own.flows);
        assert_eq!(bank.rows[0].l, own_row.l);
        assert_eq!(bank.rows[0].phi_own, own_row.phi_own);
        // an empty cache donates nothing
        let empty = ReuseCache::new();
        let mut fresh = LocalPolicyBank::new();
        assert_eq!(empty.share_flows(&tree, &w, 2, &mut fresh, &mut ledger), 0);
        assert!(fresh.is_empty());
    }

    /// Three subsystems where two share a class but meet their parents over
    /// different separators: the near stage touches its parent on two
    /// variables, the far stage on one.
    fn staged() -> SubsystemTree {
        let model = Model::new(vec![
            VariableDecl::numbered("g", 2),
            VariableDecl::numbered("p1", 2),
            VariableDecl::numbered("q1", 2),
            VariableDecl::numbered("p2", 2),
            VariableDecl::numbered("q2", 2),
        ])
        .unwrap();
        let core = BasicSubsystem::new(
            &model,
            "core",
            model.scope_of(&["g"]).unwrap(),
            model.scope_of(&["p2"]).unwrap(),
            vec![1.0, 0.0, 0.5, -0.5],
            vec![0.7, 0.3, 0.2, 0.8, 0.7, 0.3, 0.2, 0.8],
        )
        .unwrap();
        let stage = |name: &str, p: &str, q: &str| {
            let mut cpt = Vec::new();
            let mut reward = Vec::new();
            for g in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        let p1 = if q == 1 { 0.1 + 0.7 * g as f64 } else { 0.2 };
                        cpt.extend([1.0 - p1, p1]);
                        reward.push(2.0 * p as f64 - 0.4 * q as f64);
                    }
                }
            }
            BasicSubsystem::new(
                &model,
                name,
                model.scope_of(&[p]).unwrap(),
                model.scope_of(&["g", q]).unwrap(),
                reward,
                cpt,
            )
            .unwrap()
        };
        let near = stage("near", "p2", "q2");
        let far = stage("far", "p1", "q1");
        SubsystemTree::new(model, vec![core, near, far], vec![None, Some(0), Some(1)], 0.9)
            .unwrap()
    }

    #[test]
    fn one_flow_table_serves_different_separator_geometries() {
        let tree = staged();
        let w = RelevanceWeights::all_ones(&tree);
        assert!(crate::validate::validate(&tree, Some(&w)).is_valid());
        assert_eq!(class_signature(&tree, 1), class_signature(&tree, 2));
        // near meets its parent over (g, p2), far over just g
        assert_eq!(tree.model.scope_count(tree.sepset(1)), 4);
        assert_eq!(tree.model.scope_count(tree.sepset(2)), 2);
        let sol = solve_standalone(&tree, 1, &zero_messages(&tree), &w).unwrap();
        let mut cache = ReuseCache::new();
        cache.record_flow(
            &class_signature(&tree, 1),
            &convention_signature(&tree, &w, 1),
            &sol.flows,
        );
        let mut ledger = ReuseLedger::default();
        let mut near_bank = LocalPolicyBank::new();
        let mut far_bank = LocalPolicyBank::new();
        assert_eq!(cache.share_flows(&tree, &w, 1, &mut near_bank, &mut ledger), 1);
        assert_eq!(cache.share_flows(&tree, &w, 2, &mut far_bank, &mut ledger), 1);
        let near_row = &near_bank.rows[0];
        let far_row = &far_bank.rows[0];
        assert_eq!(near_row.phi_own.len(), 4);
        assert_eq!(far_row.phi_own.len(), 2);
        // same flows, same reward entry, and the wide marginal sums down to
        // the narrow one
        assert_close(near_row.l, far_row.l, 1e-12);
        for g in 0..2 {
            assert_close(
                far_row.phi_own[g],
                near_row.phi_own[2 * g] + near_row.phi_own[2 * g + 1],
                1e-12,
            );
        }
    }

    #[test]
    fn corrupted_tables_are_rejected_not_absorbed() {
        let tree = models::duplex();
        let w = RelevanceWeights::all_ones(&tree);
        let sol = solve_standalone(&tree, 1, &zero_messages(&tree), &w).unwrap();
        let class = class_signature(&tree, 1);
        let conv = convention_signature(&tree, &w, 1);
        let mut broken = sol.flows.clone();
        broken[0] += 0.5; // breaks conservation
        let mut negative = sol.flows.clone();
        negative[0] = -1.0;
        negative[1] += 1.0 + sol.flows[0];
        let short = sol.flows[..4].to_vec();
        let mut cache = ReuseCache::new();
        cache.record_flow(&class, &conv, &broken);
        cache.record_flow(&class, &conv, &negative);
        cache.record_flow(&class, &conv, &short);
        let mut ledger = ReuseLedger::default();
        let mut bank = LocalPolicyBank::new();
        assert_eq!(cache.share_flows(&tree, &w, 2, &mut bank, &mut ledger), 0);
        assert!(bank.is_empty());
        assert_eq!(ledger.rejected_rows, 3);
        // bad subtree rows are refused the same way
        let wrong_mass = vec![1.0, 1.0];
        let sig = subtree_signature(&tree, &w, 2);
        let mut subtree_cache = ReuseCache::new();
        subtree_cache.record_subtree_row(&sig, 1.0, &wrong_mass);
        let mut sbank = SubtreePolicyBank::default();
        assert_eq!(
            subtree_cache.share_subtree_rows(&tree, &w, 2, &mut sbank, &mut ledger),
            0
        );
        assert_eq!(ledger.rejected_rows, 4);
    }

    #[test]
    fn subtree_rows_move_between_equivalent_subtrees_only() {
        let tree = models::duplex();
        let w = RelevanceWeights::all_ones(&tree);
        let sol = solve_standalone(&tree, 1, &zero_messages(&tree), &w).unwrap();
        let row = LocalPolicy::from_flows(&tree, 1, &sol.flows);
        let mut cache = ReuseCache::new();
        assert!(cache.record_subtree_row(&subtree_signature(&tree, &w, 1), row.l, &row.phi_own));
        let mut ledger = ReuseLedger::default();
        let mut twin_bank = SubtreePolicyBank::default();
        assert_eq!(cache.share_subtree_rows(&tree, &w, 2, &mut twin_bank, &mut ledger), 1);
        assert_eq!(twin_bank.t, vec![row.l]);
        assert_eq!(ledger.donated_subtree_rows, vec![Donation { recipient: 2, row: 0 }]);
        // the hub's subtree is nothing like a line's; nothing crosses
        let mut hub_bank = SubtreePolicyBank::default();
        assert_eq!(cache.share_subtree_rows(&tree, &w, 0, &mut hub_bank, &mut ledger), 0);
        assert!(hub_bank.is_empty());
        assert_eq!(ledger.rejected_rows, 0);
    }

    #[test]
    fn cache_files_round_trip_and_reject_other_versions() {
        let tree = models::duplex();
        let w = RelevanceWeights::all_ones(&tree);
        let sol = solve_standalone(&tree, 1, &zero_messages(&tree), &w).unwrap();
        let row = LocalPolicy::from_flows(&tree, 1, &sol.flows);
        let mut cache = ReuseCache::new();
        cache.record_flow(
            &class_signature(&tree, 1),
            &convention_signature(&tree, &w, 1),
            &sol.flows,
        );
        cache.record_subtree_row(&subtree_signature(&tree, &w, 1), row.l, &row.phi_own);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policies.json");
        cache.save(&path).unwrap();
        let loaded = ReuseCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
        assert_eq!(loaded.sizes(), (1, 1));
        // a sharing round from the loaded copy behaves identically
        let mut ledger = ReuseLedger::default();
        let mut bank = LocalPolicyBank::new();
        assert_eq!(loaded.share_flows(&tree, &w, 2, &mut bank, &mut ledger), 1);
        // same content under a bumped version number is refused outright
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replacen(
            &format!("\"version\": {}", CACHE_FORMAT_VERSION),
            "\"version\": 99",
            1,
        );
        assert_ne!(text, bumped);
        std::fs::write(&path, bumped).unwrap();
        match ReuseCache::load(&path) {
            Err(ReuseError::Version { found: 99, want }) => {
                assert_eq!(want, CACHE_FORMAT_VERSION)
            }
            other => panic!("expected a version refusal, got {:?}", other.map(|c| c.sizes())),
        }
    }

    #[test]
    fn conservation_residual_flags_exactly_the_bad_tables() {
        let tree = models::tandem();
        let w = RelevanceWeights::all_ones(&tree);
        for j in 0..2 {
            let sol = solve_standalone(&tree, j, &zero_messages(&tree), &w).unwrap();
            assert!(flow_conservation_residual(&tree, &w, j, &sol.flows) <= 1e-8);
            let mut off = sol.flows.clone();
            off[0] += 1e-3;
            // the bump shows up damped by (1 - discount) but well past the
            // sharing gate
            assert!(flow_conservation_residual(&tree, &w, j, &off) > SHARE_FEAS_TOL);
        }
        assert!(flow_conservation_residual(&tree, &w, 0, &[1.0]).is_infinite());
    }
}
