//! The distributed planning loop. Subsystem agents keep private banks of
//! local policies; internal nodes repeatedly solve a small reward-message LP
//! over their bank and their children's subtree rows, send the resulting
//! separator prices down, and send new subtree statistics up, until no
//! message or bank changes. Leaves never run a message LP; their subtree
//! rows are their raw local rows.
//!
//! Message variables carry box bounds so every LP stays well-posed even when
//! the underlying problem is momentarily unbounded; if messages are still
//! pinned to the box at an otherwise-converged point, the box is doubled and
//! the loop continues.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LpError, LpProblem, LpStatus};
use crate::model::{RelevanceWeights, SubsystemTree};
use crate::reuse::{
    flow_conservation_residual, subtree_row_ok, Donation, ReuseCache, ReuseLedger, ReuseRuntime,
    SHARE_FEAS_TOL,
};
use crate::standalone::{
    solve_standalone, zero_messages, LocalPolicy, LocalPolicyBank, StandaloneError, DUP_TOL,
};

/// Convergence threshold on the max-norm change of all messages per round.
pub const CONV_TOL: f64 = 1e-7;
/// Reduced costs larger than this mark a box bound as genuinely active
/// rather than a flat optimal direction that merely touches the box.
pub const ACTIVE_BOUND_TOL: f64 = 1e-7;
/// How often the message box may be doubled before giving up.
pub const MAX_DOUBLINGS: usize = 6;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("subsystem {j} has an empty policy bank; its message LP is not ready")]
    NotReady { j: usize },
    #[error("message LP for subsystem {j} returned {status:?}; with box bounds it must solve")]
    MessageLpDegenerate { j: usize, status: LpStatus },
    #[error("no fixpoint within {rounds} rounds")]
    NonConvergence { rounds: usize, trace: Vec<IterationRecord> },
    #[error("messages still pinned to box bounds after {doublings} doublings")]
    ActiveBoundsAtFixpoint { doublings: usize, trace: Vec<IterationRecord> },
    #[error(transparent)]
    Standalone(#[from] StandaloneError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Separator prices sent from a parent to one child.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMessage {
    pub child: usize,
    pub values: Vec<f64>,
}

/// New subtree rows sent from a child to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMessage {
    pub sender: usize,
    pub t_entry: f64,
    pub phi_row: Vec<f64>,
}

/// Accumulated subtree statistics: one reward total and one separator flow
/// row per mixed policy seen so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubtreePolicyBank {
    pub t: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
}

impl SubtreePolicyBank {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Appends unless a row already matches within `DUP_TOL` everywhere.
    pub fn record(&mut self, t: f64, phi: Vec<f64>) -> bool {
        let dup = self.t.iter().zip(&self.phi).any(|(et, ephi)| {
            (et - t).abs() <= DUP_TOL
                && ephi.len() == phi.len()
                && ephi.iter().zip(&phi).all(|(a, b)| (a - b).abs() <= DUP_TOL)
        });
        if dup {
            return false;
        }
        self.t.push(t);
        self.phi.push(phi);
        true
    }
}

/// Where each variable and constraint block of a message LP lives.
#[derive(Debug, Clone)]
pub struct MessageLpLayout {
    pub theta_local: usize,
    /// (child index, column) per child, in child order.
    pub theta_child: Vec<(usize, usize)>,
    /// (child index, column range of its price block), in child order.
    pub s_cols: Vec<(usize, std::ops::Range<usize>)>,
    pub local_rows: std::ops::Range<usize>,
    pub child_rows: Vec<(usize, std::ops::Range<usize>)>,
}

/// One price variable that ended up pressed against the box.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveBound {
    pub child: usize,
    pub index: usize,
    pub upper: bool,
}

/// Everything a message-LP solve produces: new child prices, the objective,
/// per-block mixture weights over bank rows, and whether the solution leaned
/// on the box bounds.
#[derive(Debug, Clone)]
pub struct MessageLpSolution {
    pub prices: Vec<RewardMessage>,
    pub objective: f64,
    pub p_local: Vec<f64>,
    pub p_child: Vec<(usize, Vec<f64>)>,
    pub bounded: bool,
    pub active_bounds: Vec<ActiveBound>,
}

/// Builds the reward-message LP for subsystem j: minimize the claimed value
/// of j plus all child subtrees, where j's claim dominates every bank row
/// under candidate child prices S_k and the fixed price it owes its parent,
/// and each child's claim dominates its subtree rows net of S_k.
pub fn build_message_lp(
    tree: &SubsystemTree,
    j: usize,
    local: &LocalPolicyBank,
    child_banks: &BTreeMap<usize, SubtreePolicyBank>,
    own_price: &[f64],
    m_box: f64,
) -> Result<(LpProblem, MessageLpLayout), PlannerError> {
    if local.is_empty() {
        return Err(PlannerError::NotReady { j });
    }
    let children = tree.children(j);
    for &k in children {
        if child_banks.get(&k).is_none_or(|b| b.is_empty()) {
            return Err(PlannerError::NotReady { j: k });
        }
    }
    let theta_local = 0usize;
    let mut next = 1usize;
    let theta_child: Vec<(usize, usize)> = children
        .iter()
        .map(|&k| {
            let col = next;
            next += 1;
            (k, col)
        })
        .collect();
    let s_cols: Vec<(usize, std::ops::Range<usize>)> = children
        .iter()
        .map(|&k| {
            let width = tree.model.scope_count(tree.sepset(k));
            let range = next..next + width;
            next += width;
            (k, range)
        })
        .collect();

    let mut lp = LpProblem::new(next);
    lp.set_objective_coef(theta_local, 1.0);
    for &(_, col) in &theta_child {
        lp.set_objective_coef(col, 1.0);
    }
    for (_, range) in &s_cols {
        for col in range.clone() {
            lp.set_bounds(col, -m_box, m_box);
        }
    }
    let mut row_at = 0usize;
    for row in &local.rows {
        let mut a = vec![0.0; next];
        a[theta_local] = 1.0;
        for (c, (_, range)) in row.phi_child.iter().zip(&s_cols) {
            for (coef, col) in c.iter().zip(range.clone()) {
                a[col] -= coef;
            }
        }
        let rhs = row.l - row.phi_own.iter().zip(own_price).map(|(p, s)| p * s).sum::<f64>();
        lp.add_ge(a, rhs);
    }
    let local_rows = row_at..row_at + local.len();
    row_at += local.len();
    let mut child_rows = Vec::with_capacity(children.len());
    for (ci, &k) in children.iter().enumerate() {
        let bank = &child_banks[&k];
        for (t, phi) in bank.t.iter().zip(&bank.phi) {
            let mut a = vec![0.0; next];
            a[theta_child[ci].1] = 1.0;
            for (coef, col) in phi.iter().zip(s_cols[ci].1.clone()) {
                a[col] += coef;
            }
            lp.add_ge(a, *t);
        }
        child_rows.push((k, row_at..row_at + bank.len()));
        row_at += bank.len();
    }
    Ok((lp, MessageLpLayout { theta_local, theta_child, s_cols, local_rows, child_rows }))
}

/// Solves a built message LP and extracts prices, mixture weights, and the
/// set of price variables pinned to the box (at a bound with a reduced cost
/// that is genuinely pushing, not a flat tie).
pub fn solve_message_lp(
    j: usize,
    lp: &LpProblem,
    layout: &MessageLpLayout,
    m_box: f64,
) -> Result<MessageLpSolution, PlannerError> {
    let sol = lp.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(PlannerError::MessageLpDegenerate { j, status: sol.status });
    }
    let prices = layout
        .s_cols
        .iter()
        .map(|(k, range)| RewardMessage { child: *k, values: sol.primal[range.clone()].to_vec() })
        .collect();
    let renorm = |block: std::ops::Range<usize>| -> Vec<f64> {
        let raw = &sol.dual_ge[block];
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|p| p / total).collect()
        } else {
            vec![1.0 / raw.len() as f64; raw.len()]
        }
    };
    let p_local = renorm(layout.local_rows.clone());
    let p_child = layout.child_rows.iter().map(|(k, r)| (*k, renorm(r.clone()))).collect();
    let mut active_bounds = Vec::new();
    let near = 1e-6 * (1.0 + m_box);
    for (k, range) in &layout.s_cols {
        for (i, col) in range.clone().enumerate() {
            let value = sol.primal[col];
            let rc = sol.reduced_costs[col];
            if (value + m_box).abs() <= near && rc > ACTIVE_BOUND_TOL {
                active_bounds.push(ActiveBound { child: *k, index: i, upper: false });
            } else if (value - m_box).abs() <= near && rc < -ACTIVE_BOUND_TOL {
                active_bounds.push(ActiveBound { child: *k, index: i, upper: true });
            }
        }
    }
    let bounded = active_bounds.is_empty();
    Ok(MessageLpSolution { prices, objective: sol.objective, p_local, p_child, bounded, active_bounds })
}

/// Mixes bank rows by the extracted weights into one new subtree row:
/// the total is the weighted child subtree totals plus the weighted local
/// reward entries; the flow row is the weighted local separator marginals.
pub fn subtree_statistics(
    p_local: &[f64],
    p_child: &[(usize, Vec<f64>)],
    local: &LocalPolicyBank,
    child_banks: &BTreeMap<usize, SubtreePolicyBank>,
) -> (f64, Vec<f64>) {
    let mut t = 0.0;
    for (k, pk) in p_child {
        let bank = &child_banks[k];
        t += pk.iter().zip(&bank.t).map(|(p, tk)| p * tk).sum::<f64>();
    }
    let width = local.rows.first().map_or(0, |r| r.phi_own.len());
    let mut phi = vec![0.0; width];
    for (p, row) in p_local.iter().zip(&local.rows) {
        t += p * row.l;
        for (acc, f) in phi.iter_mut().zip(&row.phi_own) {
            *acc += p * f;
        }
    }
    (t, phi)
}

/// Order in which agents are visited within each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Synchronous,
    LeavesFirst,
    RandomSweep,
}

impl Schedule {
    fn order(&self, tree: &SubsystemTree, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            Schedule::Synchronous => (0..tree.len()).collect(),
            Schedule::LeavesFirst => tree.depth_descending(),
            Schedule::RandomSweep => {
                let mut order: Vec<usize> = (0..tree.len()).collect();
                order.shuffle(rng);
                order
            }
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Schedule, String> {
        match s {
            "sync" | "synchronous" => Ok(Schedule::Synchronous),
            "leaves-first" => Ok(Schedule::LeavesFirst),
            "random" => Ok(Schedule::RandomSweep),
            other => Err(format!("unknown schedule '{}'; use sync, leaves-first, or random", other)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannerConfig {
    pub schedule: Schedule,
    pub seed: u64,
    pub max_rounds: usize,
    pub tol: f64,
    /// Box half-width for message variables; model-derived when absent.
    pub message_bound: Option<f64>,
    /// Share solved artifacts between same-class subsystems. Results are
    /// unchanged; only the number of LP solves drops.
    pub reuse: bool,
}

impl Default for PlannerConfig {
    fn default() -> PlannerConfig {
        PlannerConfig {
            schedule: Schedule::Synchronous,
            seed: 0,
            max_rounds: 1000,
            tol: CONV_TOL,
            message_bound: None,
            reuse: false,
        }
    }
}

/// One message-LP execution as seen in the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageLpRun {
    pub subsystem: usize,
    pub objective: f64,
    pub bounded: bool,
    pub subtree_row_added: bool,
}

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub round: usize,
    pub message_bound: f64,
    pub message_lp_runs: Vec<MessageLpRun>,
    pub standalone_runs: Vec<usize>,
    pub rows_added: usize,
    pub max_message_delta: f64,
    /// (local bank rows, subtree bank rows) per subsystem.
    pub bank_sizes: Vec<(usize, usize)>,
    pub messages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanResult {
    /// Final value table per subsystem, from a stand-alone solve under the
    /// final messages.
    pub v: Vec<Vec<f64>>,
    /// Final occupancy flows per subsystem over scope assignments.
    pub flows: Vec<Vec<f64>>,
    /// Final separator prices per subsystem (empty at the root).
    pub messages: Vec<Vec<f64>>,
    /// State weights dotted with the final values, summed over subsystems.
    pub objective: f64,
    pub rounds: usize,
    pub doublings: usize,
    pub message_bound: f64,
    pub trace: Vec<IterationRecord>,
    /// Stand-alone LPs actually solved; memo hits are not counted.
    pub standalone_solves: usize,
    /// Message LPs actually solved.
    pub message_lp_solves: usize,
    /// What reuse did, present when it was switched on.
    pub reuse: Option<ReuseLedger>,
}

#[derive(Default)]
struct Agent {
    local: LocalPolicyBank,
    subtree: SubtreePolicyBank,
    /// Mirror of rows received from each child, fed only by flow messages.
    child_rows: BTreeMap<usize, SubtreePolicyBank>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Records a local row for j and does the bookkeeping a genuinely new row
/// triggers: a leaf forwards it as a subtree row to its parent, an internal
/// node marks its own message LP stale. Returns whether the row was new.
/// Donated rows go through here too, so a twin's discovery lands exactly the
/// way the recipient's own discovery would have.
fn absorb_local_row(
    tree: &SubsystemTree,
    agents: &mut [Agent],
    msg_dirty: &mut [bool],
    rows_added: &mut usize,
    j: usize,
    row: LocalPolicy,
) -> bool {
    let leaf_row = if tree.is_leaf(j) { Some((row.l, row.phi_own.clone())) } else { None };
    if !agents[j].local.record_policy(row) {
        return false;
    }
    *rows_added += 1;
    match leaf_row {
        Some((t, phi)) => {
            if agents[j].subtree.record(t, phi.clone()) {
                *rows_added += 1;
                if let Some(parent) = tree.parent[j] {
                    let up = FlowMessage { sender: j, t_entry: t, phi_row: phi };
                    agents[parent]
                        .child_rows
                        .entry(up.sender)
                        .or_default()
                        .record(up.t_entry, up.phi_row);
                    msg_dirty[parent] = true;
                }
            }
        }
        None => msg_dirty[j] = true,
    }
    true
}

/// Runs the planning loop to a fixpoint. Each round has a message pass,
/// where every internal node whose own bank or child rows changed re-solves
/// its message LP and delivers new prices, and a stand-alone pass, where
/// every subsystem whose incoming prices changed re-plans and records the
/// resulting policy. The loop ends when a full round moves no message by
/// more than `tol` and adds no bank row.
pub fn run_planner(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    config: &PlannerConfig,
) -> Result<PlanResult, PlannerError> {
    let mut scratch = ReuseCache::new();
    run_planner_with_cache(tree, weights, config, &mut scratch)
}

/// [`run_planner`] against a caller-owned artifact cache: with reuse on, the
/// run seeds its banks from whatever the cache already holds and records
/// everything it solves back into it, so a later run over the same classes
/// starts ahead. With reuse off the cache is ignored entirely.
pub fn run_planner_with_cache(
    tree: &SubsystemTree,
    weights: &RelevanceWeights,
    config: &PlannerConfig,
    cache: &mut ReuseCache,
) -> Result<PlanResult, PlannerError> {
    let n = tree.len();
    let mut agents: Vec<Agent> = (0..n).map(|_| Agent::default()).collect();
    let mut messages = zero_messages(tree);
    let mut m_box = config.message_bound.unwrap_or_else(|| tree.default_message_bound());
    let mut doublings = 0usize;
    // the initial zero messages count as changed, so every subsystem plans
    let mut standalone_dirty = vec![true; n];
    let mut msg_dirty = vec![false; n];
    let mut last_run_active = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut standalone_solves = 0usize;
    let mut message_lp_solves = 0usize;
    let mut runtime = if config.reuse { Some(ReuseRuntime::new(tree, weights, cache)) } else { None };

    // a warm cache pre-populates the banks before the first round
    if let Some(rt) = runtime.as_mut() {
        for j in 0..n {
            let local_before = agents[j].local.len();
            rt.seed_local(tree, weights, j, &mut agents[j].local);
            if agents[j].local.len() > local_before {
                if tree.is_leaf(j) {
                    let fresh: Vec<(f64, Vec<f64>)> = agents[j].local.rows[local_before..]
                        .iter()
                        .map(|row| (row.l, row.phi_own.clone()))
                        .collect();
                    for (t, phi) in fresh {
                        if agents[j].subtree.record(t, phi.clone()) {
                            if let Some(parent) = tree.parent[j] {
                                agents[parent].child_rows.entry(j).or_default().record(t, phi);
                                msg_dirty[parent] = true;
                            }
                        }
                    }
                } else {
                    msg_dirty[j] = true;
                }
            }
            let subtree_before = agents[j].subtree.len();
            rt.seed_subtree(tree, weights, j, &mut agents[j].subtree);
            if agents[j].subtree.len() > subtree_before {
                if let Some(parent) = tree.parent[j] {
                    let fresh: Vec<(f64, Vec<f64>)> = (subtree_before..agents[j].subtree.len())
                        .map(|i| (agents[j].subtree.t[i], agents[j].subtree.phi[i].clone()))
                        .collect();
                    for (t, phi) in fresh {
                        agents[parent].child_rows.entry(j).or_default().record(t, phi);
                    }
                    msg_dirty[parent] = true;
                }
            }
        }
    }

    for round in 1..=config.max_rounds {
        let order = config.schedule.order(tree, &mut rng);
        let mut rows_added = 0usize;
        let mut max_delta = 0.0f64;
        let mut lp_runs = Vec::new();
        let mut sa_runs = Vec::new();

        // message pass over internal nodes
        for &j in &order {
            if tree.is_leaf(j) || !msg_dirty[j] {
                continue;
            }
            let ready = !agents[j].local.is_empty()
                && tree
                    .children(j)
                    .iter()
                    .all(|k| agents[j].child_rows.get(k).is_some_and(|b| !b.is_empty()));
            if !ready {
                continue; // stays dirty; retried next round
            }
            msg_dirty[j] = false;
            let sol = match runtime.as_mut() {
                Some(rt) => rt.message_lp(
                    tree,
                    j,
                    &agents[j].local,
                    &agents[j].child_rows,
                    &messages[j],
                    m_box,
                    &mut message_lp_solves,
                )?,
                None => {
                    let (lp, layout) = build_message_lp(
                        tree,
                        j,
                        &agents[j].local,
                        &agents[j].child_rows,
                        &messages[j],
                        m_box,
                    )?;
                    message_lp_solves += 1;
                    solve_message_lp(j, &lp, &layout, m_box)?
                }
            };
            last_run_active[j] = !sol.bounded;
            for price in &sol.prices {
                let k = price.child;
                let delta = max_abs_diff(&messages[k], &price.values);
                if delta > 0.0 {
                    messages[k] = price.values.clone();
                    standalone_dirty[j] = true;
                    standalone_dirty[k] = true;
                    // the price is an input of k's own message LP, so that
                    // solve is stale now even if k's banks never change again
                    if !tree.is_leaf(k) {
                        msg_dirty[k] = true;
                    }
                    max_delta = max_delta.max(delta);
                }
            }
            let mut subtree_row_added = false;
            if sol.bounded {
                let (t, phi) =
                    subtree_statistics(&sol.p_local, &sol.p_child, &agents[j].local, &agents[j].child_rows);
                if agents[j].subtree.record(t, phi.clone()) {
                    rows_added += 1;
                    subtree_row_added = true;
                    if let Some(parent) = tree.parent[j] {
                        let up = FlowMessage { sender: j, t_entry: t, phi_row: phi.clone() };
                        agents[parent]
                            .child_rows
                            .entry(up.sender)
                            .or_default()
                            .record(up.t_entry, up.phi_row);
                        msg_dirty[parent] = true;
                    }
                    // equivalent subtrees elsewhere can claim the same row
                    if let Some(rt) = runtime.as_mut() {
                        rt.record_subtree(j, t, &phi);
                        for p in rt.subtree_peers(j).to_vec() {
                            if !subtree_row_ok(tree, weights, p, t, &phi) {
                                rt.ledger.rejected_rows += 1;
                                continue;
                            }
                            if agents[p].subtree.record(t, phi.clone()) {
                                rows_added += 1;
                                rt.ledger.donated_subtree_rows.push(Donation {
                                    recipient: p,
                                    row: agents[p].subtree.len() - 1,
                                });
                                if let Some(parent) = tree.parent[p] {
                                    agents[parent]
                                        .child_rows
                                        .entry(p)
                                        .or_default()
                                        .record(t, phi.clone());
                                    msg_dirty[parent] = true;
                                }
                            }
                        }
                    }
                }
            }
            lp_runs.push(MessageLpRun {
                subsystem: j,
                objective: sol.objective,
                bounded: sol.bounded,
                subtree_row_added,
            });
        }

        // stand-alone pass over everyone whose prices moved
        for &j in &order {
            if !standalone_dirty[j] {
                continue;
            }
            standalone_dirty[j] = false;
            let sol = match runtime.as_mut() {
                Some(rt) => rt.standalone(tree, weights, j, &messages, &mut standalone_solves)?,
                None => {
                    standalone_solves += 1;
                    solve_standalone(tree, j, &messages, weights)?
                }
            };
            sa_runs.push(j);
            let row = LocalPolicy::from_flows(tree, j, &sol.flows);
            if absorb_local_row(tree, &mut agents, &mut msg_dirty, &mut rows_added, j, row.clone())
            {
                if let Some(rt) = runtime.as_mut() {
                    if tree.is_leaf(j) {
                        rt.record_subtree(j, row.l, &row.phi_own);
                    }
                    // the same flows plan every same-class peer; their own
                    // later solves will deduplicate against these rows
                    for p in rt.flow_peers(j).to_vec() {
                        if flow_conservation_residual(tree, weights, p, &sol.flows)
                            > SHARE_FEAS_TOL
                        {
                            rt.ledger.rejected_rows += 1;
                            continue;
                        }
                        let peer_row = LocalPolicy::from_flows(tree, p, &sol.flows);
                        let peer_stats = tree
                            .is_leaf(p)
                            .then(|| (peer_row.l, peer_row.phi_own.clone()));
                        if absorb_local_row(
                            tree,
                            &mut agents,
                            &mut msg_dirty,
                            &mut rows_added,
                            p,
                            peer_row,
                        ) {
                            rt.ledger.donated_local_rows.push(Donation {
                                recipient: p,
                                row: agents[p].local.len() - 1,
                            });
                            if let Some((t, phi)) = peer_stats {
                                rt.record_subtree(p, t, &phi);
                            }
                        }
                    }
                }
            }
        }

        trace.push(IterationRecord {
            round,
            message_bound: m_box,
            message_lp_runs: lp_runs,
            standalone_runs: sa_runs,
            rows_added,
            max_message_delta: max_delta,
            bank_sizes: agents.iter().map(|a| (a.local.len(), a.subtree.len())).collect(),
            messages: messages.clone(),
        });

        if max_delta <= config.tol && rows_added == 0 {
            if last_run_active.iter().any(|&a| a) {
                if doublings == MAX_DOUBLINGS {
                    return Err(PlannerError::ActiveBoundsAtFixpoint { doublings, trace });
                }
                doublings += 1;
                m_box *= 2.0;
                for j in 0..n {
                    if !tree.is_leaf(j) {
                        msg_dirty[j] = true;
                    }
                }
                continue;
            }
            let mut v = Vec::with_capacity(n);
            let mut flows = Vec::with_capacity(n);
            for j in 0..n {
                let fin = match runtime.as_mut() {
                    Some(rt) => {
                        rt.standalone(tree, weights, j, &messages, &mut standalone_solves)?
                    }
                    None => {
                        standalone_solves += 1;
                        solve_standalone(tree, j, &messages, weights)?
                    }
                };
                v.push(fin.v);
                flows.push(fin.flows);
            }
            let objective = (0..n)
                .map(|j| weights.per_subsystem[j].iter().zip(&v[j]).map(|(w, v)| w * v).sum::<f64>())
                .sum();
            return Ok(PlanResult {
                v,
                flows,
                messages,
                objective,
                rounds: round,
                doublings,
                message_bound: m_box,
                trace,
                standalone_solves,
                message_lp_solves,
                reuse: runtime.map(ReuseRuntime::into_ledger),
            });
        }
    }
    Err(PlannerError::NonConvergence { rounds: config.max_rounds, trace })
}
