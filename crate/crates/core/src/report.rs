//! Structured JSON reports for the command-line tool.
//!
//! Reports are schema-versioned and deterministic: the same model, config,
//! and seed produce the same bytes. Every real number is printed with 17
//! significant digits, enough for an exact double round trip. Timing is
//! opt-in because wall-clock numbers would break byte-for-byte determinism.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::action::Episode;
use crate::model::{RelevanceWeights, SubsystemTree};
use crate::oracle::{CentralizedFactoredSolution, ExactSolution};
use crate::planner::{PlanResult, PlannerConfig, Schedule};
use crate::validate::{ValidationReport, ViolationKind};

pub const REPORT_SCHEMA: &str = "hfmdp-report/1";

/// A report float: serializes as a JSON number with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F(pub f64);

impl From<f64> for F {
    fn from(v: f64) -> F {
        F(v)
    }
}

impl Serialize for F {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite value in report"));
        }
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<F, D::Error> {
        f64::deserialize(d).map(F)
    }
}

fn fv(values: &[f64]) -> Vec<F> {
    values.iter().map(|&v| F(v)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigSection>,
    pub validation: ValidationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<EpisodesSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSection>,
}

impl Report {
    pub fn new(command: &str, model: &str, validation: ValidationSection) -> Report {
        Report {
            schema: REPORT_SCHEMA.to_string(),
            command: command.to_string(),
            model: model.to_string(),
            config: None,
            validation,
            plan: None,
            oracle: None,
            episodes: None,
            timing: None,
        }
    }

    /// The report as pretty JSON with a trailing newline.
    pub fn render(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serialization");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigSection {
    pub schedule: Schedule,
    pub seed: u64,
    pub max_rounds: usize,
    pub tol: F,
    pub message_bound: Option<F>,
    pub reuse: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_cap: Option<usize>,
}

impl ConfigSection {
    pub fn from_planner(config: &PlannerConfig) -> ConfigSection {
        ConfigSection {
            schedule: config.schedule,
            seed: config.seed,
            max_rounds: config.max_rounds,
            tol: F(config.tol),
            message_bound: config.message_bound.map(F),
            reuse: config.reuse,
            horizon: None,
            episodes: None,
            oracle_cap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationSection {
    pub valid: bool,
    pub violations: Vec<ViolationSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationSection {
    pub kind: String,
    pub message: String,
}

impl ValidationSection {
    pub fn from_report(report: &ValidationReport) -> ValidationSection {
        ValidationSection {
            valid: report.is_valid(),
            violations: report
                .violations
                .iter()
                .map(|v| ViolationSection {
                    kind: violation_kind_name(v.kind).to_string(),
                    message: v.message.clone(),
                })
                .collect(),
        }
    }
}

fn violation_kind_name(kind: ViolationKind) -> &'static str {
    match kind {
        ViolationKind::ScopeIntersection => "scope-intersection",
        ViolationKind::InternalIntersection => "internal-intersection",
        ViolationKind::InconsistentDynamics => "inconsistent-dynamics",
        ViolationKind::WeightTotals => "weight-totals",
        ViolationKind::WeightMarginals => "weight-marginals",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTable {
    pub subsystem: String,
    pub table: Vec<F>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSection {
    pub objective: F,
    pub rounds: usize,
    pub doublings: usize,
    pub message_bound: F,
    pub standalone_solves: usize,
    pub message_lp_solves: usize,
    pub values: Vec<NamedTable>,
    pub messages: Vec<NamedTable>,
    pub flows: Vec<NamedTable>,
    /// Reconstructed joint values over tree-internal assignments, present
    /// when the joint state space is small enough to enumerate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_values: Option<Vec<F>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse: Option<ReuseSection>,
    pub trace: Vec<RoundSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReuseSection {
    pub standalone_hits: usize,
    pub message_lp_hits: usize,
    pub donated_local_rows: usize,
    pub donated_subtree_rows: usize,
    pub rejected_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundSection {
    pub round: usize,
    pub message_bound: F,
    pub message_lps: Vec<MessageLpSection>,
    pub standalone_runs: Vec<String>,
    pub rows_added: usize,
    pub max_message_delta: F,
    /// (local bank rows, subtree bank rows) per subsystem, tree order.
    pub bank_sizes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageLpSection {
    pub subsystem: String,
    pub objective: F,
    pub bounded: bool,
    pub subtree_row_added: bool,
}

impl PlanSection {
    pub fn from_result(tree: &SubsystemTree, result: &PlanResult) -> PlanSection {
        let name = |j: usize| tree.subsystems[j].name.clone();
        let tables = |per: &[Vec<f64>]| {
            per.iter()
                .enumerate()
                .map(|(j, t)| NamedTable { subsystem: name(j), table: fv(t) })
                .collect::<Vec<_>>()
        };
        PlanSection {
            objective: F(result.objective),
            rounds: result.rounds,
            doublings: result.doublings,
            message_bound: F(result.message_bound),
            standalone_solves: result.standalone_solves,
            message_lp_solves: result.message_lp_solves,
            values: tables(&result.v),
            messages: tables(&result.messages),
            flows: tables(&result.flows),
            joint_values: joint_values(tree, &result.v, JOINT_VALUES_CAP).map(|t| fv(&t)),
            reuse: result.reuse.as_ref().map(|r| ReuseSection {
                standalone_hits: r.standalone_hits,
                message_lp_hits: r.message_lp_hits,
                donated_local_rows: r.donated_local_rows.len(),
                donated_subtree_rows: r.donated_subtree_rows.len(),
                rejected_rows: r.rejected_rows,
            }),
            trace: result
                .trace
                .iter()
                .map(|rec| RoundSection {
                    round: rec.round,
                    message_bound: F(rec.message_bound),
                    message_lps: rec
                        .message_lp_runs
                        .iter()
                        .map(|run| MessageLpSection {
                            subsystem: name(run.subsystem),
                            objective: F(run.objective),
                            bounded: run.bounded,
                            subtree_row_added: run.subtree_row_added,
                        })
                        .collect(),
                    standalone_runs: rec.standalone_runs.iter().map(|&j| name(j)).collect(),
                    rows_added: rec.rows_added,
                    max_message_delta: F(rec.max_message_delta),
                    bank_sizes: rec.bank_sizes.clone(),
                })
                .collect(),
        }
    }
}

/// Joint state spaces up to this size get the reconstructed value table in
/// the report.
pub const JOINT_VALUES_CAP: usize = 1 << 12;

/// Sums the per-subsystem value tables into a joint table over tree-internal
/// assignments (canonical order), or None when that space exceeds `cap`.
pub fn joint_values(tree: &SubsystemTree, v: &[Vec<f64>], cap: usize) -> Option<Vec<f64>> {
    let model = &tree.model;
    let state_scope = tree.tree_internal();
    let n = model.scope_count_checked(&state_scope).ok()?;
    if n > cap {
        return None;
    }
    let mut out = vec![0.0; n];
    for (s, slot) in out.iter_mut().enumerate() {
        let assignment = model.assignment_at(&state_scope, s);
        for (j, sub) in tree.subsystems.iter().enumerate() {
            let local = assignment.restrict(model, &sub.internal).expect("internal is in scope");
            *slot += v[j][local.index(model)];
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSection {
    pub centralized_objective: F,
    /// |plan objective - centralized objective|.
    pub objective_delta: F,
    /// Max |plan value - centralized value| over all subsystems and entries.
    pub max_value_delta: F,
    /// Max |plan message - centralized message|. Alternate optima can make
    /// this large even when both solutions are optimal.
    pub max_message_delta: F,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactSection {
    pub objective: F,
    /// |plan objective - exact objective|.
    pub objective_delta: F,
    /// Exact joint values, canonical tree-internal order, when small enough.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_values: Option<Vec<F>>,
}

impl OracleSection {
    pub fn build(
        plan: &PlanResult,
        centralized: &CentralizedFactoredSolution,
        exact: Option<&ExactSolution>,
        exact_skipped: Option<String>,
    ) -> OracleSection {
        let max_delta = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max)
        };
        OracleSection {
            centralized_objective: F(centralized.objective),
            objective_delta: F((plan.objective - centralized.objective).abs()),
            max_value_delta: F(max_delta(&plan.v, &centralized.v)),
            max_message_delta: F(max_delta(&plan.messages, &centralized.s)),
            exact: exact.map(|e| ExactSection {
                objective: F(e.objective),
                objective_delta: F((plan.objective - e.objective).abs()),
                joint_values: if e.v.len() <= JOINT_VALUES_CAP { Some(fv(&e.v)) } else { None },
            }),
            exact_skipped,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodesSection {
    pub horizon: usize,
    pub count: usize,
    pub mean_return: F,
    pub episodes: Vec<EpisodeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSection {
    pub discounted_return: F,
    pub steps: Vec<StepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSection {
    pub state: Vec<usize>,
    pub action: Vec<usize>,
    pub reward: F,
}

impl EpisodesSection {
    pub fn build(horizon: usize, episodes: &[Episode]) -> EpisodesSection {
        let mean = if episodes.is_empty() {
            0.0
        } else {
            episodes.iter().map(|e| e.discounted_return).sum::<f64>() / episodes.len() as f64
        };
        EpisodesSection {
            horizon,
            count: episodes.len(),
            mean_return: F(mean),
            episodes: episodes
                .iter()
                .map(|e| EpisodeSection {
                    discounted_return: F(e.discounted_return),
                    steps: e
                        .steps
                        .iter()
                        .map(|s| StepSection {
                            state: s.state.clone(),
                            action: s.action.clone(),
                            reward: F(s.reward),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSection {
    pub total_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_ms: Option<u64>,
}

/// Convenience for the compare command: a validation section for a tree and
/// weights that already parsed.
pub fn validation_section(tree: &SubsystemTree, weights: &RelevanceWeights) -> ValidationSection {
    ValidationSection::from_report(&crate::validate::validate(tree, Some(weights)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::planner::run_planner;

    #[test]
    fn floats_round_trip_exactly_through_the_text_form() {
        for &x in &[
            54.0,
            0.1 + 0.2,
            -1.0 / 3.0,
            1e-300,
            -9.040117900598489,
            f64::MIN_POSITIVE,
            0.0,
        ] {
            let json = serde_json::to_string(&F(x)).unwrap();
            let back: f64 = serde_json::from_str(&json).unwrap();
            assert_eq!(x.to_bits(), back.to_bits(), "{} -> {} -> {}", x, json, back);
        }
        assert_eq!(serde_json::to_string(&F(54.0)).unwrap(), "5.4000000000000000e1");
    }

    #[test]
    fn non_finite_values_refuse_to_serialize() {
        assert!(serde_json::to_string(&F(f64::NAN)).is_err());
        assert!(serde_json::to_string(&F(f64::INFINITY)).is_err());
    }

    #[test]
    fn a_full_plan_report_renders_identically_twice_and_round_trips() {
        let tree = models::tandem();
        let weights = RelevanceWeights::all_ones(&tree);
        let config = PlannerConfig::default();
        let result = run_planner(&tree, &weights, &config).unwrap();

        let mut report = Report::new("plan", "tandem.hmdp", validation_section(&tree, &weights));
        report.config = Some(ConfigSection::from_planner(&config));
        report.plan = Some(PlanSection::from_result(&tree, &result));

        let a = report.render();
        let b = report.render();
        assert_eq!(a, b);

        let parsed: Report = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed.schema, REPORT_SCHEMA);
        let plan = parsed.plan.unwrap();
        assert_eq!(plan.objective.0.to_bits(), result.objective.to_bits());
        for (sec, orig) in plan.values.iter().zip(&result.v) {
            for (f, o) in sec.table.iter().zip(orig) {
                assert_eq!(f.0.to_bits(), o.to_bits());
            }
        }
    }

    #[test]
    fn joint_values_reconstruct_the_two_subsystem_sum() {
        let tree = models::tandem();
        let weights = RelevanceWeights::all_ones(&tree);
        let result = run_planner(&tree, &weights, &PlannerConfig::default()).unwrap();
        let joint = joint_values(&tree, &result.v, JOINT_VALUES_CAP).unwrap();
        // Joint state order is (x, y) with y fastest.
        for (s, &jv) in joint.iter().enumerate() {
            let want = result.v[0][s / 2] + result.v[1][s % 2];
            assert!((jv - want).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_joint_spaces_are_omitted() {
        let tree = models::tandem();
        let weights = RelevanceWeights::all_ones(&tree);
        let result = run_planner(&tree, &weights, &PlannerConfig::default()).unwrap();
        assert!(joint_values(&tree, &result.v, 2).is_none());
    }
}
