//! Bundled example models, also shipped as model files under `models/`.

use crate::model::{BasicSubsystem, Model, SubsystemTree, VariableDecl};

/// Two subsystems in series. State variables x, y and action variables a, b;
/// dynamics x' = a, y' = b AND x; reward 10y - 3x; discount 0.9. The upstream
/// subsystem owns x and pays -3 per step at x = 1; the downstream one owns y
/// and earns 10 per step at y = 1, but needs x = 1 to reach it. The exact
/// value function is (54, 64, 60, 70) over xy = (00, 01, 10, 11).
pub fn tandem() -> SubsystemTree {
    let model = Model::new(vec![
        VariableDecl::numbered("x", 2),
        VariableDecl::numbered("y", 2),
        VariableDecl::numbered("a", 2),
        VariableDecl::numbered("b", 2),
    ])
    .unwrap();
    // scope (x, a): reward -3x, transition x' = a
    let upstream = BasicSubsystem::new(
        &model,
        "upstream",
        model.scope_of(&["x"]).unwrap(),
        model.scope_of(&["a"]).unwrap(),
        vec![0.0, 0.0, -3.0, -3.0],
        vec![
            1.0, 0.0, // x=0 a=0
            0.0, 1.0, // x=0 a=1
            1.0, 0.0, // x=1 a=0
            0.0, 1.0, // x=1 a=1
        ],
    )
    .unwrap();
    // scope (x, y, b): reward 10y, transition y' = b AND x
    let mut cpt = Vec::new();
    for xi in 0..2 {
        for _yi in 0..2 {
            for bi in 0..2 {
                if xi == 1 && bi == 1 {
                    cpt.extend([0.0, 1.0]);
                } else {
                    cpt.extend([1.0, 0.0]);
                }
            }
        }
    }
    let downstream = BasicSubsystem::new(
        &model,
        "downstream",
        model.scope_of(&["y"]).unwrap(),
        model.scope_of(&["x", "b"]).unwrap(),
        vec![0.0, 0.0, 10.0, 10.0, 0.0, 0.0, 10.0, 10.0],
        cpt,
    )
    .unwrap();
    SubsystemTree::new(model, vec![upstream, downstream], vec![None, Some(0)], 0.9).unwrap()
}

/// Bernoulli CPT helper: rows of (P(v'=0), P(v'=1)) from P(v'=1) per row.
fn two_col(p1: &[f64]) -> Vec<f64> {
    p1.iter().flat_map(|&p| [1.0 - p, p]).collect()
}

/// Three-subsystem engine sketch: a control node owning `power`, with a fuel
/// subsystem owning `o2` and a drivetrain subsystem owning `speed` below it.
/// Stochastic dynamics throughout; separators are (o2) and (power).
pub fn engine() -> SubsystemTree {
    let model = Model::new(vec![
        VariableDecl::numbered("o2", 2),
        VariableDecl::numbered("power", 2),
        VariableDecl::numbered("speed", 2),
        VariableDecl::numbered("fuel", 2),
        VariableDecl::numbered("air", 2),
        VariableDecl::numbered("gear", 2),
        VariableDecl::numbered("brake", 2),
    ])
    .unwrap();
    // control: scope (o2, power, gear); power' depends on o2 and gear
    let mut p_power = Vec::new();
    for o2 in 0..2 {
        for _power in 0..2 {
            for gear in 0..2 {
                p_power.push(if o2 == 1 && gear == 1 { 0.95 } else { 0.1 });
            }
        }
    }
    let control = BasicSubsystem::new(
        &model,
        "control",
        model.scope_of(&["power"]).unwrap(),
        model.scope_of(&["o2", "gear"]).unwrap(),
        vec![0.0; 8],
        two_col(&p_power),
    )
    .unwrap();
    // fuel system: scope (o2, fuel, air); burning fuel with air raises o2
    let mut p_o2 = Vec::new();
    let mut r_fuel = Vec::new();
    for o2 in 0..2 {
        for fuel in 0..2 {
            for air in 0..2 {
                p_o2.push(if fuel == 1 && air == 1 {
                    0.9
                } else if o2 == 1 {
                    0.5
                } else {
                    0.05
                });
                r_fuel.push(if fuel == 1 { -1.0 } else { 0.0 });
            }
        }
    }
    let fuel_system = BasicSubsystem::new(
        &model,
        "fuel_system",
        model.scope_of(&["o2"]).unwrap(),
        model.scope_of(&["fuel", "air"]).unwrap(),
        r_fuel,
        two_col(&p_o2),
    )
    .unwrap();
    // drivetrain: scope (power, speed, brake); speed rewards 4 per step
    let mut p_speed = Vec::new();
    let mut r_speed = Vec::new();
    for power in 0..2 {
        for speed in 0..2 {
            for brake in 0..2 {
                p_speed.push(if brake == 1 {
                    0.05
                } else if power == 1 {
                    0.9
                } else if speed == 1 {
                    0.6
                } else {
                    0.1
                });
                r_speed.push(if speed == 1 { 4.0 } else { 0.0 });
            }
        }
    }
    let drivetrain = BasicSubsystem::new(
        &model,
        "drivetrain",
        model.scope_of(&["speed"]).unwrap(),
        model.scope_of(&["power", "brake"]).unwrap(),
        r_speed,
        two_col(&p_speed),
    )
    .unwrap();
    SubsystemTree::new(
        model,
        vec![control, fuel_system, drivetrain],
        vec![None, Some(0), Some(0)],
        0.9,
    )
    .unwrap()
}

/// A hub with two structurally identical lines hanging off it: the line
/// subsystems differ only in which variables they mention, so plans for one
/// can be reused for the other.
pub fn duplex() -> SubsystemTree {
    let model = Model::new(vec![
        VariableDecl::numbered("h", 2),
        VariableDecl::numbered("u1", 2),
        VariableDecl::numbered("u2", 2),
        VariableDecl::numbered("d", 2),
        VariableDecl::numbered("c1", 2),
        VariableDecl::numbered("c2", 2),
    ])
    .unwrap();
    // hub: scope (h, d); h' = d with slippage
    let hub = BasicSubsystem::new(
        &model,
        "hub",
        model.scope_of(&["h"]).unwrap(),
        model.scope_of(&["d"]).unwrap(),
        vec![-1.0, -1.0, 0.0, 0.0],
        two_col(&[0.1, 0.9, 0.1, 0.9]),
    )
    .unwrap();
    let line = |name: &str, u: &str, c: &str| {
        // scope (h, u, c): u' likely 1 when the hub is up and we push
        let mut p = Vec::new();
        let mut r = Vec::new();
        for h in 0..2 {
            for u in 0..2 {
                for c in 0..2 {
                    p.push(if h == 1 && c == 1 { 0.85 } else { 0.1 });
                    r.push(if u == 1 { 3.0 } else { 0.0 } + if c == 1 { -0.5 } else { 0.0 });
                }
            }
        }
        BasicSubsystem::new(
            &model,
            name,
            model.scope_of(&[u]).unwrap(),
            model.scope_of(&["h", c]).unwrap(),
            r,
            two_col(&p),
        )
        .unwrap()
    };
    let line1 = line("line1", "u1", "c1");
    let line2 = line("line2", "u2", "c2");
    SubsystemTree::new(model, vec![hub, line1, line2], vec![None, Some(0), Some(0)], 0.9).unwrap()
}

/// A three-link production chain x1 -> x2 -> x3 with one control variable per
/// link and noisy handoffs; rewards grow down the chain so the planner has to
/// coordinate all three links.
pub fn chain3() -> SubsystemTree {
    let model = Model::new(vec![
        VariableDecl::numbered("x1", 2),
        VariableDecl::numbered("x2", 2),
        VariableDecl::numbered("x3", 2),
        VariableDecl::numbered("a1", 2),
        VariableDecl::numbered("a2", 2),
        VariableDecl::numbered("a3", 2),
    ])
    .unwrap();
    // link 1: scope (x1, a1)
    let link1 = BasicSubsystem::new(
        &model,
        "link1",
        model.scope_of(&["x1"]).unwrap(),
        model.scope_of(&["a1"]).unwrap(),
        vec![0.0, -1.0, 2.0, 1.0],
        two_col(&[0.15, 0.9, 0.15, 0.9]),
    )
    .unwrap();
    // link 2: scope (x1, x2, a2)
    let mut p2 = Vec::new();
    let mut r2 = Vec::new();
    for x1 in 0..2 {
        for x2 in 0..2 {
            for a2 in 0..2 {
                p2.push(if a2 == 1 { 0.2 + 0.6 * x1 as f64 } else { 0.05 + 0.1 * x1 as f64 });
                r2.push(3.0 * x2 as f64 - 0.4 * a2 as f64);
            }
        }
    }
    let link2 = BasicSubsystem::new(
        &model,
        "link2",
        model.scope_of(&["x2"]).unwrap(),
        model.scope_of(&["x1", "a2"]).unwrap(),
        r2,
        two_col(&p2),
    )
    .unwrap();
    // link 3: scope (x2, x3, a3)
    let mut p3 = Vec::new();
    let mut r3 = Vec::new();
    for x2 in 0..2 {
        for x3 in 0..2 {
            for a3 in 0..2 {
                p3.push(if a3 == 1 { 0.15 + 0.7 * x2 as f64 } else { 0.1 });
                r3.push(5.0 * x3 as f64 - 0.2 * a3 as f64);
            }
        }
    }
    let link3 = BasicSubsystem::new(
        &model,
        "link3",
        model.scope_of(&["x3"]).unwrap(),
        model.scope_of(&["x2", "a3"]).unwrap(),
        r3,
        two_col(&p3),
    )
    .unwrap();
    SubsystemTree::new(model, vec![link1, link2, link3], vec![None, Some(0), Some(1)], 0.9)
        .unwrap()
}

/// A hub with two identical two-link chains hanging off it. Unlike `duplex`,
/// the repeated parts are whole subtrees (a mid subsystem with a leaf below
/// it), so the interior twins run message LPs of their own. The hub has no
/// action and just drifts, which keeps the twins' coordination problems
/// exactly symmetric.
pub fn twin_chains() -> SubsystemTree {
    let mut decls = vec![VariableDecl::numbered("h", 2)];
    for i in 1..=2 {
        decls.push(VariableDecl::numbered(format!("m{}", i), 2));
        decls.push(VariableDecl::numbered(format!("l{}", i), 2));
        decls.push(VariableDecl::numbered(format!("c{}", i), 2));
        decls.push(VariableDecl::numbered(format!("d{}", i), 2));
    }
    let model = Model::new(decls).unwrap();
    // hub: scope (h), no controls; mild preference for staying up
    let hub = BasicSubsystem::new(
        &model,
        "hub",
        model.scope_of(&["h"]).unwrap(),
        crate::model::Scope::empty(),
        vec![0.0, 0.5],
        two_col(&[0.3, 0.8]),
    )
    .unwrap();
    let mid = |name: &str, m: &str, c: &str| {
        // scope (h, m, c): pushing c works much better when the hub is up
        let mut p = Vec::new();
        let mut r = Vec::new();
        for h in 0..2 {
            for m in 0..2 {
                for c in 0..2 {
                    p.push(if c == 1 { 0.15 + 0.6 * h as f64 + 0.1 * m as f64 } else { 0.1 });
                    r.push(2.0 * m as f64 - 0.5 * c as f64);
                }
            }
        }
        BasicSubsystem::new(
            &model,
            name,
            model.scope_of(&[m]).unwrap(),
            model.scope_of(&["h", c]).unwrap(),
            r,
            two_col(&p),
        )
        .unwrap()
    };
    let leaf = |name: &str, m: &str, l: &str, d: &str| {
        // scope (m, l, d): the leaf needs its mid to be up before d pays off
        let mut p = Vec::new();
        let mut r = Vec::new();
        for m in 0..2 {
            for l in 0..2 {
                for d in 0..2 {
                    p.push(if d == 1 { 0.1 + 0.7 * m as f64 + 0.05 * l as f64 } else { 0.05 });
                    r.push(4.0 * l as f64 - 0.6 * d as f64);
                }
            }
        }
        BasicSubsystem::new(
            &model,
            name,
            model.scope_of(&[l]).unwrap(),
            model.scope_of(&[m, d]).unwrap(),
            r,
            two_col(&p),
        )
        .unwrap()
    };
    let subsystems = vec![
        hub,
        mid("mid1", "m1", "c1"),
        leaf("leaf1", "m1", "l1", "d1"),
        mid("mid2", "m2", "c2"),
        leaf("leaf2", "m2", "l2", "d2"),
    ];
    SubsystemTree::new(model, subsystems, vec![None, Some(0), Some(1), Some(0), Some(3)], 0.9)
        .unwrap()
}

/// A chain of `n` structurally identical links for scaling runs: link i owns
/// x_i, observes the previous link's x and its own switch a_i. Switching on
/// mostly copies the previous link's state forward; rewards grow down the
/// chain so longer chains still need coordination.
pub fn uniform_chain(n: usize) -> SubsystemTree {
    assert!(n >= 1);
    let mut decls: Vec<VariableDecl> = (1..=n).map(|i| VariableDecl::numbered(format!("x{}", i), 2)).collect();
    decls.extend((1..=n).map(|i| VariableDecl::numbered(format!("a{}", i), 2)));
    let model = Model::new(decls).unwrap();
    let mut subs = Vec::with_capacity(n);
    let mut parents = Vec::with_capacity(n);
    for i in 1..=n {
        let xi = format!("x{}", i);
        let ai = format!("a{}", i);
        let (external, p1, reward) = if i == 1 {
            // scope (x1, a1)
            let mut p1 = Vec::new();
            let mut r = Vec::new();
            for x in 0..2 {
                for a in 0..2 {
                    p1.push(if a == 1 { 0.85 } else { 0.1 });
                    r.push(x as f64 - 0.3 * a as f64);
                }
            }
            (model.scope_of(&[&ai]).unwrap(), p1, r)
        } else {
            // scope (x_{i-1}, x_i, a_i)
            let prev = format!("x{}", i - 1);
            let mut p1 = Vec::new();
            let mut r = Vec::new();
            for xp in 0..2 {
                for _x in 0..2 {
                    for a in 0..2 {
                        p1.push(if a == 1 { 0.15 + 0.7 * xp as f64 } else { 0.1 });
                    }
                }
            }
            for _xp in 0..2 {
                for x in 0..2 {
                    for a in 0..2 {
                        r.push(i as f64 * x as f64 - 0.3 * a as f64);
                    }
                }
            }
            (model.scope_of(&[&prev, &ai]).unwrap(), p1, r)
        };
        subs.push(
            BasicSubsystem::new(
                &model,
                format!("link{}", i),
                model.scope_of(&[&xi]).unwrap(),
                external,
                reward,
                two_col(&p1),
            )
            .unwrap(),
        );
        parents.push(if i == 1 { None } else { Some(i - 2) });
    }
    SubsystemTree::new(model, subs, parents, 0.9).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validate;

    #[test]
    fn tandem_structure() {
        let t = tandem();
        assert_eq!(t.len(), 2);
        assert_eq!(t.sepset(1).names(&t.model), vec!["x"]);
        assert!(validate::validate(&t, None).is_valid());
    }

    #[test]
    fn engine_validates() {
        let t = engine();
        assert_eq!(t.len(), 3);
        assert_eq!(t.sepset(1).names(&t.model), vec!["o2"]);
        assert_eq!(t.sepset(2).names(&t.model), vec!["power"]);
        let w = crate::model::RelevanceWeights::all_ones(&t);
        assert!(validate::validate(&t, Some(&w)).is_valid());
    }

    #[test]
    fn duplex_validates() {
        let t = duplex();
        assert_eq!(t.len(), 3);
        let w = crate::model::RelevanceWeights::all_ones(&t);
        assert!(validate::validate(&t, Some(&w)).is_valid());
    }

    #[test]
    fn chain3_validates() {
        let t = chain3();
        assert_eq!(t.len(), 3);
        assert_eq!(t.parent, vec![None, Some(0), Some(1)]);
        assert_eq!(t.sepset(1).names(&t.model), vec!["x1"]);
        assert_eq!(t.sepset(2).names(&t.model), vec!["x2"]);
        let w = crate::model::RelevanceWeights::all_ones(&t);
        assert!(validate::validate(&t, Some(&w)).is_valid());
    }

    #[test]
    fn twin_chains_validates_and_is_symmetric() {
        let t = twin_chains();
        assert_eq!(t.len(), 5);
        assert_eq!(t.parent, vec![None, Some(0), Some(1), Some(0), Some(3)]);
        assert_eq!(t.sepset(1).names(&t.model), vec!["h"]);
        assert_eq!(t.sepset(3).names(&t.model), vec!["h"]);
        assert_eq!(t.sepset(2).names(&t.model), vec!["m1"]);
        assert_eq!(t.sepset(4).names(&t.model), vec!["m2"]);
        // the two chains carry identical tables position for position
        assert_eq!(t.subsystems[1].reward, t.subsystems[3].reward);
        assert_eq!(t.subsystems[1].cpt, t.subsystems[3].cpt);
        assert_eq!(t.subsystems[2].reward, t.subsystems[4].reward);
        assert_eq!(t.subsystems[2].cpt, t.subsystems[4].cpt);
        let w = crate::model::RelevanceWeights::all_ones(&t);
        assert!(validate::validate(&t, Some(&w)).is_valid());
    }

    #[test]
    fn bundled_model_files_match_the_fixtures() {
        // The files write probabilities as clean decimals where the fixtures
        // compute complements, so tables agree to rounding, not bit for bit.
        let cases: [(&str, SubsystemTree); 3] = [
            ("tandem.hmdp", tandem()),
            ("engine.hmdp", engine()),
            ("duplex.hmdp", duplex()),
        ];
        for (file, want) in cases {
            let path = format!("{}/../../models/{}", env!("CARGO_MANIFEST_DIR"), file);
            let text = std::fs::read_to_string(&path).unwrap();
            let got = crate::modelfile::parse_model(&text).unwrap().tree;
            assert_eq!(got.len(), want.len(), "{}", file);
            assert_eq!(got.parent, want.parent, "{}", file);
            assert_eq!(got.discount, want.discount, "{}", file);
            for (g, w) in got.subsystems.iter().zip(&want.subsystems) {
                assert_eq!(g.name, w.name, "{}", file);
                assert_eq!(g.internal.names(&got.model), w.internal.names(&want.model));
                assert_eq!(g.external.names(&got.model), w.external.names(&want.model));
                for (a, b) in g.reward.iter().zip(&w.reward) {
                    assert!((a - b).abs() <= 1e-15, "{} reward {} vs {}", g.name, a, b);
                }
                for (a, b) in g.cpt.iter().zip(&w.cpt) {
                    assert!((a - b).abs() <= 1e-15, "{} cpt {} vs {}", g.name, a, b);
                }
            }
        }
    }

    #[test]
    fn uniform_chain_validates_at_several_lengths() {
        for n in [1, 2, 5, 12] {
            let t = uniform_chain(n);
            assert_eq!(t.len(), n);
            let w = crate::model::RelevanceWeights::all_ones(&t);
            assert!(validate::validate(&t, Some(&w)).is_valid(), "chain of {}", n);
        }
        let t = uniform_chain(3);
        assert_eq!(t.sepset(2).names(&t.model), vec!["x2"]);
        assert_eq!(t.tree_external().names(&t.model), vec!["a1", "a2", "a3"]);
    }
}
