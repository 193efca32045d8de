//! Query and verdict JSON.
//!
//! ```json
//! {"goal": {"kind": "feasible",
//!           "constraints": [{"terms": [{"layer": 7, "index": 0, "coeff": 1}], "cmp": ">", "rhs": 11}]}}
//! ```
//!
//! Goal kinds: `feasible`, `layer_mismatch` (`pairs` of `orig`/`twin`
//! references and a `tolerance`), `argmax_mismatch` (`orig`, `twin`,
//! `delta`), and the shortcuts `phase` (`neuron`, `segment`), `forward`
//! (`neuron`, `line`, `k`, optional `tolerance`) and `result_preserving`
//! (`neuron`, `line`, `delta`). The query may embed `network` and `box`.

use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::net::{network_from_value, Line, Network, NeuronRef};
use crate::prop::InputBox;

use super::{
    build_forward_query, build_phase_query, build_result_preserving_query, Cmp, Goal,
    LinearConstraint, Query, Verdict, DEFAULT_TOLERANCE,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TermSpec {
    layer: usize,
    index: usize,
    coeff: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintSpec {
    terms: Vec<TermSpec>,
    cmp: Cmp,
    rhs: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSpec {
    orig: NeuronRef,
    twin: NeuronRef,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum GoalSpec {
    Feasible {
        constraints: Vec<ConstraintSpec>,
    },
    LayerMismatch {
        pairs: Vec<PairSpec>,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    ArgmaxMismatch {
        orig: Vec<NeuronRef>,
        twin: Vec<NeuronRef>,
        #[serde(default)]
        delta: f64,
    },
    Phase {
        neuron: NeuronRef,
        segment: usize,
    },
    Forward {
        neuron: NeuronRef,
        line: Line,
        k: usize,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    ResultPreserving {
        neuron: NeuronRef,
        line: Line,
        #[serde(default)]
        delta: f64,
    },
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Reads a query file. `net` and `input` are used unless the file embeds
/// its own `network` / `box`. Phase goals may expand to two queries; the
/// goal is reachable iff any of them is SAT.
pub fn queries_from_json(
    text: &str,
    net: Option<&Network>,
    input: Option<&InputBox>,
) -> Result<Vec<Query>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse("$", "expected an object"))?;
    let net = match obj.get("network") {
        Some(v) => network_from_value(v)?,
        None => net
            .cloned()
            .ok_or_else(|| Error::parse("$.network", "no network given"))?,
    };
    let input = match obj.get("box") {
        Some(v) => {
            let b: InputBox = serde_json::from_value(v.clone())
                .map_err(|e| Error::parse("$.box", e.to_string()))?;
            InputBox::new(b.dims)?
        }
        None => input
            .cloned()
            .ok_or_else(|| Error::parse("$.box", "no box given"))?,
    };
    input.check_network(&net)?;
    let goal_v = obj
        .get("goal")
        .ok_or_else(|| Error::parse("$.goal", "missing required key"))?;
    let spec: GoalSpec = serde_json::from_value(goal_v.clone())
        .map_err(|e| Error::parse("$.goal", e.to_string()))?;

    let check = |r: NeuronRef| -> Result<NeuronRef> {
        if net.contains(r) {
            Ok(r)
        } else {
            Err(Error::parse("$.goal", format!("no neuron {r} in network")))
        }
    };
    let plain = |goal: Goal| Query {
        network: net.clone(),
        input: input.clone(),
        goal,
        label: "query".into(),
    };
    Ok(match spec {
        GoalSpec::Feasible { constraints } => {
            let mut cs = Vec::new();
            for c in constraints {
                let mut terms = Vec::new();
                for t in c.terms {
                    terms.push((check(NeuronRef::new(t.layer, t.index))?, t.coeff));
                }
                cs.push(LinearConstraint::new(terms, c.cmp, c.rhs));
            }
            vec![plain(Goal::Feasible(cs))]
        }
        GoalSpec::LayerMismatch { pairs, tolerance } => {
            let mut ps = Vec::new();
            for p in pairs {
                ps.push((check(p.orig)?, check(p.twin)?));
            }
            vec![plain(Goal::LayerMismatch {
                pairs: ps,
                tolerance,
            })]
        }
        GoalSpec::ArgmaxMismatch { orig, twin, delta } => {
            if orig.len() != twin.len() || orig.len() < 2 {
                return Err(Error::parse(
                    "$.goal",
                    "orig and twin need the same length, at least 2",
                ));
            }
            for &r in orig.iter().chain(&twin) {
                check(r)?;
            }
            vec![plain(Goal::ArgmaxMismatch {
                orig,
                twin,
                margin: delta,
            })]
        }
        GoalSpec::Phase { neuron, segment } => build_phase_query(&net, &input, neuron, segment)?,
        GoalSpec::Forward {
            neuron,
            line,
            k,
            tolerance,
        } => vec![build_forward_query(
            &net, &input, neuron, line, k, tolerance,
        )?],
        GoalSpec::ResultPreserving {
            neuron,
            line,
            delta,
        } => vec![build_result_preserving_query(
            &net, &input, neuron, line, delta,
        )?],
    })
}

/// `{"status": "sat"|"unsat"|"unknown", "witness": [...]?, "nodes": n}`;
/// unknown verdicts also list the unexplored boxes as `frontier`.
pub fn verdict_to_json(v: &Verdict) -> Value {
    match v {
        Verdict::Sat { witness, nodes } => {
            json!({"status": "sat", "witness": witness, "nodes": nodes})
        }
        Verdict::Unsat { nodes } => json!({"status": "unsat", "nodes": nodes}),
        Verdict::Unknown { nodes, frontier } => {
            json!({"status": "unknown", "nodes": nodes, "frontier": frontier})
        }
    }
}
