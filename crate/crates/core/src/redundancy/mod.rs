//! Which activations can go, and at what cost.
//!
//! Four kinds of redundancy are recognised. A *phase-redundant* activation
//! never leaves one linear segment over the box. A *forward-redundant* one
//! can be swapped for a line without changing a later layer. A
//! *result-preserving* one can be swapped without changing the winning
//! output. A *relaxed-redundant* one is swapped for a line at a bounded
//! local error, and the [`ErrorLedger`] tracks how that error reaches the
//! outputs.

mod ledger;
mod simulate;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::net::{Line, Network, Neuron, NeuronRef};
use crate::prop::{BoundsMap, InputBox, Interval};
use crate::verify::{build_forward_query, build_phase_query, build_result_preserving_query, Query};

pub use ledger::{
    greedy_relaxed_removal, propagate_error_bounds, relaxed_candidates, ErrorBound, ErrorLedger,
    LedgerSummary, Replacement, ReplacementMode,
};
pub use simulate::{simulate_filter, Counterexample, SimulationOutcome};

/// The segment of `v`'s function that contains all of its source's
/// bounds, if there is one.
pub fn classify_phase_by_bounds(net: &Network, bounds: &BoundsMap, v: NeuronRef) -> Option<usize> {
    let Some(Neuron::Activation { source, func }) = net.neuron(v) else {
        return None;
    };
    let iv = bounds.get(*source);
    if iv.is_empty() {
        return None;
    }
    func.segment_containing(iv.lo, iv.hi)
}

/// The line minimising `max |relu(x) - line(x)|` over `[lb, ub]`, with that
/// maximum. Needs `lb < 0 < ub`.
pub fn minimal_error_line(lb: f64, ub: f64) -> Result<(Line, f64)> {
    if !(lb < 0.0 && 0.0 < ub) || !lb.is_finite() || !ub.is_finite() {
        return Err(Error::Precondition(format!(
            "minimal error line needs finite lb < 0 < ub, got [{lb}, {ub}]"
        )));
    }
    let a = ub / (ub - lb);
    let e = -lb * ub / (2.0 * (ub - lb));
    Ok((Line::new(a, e), e))
}

/// A removal question about one activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Candidate {
    /// The source never leaves `segment`.
    Phase { neuron: NeuronRef, segment: usize },
    /// Replacing by `line` leaves layer `neuron.layer + k + 1` within
    /// `tolerance`.
    Forward {
        neuron: NeuronRef,
        line: Line,
        k: usize,
        tolerance: f64,
    },
    /// Replacing by `line` never changes a winner that leads by more than
    /// `margin`.
    ResultPreserving {
        neuron: NeuronRef,
        line: Line,
        margin: f64,
    },
}

impl Candidate {
    pub fn neuron(&self) -> NeuronRef {
        match self {
            Candidate::Phase { neuron, .. }
            | Candidate::Forward { neuron, .. }
            | Candidate::ResultPreserving { neuron, .. } => *neuron,
        }
    }

    /// The line `neuron` becomes when the candidate is accepted.
    pub fn line(&self, net: &Network) -> Option<Line> {
        match self {
            Candidate::Phase { neuron, segment } => match net.neuron(*neuron) {
                Some(Neuron::Activation { func, .. }) => func.pieces().get(*segment).copied(),
                _ => None,
            },
            Candidate::Forward { line, .. } | Candidate::ResultPreserving { line, .. } => {
                Some(*line)
            }
        }
    }

    /// Verification queries whose joint UNSAT proves the candidate.
    pub fn queries(&self, net: &Network, input: &InputBox) -> Result<Vec<Query>> {
        match *self {
            Candidate::Phase { neuron, segment } => build_phase_query(net, input, neuron, segment),
            Candidate::Forward {
                neuron,
                line,
                k,
                tolerance,
            } => Ok(vec![build_forward_query(
                net, input, neuron, line, k, tolerance,
            )?]),
            Candidate::ResultPreserving {
                neuron,
                line,
                margin,
            } => Ok(vec![build_result_preserving_query(
                net, input, neuron, line, margin,
            )?]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RedundancyKind {
    PhaseRedundant { segment: usize },
    ForwardRedundant { k: usize, line: Line },
    ResultPreserving { line: Line, delta: f64 },
    RelaxedRedundant { line: Line, epsilon: f64 },
}

impl RedundancyKind {
    pub fn name(&self) -> &'static str {
        match self {
            RedundancyKind::PhaseRedundant { .. } => "phase",
            RedundancyKind::ForwardRedundant { .. } => "forward",
            RedundancyKind::ResultPreserving { .. } => "result_preserving",
            RedundancyKind::RelaxedRedundant { .. } => "relaxed",
        }
    }

    pub fn line(&self) -> Option<Line> {
        match self {
            RedundancyKind::PhaseRedundant { .. } => None,
            RedundancyKind::ForwardRedundant { line, .. }
            | RedundancyKind::ResultPreserving { line, .. }
            | RedundancyKind::RelaxedRedundant { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    /// Source bounds that fit inside one segment.
    Bounds { source: Interval },
    /// Every listed query was UNSAT.
    Verifier { queries: Vec<String>, nodes: usize },
    /// Local error certified against these source bounds; `headline` is the
    /// ledger's output bound after acceptance.
    Ledger { source: Interval, headline: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyVerdict {
    /// Position in the network as first given to the pipeline.
    pub neuron: NeuronRef,
    pub kind: RedundancyKind,
    pub evidence: Evidence,
}

impl RedundancyVerdict {
    /// Re-checks bound and ledger evidence against `net` (which must still
    /// hold the neuron at `neuron`). Verifier evidence is not re-run.
    pub fn check_evidence(&self, net: &Network) -> bool {
        let Some(Neuron::Activation { func, .. }) = net.neuron(self.neuron) else {
            return false;
        };
        match (&self.kind, &self.evidence) {
            (RedundancyKind::PhaseRedundant { segment }, Evidence::Bounds { source }) => {
                func.segment_containing(source.lo, source.hi) == Some(*segment)
            }
            (
                RedundancyKind::RelaxedRedundant { line, epsilon },
                Evidence::Ledger { source, .. },
            ) => func.max_error(*line, source.lo, source.hi) <= *epsilon,
            (_, Evidence::Verifier { .. }) => true,
            _ => false,
        }
    }
}

/// `{"verdicts": [...]}` with per-kind counts.
pub fn verdicts_to_json(verdicts: &[RedundancyVerdict]) -> Value {
    let count = |name: &str| verdicts.iter().filter(|v| v.kind.name() == name).count();
    json!({
        "counts": {
            "phase": count("phase"),
            "forward": count("forward"),
            "result_preserving": count("result_preserving"),
            "relaxed": count("relaxed"),
        },
        "verdicts": verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::prop::interval_bounds;
    use crate::verify::solve;

    #[test]
    fn phase_by_bounds() {
        let relu = Network::new(
            "r",
            vec![
                vec![Neuron::Input],
                vec![Neuron::relu(NeuronRef::new(0, 0))],
                vec![Neuron::ws(
                    0.0,
                    vec![crate::net::Term::new(NeuronRef::new(1, 0), 1.0)],
                )],
            ],
        )
        .unwrap();
        let v = NeuronRef::new(1, 0);
        let with = |lo, hi| {
            let any = vec![Interval::new(0.0, 2.0)];
            BoundsMap::from_layers(vec![vec![Interval::new(lo, hi)], any.clone(), any])
        };
        assert_eq!(classify_phase_by_bounds(&relu, &with(0.1, 2.0), v), Some(1));
        assert_eq!(classify_phase_by_bounds(&relu, &with(-1.0, 1.0), v), None);
        assert_eq!(
            classify_phase_by_bounds(&relu, &with(-1.0, -0.5), v),
            Some(0)
        );
        assert_eq!(
            classify_phase_by_bounds(&relu, &with(-1.0, 1.0), NeuronRef::new(0, 0)),
            None
        );
    }

    #[test]
    fn cancel_net_shift_is_active_by_bounds() {
        let net = fixtures::cancel_net();
        let b = interval_bounds(&net, &fixtures::unit_box(1)).unwrap();
        assert_eq!(
            classify_phase_by_bounds(&net, &b, fixtures::CANCEL_SHIFT),
            Some(1)
        );
        assert_eq!(classify_phase_by_bounds(&net, &b, fixtures::CANCEL_Y), None);
    }

    #[test]
    fn bound_classification_agrees_with_solver() {
        let net = fixtures::toy_net();
        let corner = InputBox::from_pairs(&[(-1.0, -0.5); 3]).unwrap();
        let b = crate::prop::tighten(&net, &corner, 16).unwrap();
        let mut checked = 0;
        for v in net.activation_refs() {
            if let Some(seg) = classify_phase_by_bounds(&net, &b, v) {
                for q in build_phase_query(&net, &corner, v, seg).unwrap() {
                    assert!(solve(&q, 2000).is_unsat(), "{}", q.label);
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn minimal_error_line_values() {
        let (l, e) = minimal_error_line(-1.0, 1.0).unwrap();
        assert_eq!((l.slope, l.intercept, e), (0.5, 0.25, 0.25));
        let (l, e) = minimal_error_line(-2.0, 2.0).unwrap();
        assert_eq!((l.slope, l.intercept, e), (0.5, 0.5, 0.5));
        assert!(minimal_error_line(0.0, 1.0).is_err());
        assert!(minimal_error_line(-1.0, 0.0).is_err());
        let (_, e) = minimal_error_line(-1e-9, 5.0).unwrap();
        assert!(e < 1e-9);
    }

    #[test]
    fn minimal_error_line_matches_grid_max() {
        for (lb, ub) in [(-1.0, 1.0), (-2.0, 2.0), (-0.3, 4.0), (-5.0, 0.2)] {
            let (l, e) = minimal_error_line(lb, ub).unwrap();
            let grid = (0..=10_000)
                .map(|i| lb + (ub - lb) * i as f64 / 10_000.0)
                .map(|x| (x.max(0.0) - l.eval(x)).abs())
                .fold(0.0, f64::max);
            assert!((grid - e).abs() < 1e-9, "{lb} {ub}: {grid} vs {e}");
        }
    }

    #[test]
    fn verdict_evidence_round_trip() {
        let net = fixtures::cancel_net();
        let v = RedundancyVerdict {
            neuron: fixtures::CANCEL_SHIFT,
            kind: RedundancyKind::PhaseRedundant { segment: 1 },
            evidence: Evidence::Bounds {
                source: Interval::new(0.0, 2.0),
            },
        };
        assert!(v.check_evidence(&net));
        let bad = RedundancyVerdict {
            kind: RedundancyKind::PhaseRedundant { segment: 0 },
            ..v.clone()
        };
        assert!(!bad.check_evidence(&net));
        let j = verdicts_to_json(&[v]);
        assert_eq!(j["counts"]["phase"], 1);
        assert_eq!(j["verdicts"][0]["kind"]["kind"], "phase_redundant");
    }
}
