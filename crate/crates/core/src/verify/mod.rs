//! Verification queries over a network and an input box.
//!
//! A [`Query`] asks whether some input in the box satisfies a [`Goal`].
//! [`solve`] answers by branch and bound: affine envelopes and a small LP
//! prune sub-problems, sampled points look for witnesses, and the search
//! splits either the box or an activation's segment. Every SAT witness is
//! re-evaluated against the goal before it is returned.

mod json;
mod oracle;
mod solver;
mod twin;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::net::{argmax, LayerTrace, Network, NeuronRef};
use crate::prop::InputBox;

pub use json::{queries_from_json, verdict_to_json};
pub use oracle::{brute_force_oracle, OracleVerdict, ORACLE_MAX_ACTIVATIONS, ORACLE_MAX_DIM};
pub use solver::{solve, solve_with, SolveOptions};
pub use twin::{
    build_forward_query, build_phase_query, build_result_preserving_query, forward_query_to_output,
    TwinNetwork,
};

/// Default absolute tolerance for "different values" in mismatch goals.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Margin under which a strict inequality is treated as unsatisfiable when
/// pruning.
pub const STRICT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Cmp {
    pub fn is_strict(self) -> bool {
        matches!(self, Cmp::Lt | Cmp::Gt)
    }

    pub fn is_greater(self) -> bool {
        matches!(self, Cmp::Gt | Cmp::Ge)
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
        }
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        })
    }
}

/// `sum w_r * value(r)  cmp  rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub terms: Vec<(NeuronRef, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn new(terms: Vec<(NeuronRef, f64)>, cmp: Cmp, rhs: f64) -> Self {
        LinearConstraint { terms, cmp, rhs }
    }

    /// `value(r) cmp rhs`.
    pub fn single(r: NeuronRef, cmp: Cmp, rhs: f64) -> Self {
        Self::new(vec![(r, 1.0)], cmp, rhs)
    }

    pub fn lhs(&self, trace: &LayerTrace) -> f64 {
        self.terms.iter().map(|&(r, w)| w * trace.get(r)).sum()
    }

    pub fn holds(&self, trace: &LayerTrace) -> bool {
        self.cmp.holds(self.lhs(trace), self.rhs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Goal {
    /// All constraints hold.
    Feasible(Vec<LinearConstraint>),
    /// Some pair differs by more than `tolerance`.
    LayerMismatch {
        pairs: Vec<(NeuronRef, NeuronRef)>,
        tolerance: f64,
    },
    /// The winner among `orig` beats every other entry by more than `margin`
    /// (when `margin > 0`; plain argmax otherwise), and the winner among
    /// `twin` has a different index. Ties go to the lowest index.
    ArgmaxMismatch {
        orig: Vec<NeuronRef>,
        twin: Vec<NeuronRef>,
        margin: f64,
    },
}

impl Goal {
    /// Every neuron the goal reads.
    pub fn refs(&self) -> Vec<NeuronRef> {
        match self {
            Goal::Feasible(cs) => cs
                .iter()
                .flat_map(|c| c.terms.iter().map(|t| t.0))
                .collect(),
            Goal::LayerMismatch { pairs, .. } => pairs.iter().flat_map(|&(a, b)| [a, b]).collect(),
            Goal::ArgmaxMismatch { orig, twin, .. } => orig.iter().chain(twin).copied().collect(),
        }
    }

    /// Exact check on one evaluation, with no slack.
    pub fn holds(&self, trace: &LayerTrace) -> bool {
        match self {
            Goal::Feasible(cs) => cs.iter().all(|c| c.holds(trace)),
            Goal::LayerMismatch { pairs, tolerance } => pairs
                .iter()
                .any(|&(a, b)| (trace.get(a) - trace.get(b)).abs() > *tolerance),
            Goal::ArgmaxMismatch { orig, twin, margin } => {
                let o: Vec<f64> = orig.iter().map(|&r| trace.get(r)).collect();
                let t: Vec<f64> = twin.iter().map(|&r| trace.get(r)).collect();
                argmax_mismatch(&o, &t, *margin)
            }
        }
    }
}

/// True if `orig`'s winner leads by more than `margin` (any lead when
/// `margin <= 0`) and `twin` picks a different winner.
pub fn argmax_mismatch(orig: &[f64], twin: &[f64], margin: f64) -> bool {
    let i = argmax(orig);
    if margin > 0.0 && !(0..orig.len()).all(|k| k == i || orig[i] - orig[k] > margin) {
        return false;
    }
    argmax(twin) != i
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub network: Network,
    pub input: InputBox,
    pub goal: Goal,
    /// Human-readable description for logs and reports.
    pub label: String,
}

impl Query {
    /// Evaluates the query network at `x` and checks the goal exactly.
    pub fn witnesses(&self, x: &[f64]) -> bool {
        self.input.contains(x)
            && crate::net::evaluate(&self.network, x)
                .map(|tr| self.goal.holds(&tr))
                .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Sat {
        witness: Vec<f64>,
        nodes: usize,
    },
    Unsat {
        nodes: usize,
    },
    Unknown {
        nodes: usize,
        frontier: Vec<InputBox>,
    },
}

impl Verdict {
    pub fn nodes(&self) -> usize {
        match self {
            Verdict::Sat { nodes, .. }
            | Verdict::Unsat { nodes }
            | Verdict::Unknown { nodes, .. } => *nodes,
        }
    }

    pub fn status(&self) -> &'static str {
        match self {
            Verdict::Sat { .. } => "sat",
            Verdict::Unsat { .. } => "unsat",
            Verdict::Unknown { .. } => "unknown",
        }
    }

    pub fn is_sat(&self) -> bool {
        matches!(self, Verdict::Sat { .. })
    }

    pub fn is_unsat(&self) -> bool {
        matches!(self, Verdict::Unsat { .. })
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Verdict::Unknown { .. })
    }
}
