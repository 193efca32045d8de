use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::net::{
    replace_activation, saturate_ws_elimination, Line, Network, Neuron, NeuronRef,
    PiecewiseLinearFn,
};
use crate::prop::BoundsMap;

use super::minimal_error_line;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReplacementMode {
    Zero,
    Identity,
    Line(Line),
}

impl ReplacementMode {
    pub fn line(&self) -> Line {
        match self {
            ReplacementMode::Zero => Line::ZERO,
            ReplacementMode::Identity => Line::IDENTITY,
            ReplacementMode::Line(l) => *l,
        }
    }
}

/// Activation `neuron` becomes `mode`, at local error at most `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub neuron: NeuronRef,
    #[serde(flatten)]
    pub mode: ReplacementMode,
    pub epsilon: f64,
}

impl Replacement {
    /// The replacement with the smallest `epsilon` that certifies against
    /// `bounds`.
    pub fn tight(
        net: &Network,
        bounds: &BoundsMap,
        neuron: NeuronRef,
        mode: ReplacementMode,
    ) -> Result<Self> {
        let (func, lo, hi) = source_range(net, bounds, neuron)?;
        let (dlo, dhi) = func.deviation_range(mode.line(), lo, hi);
        let epsilon = match mode {
            ReplacementMode::Zero | ReplacementMode::Identity => dhi.max(0.0),
            ReplacementMode::Line(_) => dlo.abs().max(dhi.abs()),
        };
        let r = Replacement {
            neuron,
            mode,
            epsilon,
        };
        r.certify(net, bounds)?;
        Ok(r)
    }

    /// Checks the local error claim. With `d = f - line` over the source
    /// bounds, Zero and Identity need `0 <= d <= epsilon` and Line needs
    /// `|d| <= epsilon`.
    pub fn certify(&self, net: &Network, bounds: &BoundsMap) -> Result<()> {
        let (func, lo, hi) = source_range(net, bounds, self.neuron)?;
        let fail = |detail: String| {
            Err(Error::Uncertified {
                neuron: self.neuron,
                detail,
            })
        };
        if !(self.epsilon >= 0.0) {
            return fail(format!("epsilon {} is negative", self.epsilon));
        }
        let (dlo, dhi) = func.deviation_range(self.mode.line(), lo, hi);
        match self.mode {
            ReplacementMode::Zero if !(dlo >= 0.0 && dhi <= self.epsilon) => fail(format!(
                "zero needs 0 <= f(x) <= {} for x in [{lo}, {hi}], f ranges over [{dlo}, {dhi}]",
                self.epsilon
            )),
            ReplacementMode::Identity if !(dlo >= 0.0 && dhi <= self.epsilon) => fail(format!(
                "identity needs 0 <= f(x) - x <= {} for x in [{lo}, {hi}], got [{dlo}, {dhi}]",
                self.epsilon
            )),
            ReplacementMode::Line(l) if !(-dlo <= self.epsilon && dhi <= self.epsilon) => {
                fail(format!(
                    "|f(x) - ({} x + {})| <= {} fails on [{lo}, {hi}], deviation [{dlo}, {dhi}]",
                    l.slope, l.intercept, self.epsilon
                ))
            }
            _ => Ok(()),
        }
    }
}

fn source_range<'a>(
    net: &'a Network,
    bounds: &BoundsMap,
    v: NeuronRef,
) -> Result<(&'a PiecewiseLinearFn, f64, f64)> {
    match net.neuron(v) {
        Some(Neuron::Activation { source, func }) => {
            let iv = bounds.get(*source);
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(Error::Uncertified {
                    neuron: v,
                    detail: format!(
                        "source bounds [{}, {}] are not a finite interval",
                        iv.lo, iv.hi
                    ),
                });
            }
            Ok((func, iv.lo, iv.hi))
        }
        Some(_) => Err(Error::Precondition(format!(
            "neuron {v} is not an activation"
        ))),
        None => Err(Error::Precondition(format!("neuron {v} does not exist"))),
    }
}

/// `N(x) - lo <= N'(x) <= N(x) + hi`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub lo: f64,
    pub hi: f64,
}

impl ErrorBound {
    pub fn max(&self) -> f64 {
        self.lo.max(self.hi)
    }
}

/// Per-neuron bounds on how far the replaced network strays from the
/// original.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLedger {
    errors: Vec<Vec<ErrorBound>>,
    pub replacements: Vec<Replacement>,
}

impl ErrorLedger {
    pub fn get(&self, r: NeuronRef) -> ErrorBound {
        self.errors[r.layer][r.index]
    }

    pub fn outputs(&self) -> &[ErrorBound] {
        self.errors.last().map_or(&[], Vec::as_slice)
    }

    /// Largest one-sided output bound.
    pub fn headline(&self) -> f64 {
        self.outputs()
            .iter()
            .map(ErrorBound::max)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            headline: self.headline(),
            outputs: self.outputs().to_vec(),
            replacements: self.replacements.clone(),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.summary()).expect("ledger serializes")
    }
}

/// Output-level view of a ledger, as stored in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub headline: f64,
    pub outputs: Vec<ErrorBound>,
    pub replacements: Vec<Replacement>,
}

impl LedgerSummary {
    /// No replacements, no error.
    pub fn zero(outputs: usize) -> Self {
        LedgerSummary {
            headline: 0.0,
            outputs: vec![ErrorBound::default(); outputs],
            replacements: Vec::new(),
        }
    }
}

/// Pushes the local errors of `replacements` through the network. Every
/// replacement is certified against `bounds` first.
pub fn propagate_error_bounds(
    net: &Network,
    replacements: &[Replacement],
    bounds: &BoundsMap,
) -> Result<ErrorLedger> {
    if bounds
        .layers()
        .iter()
        .map(Vec::len)
        .ne(net.layers().iter().map(Vec::len))
    {
        return Err(Error::Input("bounds do not match the network shape".into()));
    }
    let mut by_neuron = BTreeMap::new();
    for r in replacements {
        r.certify(net, bounds)?;
        if by_neuron.insert(r.neuron, *r).is_some() {
            return Err(Error::Precondition(format!(
                "neuron {} is replaced twice",
                r.neuron
            )));
        }
    }
    let mut errors: Vec<Vec<ErrorBound>> = Vec::with_capacity(net.num_layers());
    for (l, layer) in net.layers().iter().enumerate() {
        let mut out = Vec::with_capacity(layer.len());
        for (i, neuron) in layer.iter().enumerate() {
            let e = match neuron {
                Neuron::Input => ErrorBound::default(),
                Neuron::WeightedSum { terms, .. } => {
                    let mut e = ErrorBound::default();
                    for t in terms {
                        let s = errors[t.source.layer][t.source.index];
                        if t.coeff >= 0.0 {
                            e.lo += t.coeff * s.lo;
                            e.hi += t.coeff * s.hi;
                        } else {
                            e.lo -= t.coeff * s.hi;
                            e.hi -= t.coeff * s.lo;
                        }
                    }
                    e
                }
                Neuron::Activation { source, func } => {
                    let s = errors[source.layer][source.index];
                    match by_neuron.get(&NeuronRef::new(l, i)) {
                        None => kept(func, s),
                        Some(r) => replaced(r, s),
                    }
                }
            };
            out.push(e);
        }
        errors.push(out);
    }
    Ok(ErrorLedger {
        errors,
        replacements: replacements.to_vec(),
    })
}

fn kept(func: &PiecewiseLinearFn, s: ErrorBound) -> ErrorBound {
    let l = func.max_abs_slope();
    if func.is_nondecreasing() {
        ErrorBound {
            lo: l * s.lo,
            hi: l * s.hi,
        }
    } else {
        let m = l * s.max();
        ErrorBound { lo: m, hi: m }
    }
}

fn replaced(r: &Replacement, s: ErrorBound) -> ErrorBound {
    let eps = r.epsilon;
    match r.mode {
        ReplacementMode::Zero => ErrorBound { lo: eps, hi: 0.0 },
        ReplacementMode::Identity => ErrorBound {
            lo: s.lo + eps,
            hi: s.hi,
        },
        ReplacementMode::Line(line) => {
            let a = line.slope;
            let (lo, hi) = if a >= 0.0 {
                (a * s.lo, a * s.hi)
            } else {
                (-a * s.hi, -a * s.lo)
            };
            ErrorBound {
                lo: lo + eps,
                hi: hi + eps,
            }
        }
    }
}

/// Relaxed replacements for every activation whose source bounds are
/// finite and cross a breakpoint, cheapest first (ties by position).
pub fn relaxed_candidates(net: &Network, bounds: &BoundsMap) -> Vec<Replacement> {
    let mut out = Vec::new();
    for v in net.activation_refs() {
        let Some(Neuron::Activation { source, func }) = net.neuron(v) else {
            continue;
        };
        let iv = bounds.get(*source);
        if !(iv.lo.is_finite() && iv.hi.is_finite())
            || func.segment_containing(iv.lo, iv.hi).is_some()
        {
            continue;
        }
        let (line, e) = if func.is_relu() {
            minimal_error_line(iv.lo, iv.hi).unwrap_or_else(|_| func.relaxed_line(iv.lo, iv.hi))
        } else {
            func.relaxed_line(iv.lo, iv.hi)
        };
        let epsilon = e.max(func.max_error(line, iv.lo, iv.hi));
        out.push(Replacement {
            neuron: v,
            mode: ReplacementMode::Line(line),
            epsilon,
        });
    }
    out.sort_by(|a, b| {
        a.epsilon
            .total_cmp(&b.epsilon)
            .then(a.neuron.cmp(&b.neuron))
    });
    out
}

/// Linearises unstable activations, cheapest first, while every output
/// bound stays within `e_t`. Stops at the first candidate that would break
/// the budget. Returns the replaced and saturated network together with the
/// ledger of the accepted set (relative to `net`).
pub fn greedy_relaxed_removal(
    net: &Network,
    bounds: &BoundsMap,
    e_t: f64,
) -> Result<(Network, ErrorLedger)> {
    if !(e_t >= 0.0) {
        return Err(Error::Precondition(format!(
            "error budget {e_t} must be >= 0"
        )));
    }
    let mut accepted: Vec<Replacement> = Vec::new();
    let mut ledger = propagate_error_bounds(net, &[], bounds)?;
    for cand in relaxed_candidates(net, bounds) {
        accepted.push(cand);
        let next = propagate_error_bounds(net, &accepted, bounds)?;
        if next.headline() <= e_t {
            log::debug!(
                "relaxed {}: epsilon {:.3e}, headline {:.3e}",
                cand.neuron,
                cand.epsilon,
                next.headline()
            );
            ledger = next;
        } else {
            accepted.pop();
            break;
        }
    }
    let mut out = net.clone();
    for r in &accepted {
        out = replace_activation(&out, r.neuron, r.mode.line())?;
    }
    Ok((saturate_ws_elimination(&out), ledger))
}
