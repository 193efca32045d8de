//! Layered piecewise-linear networks.
//!
//! Layer 0 holds the inputs. Every other neuron is either a weighted sum of
//! neurons in strictly earlier layers (skip connections are allowed) or a
//! piecewise-linear activation of one earlier neuron. Outputs are the
//! weighted sums of the last layer.

mod json;
mod pwl;
mod surgery;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use json::network_from_value;
pub use json::{parse_network, serialize_network};
pub use pwl::{Line, PiecewiseLinearFn, CONTINUITY_TOL};
pub(crate) use surgery::restrict_to_cone;
pub use surgery::{eliminate_ws_neuron, replace_activation, saturate_ws_elimination, to_affine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub index: usize,
}

impl NeuronRef {
    pub const fn new(layer: usize, index: usize) -> Self {
        NeuronRef { layer, index }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub source: NeuronRef,
    pub coeff: f64,
}

impl Term {
    pub fn new(source: NeuronRef, coeff: f64) -> Self {
        Term { source, coeff }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Neuron {
    Input,
    WeightedSum {
        bias: f64,
        terms: Vec<Term>,
    },
    Activation {
        source: NeuronRef,
        func: PiecewiseLinearFn,
    },
}

impl Neuron {
    pub fn ws(bias: f64, terms: Vec<Term>) -> Self {
        Neuron::WeightedSum { bias, terms }
    }

    pub fn relu(source: NeuronRef) -> Self {
        Neuron::Activation {
            source,
            func: PiecewiseLinearFn::relu(),
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Neuron::Activation { .. })
    }

    pub fn is_weighted_sum(&self) -> bool {
        matches!(self, Neuron::WeightedSum { .. })
    }

    /// Neurons this one reads from.
    pub fn sources(&self) -> Vec<NeuronRef> {
        match self {
            Neuron::Input => Vec::new(),
            Neuron::WeightedSum { terms, .. } => terms.iter().map(|t| t.source).collect(),
            Neuron::Activation { source, .. } => vec![*source],
        }
    }

    pub(crate) fn map_sources(&mut self, mut f: impl FnMut(NeuronRef) -> NeuronRef) {
        match self {
            Neuron::Input => {}
            Neuron::WeightedSum { terms, .. } => {
                for t in terms.iter_mut() {
                    t.source = f(t.source);
                }
            }
            Neuron::Activation { source, .. } => *source = f(*source),
        }
    }
}

/// A network plus the bookkeeping needed to trace neurons back to the
/// network they were first loaded as.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    layers: Vec<Vec<Neuron>>,
    /// Position of each neuron in the originally loaded network.
    origins: Vec<Vec<NeuronRef>>,
    pub metadata: BTreeMap<String, String>,
}

impl Network {
    /// Builds a network and checks it with [`validate`].
    pub fn new(name: impl Into<String>, layers: Vec<Vec<Neuron>>) -> Result<Self> {
        let net = Self::new_unchecked(name, layers);
        let violations = validate(&net);
        if let Some(v) = violations.first() {
            return Err(Error::Input(format!(
                "invalid network ({} violation(s)); first: {v}",
                violations.len()
            )));
        }
        Ok(net)
    }

    /// Builds a network without validation. Useful for intermediate encodings
    /// (truncated or twin networks) that need not end in a weighted-sum layer.
    pub fn new_unchecked(name: impl Into<String>, layers: Vec<Vec<Neuron>>) -> Self {
        let origins = layers
            .iter()
            .enumerate()
            .map(|(l, layer)| (0..layer.len()).map(|i| NeuronRef::new(l, i)).collect())
            .collect();
        Network {
            name: name.into(),
            layers,
            origins,
            metadata: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts(
        name: String,
        layers: Vec<Vec<Neuron>>,
        origins: Vec<Vec<NeuronRef>>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        debug_assert_eq!(layers.len(), origins.len());
        Network {
            name,
            layers,
            origins,
            metadata,
        }
    }

    pub fn layers(&self) -> &[Vec<Neuron>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        if self.layers.len() < 2 {
            return 0;
        }
        self.layers.last().map_or(0, Vec::len)
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn neuron(&self, r: NeuronRef) -> Option<&Neuron> {
        self.layers.get(r.layer)?.get(r.index)
    }

    pub fn contains(&self, r: NeuronRef) -> bool {
        self.neuron(r).is_some()
    }

    pub fn origin(&self, r: NeuronRef) -> NeuronRef {
        self.origins[r.layer][r.index]
    }

    /// Current position of the neuron that was loaded at `origin`.
    pub fn find_origin(&self, origin: NeuronRef) -> Option<NeuronRef> {
        self.refs().find(|&r| self.origin(r) == origin)
    }

    /// Forget surgery history: every neuron becomes its own origin.
    pub fn reset_origins(&mut self) {
        for (l, layer) in self.origins.iter_mut().enumerate() {
            for (i, o) in layer.iter_mut().enumerate() {
                *o = NeuronRef::new(l, i);
            }
        }
    }

    /// All neuron references in layer order.
    pub fn refs(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.len()).map(move |i| NeuronRef::new(l, i)))
    }

    /// Hidden neurons: everything outside the input and output layers.
    pub fn hidden_refs(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        let last = self.output_layer();
        self.refs().filter(move |r| r.layer > 0 && r.layer < last)
    }

    pub fn activation_refs(&self) -> Vec<NeuronRef> {
        self.refs()
            .filter(|&r| self.layers[r.layer][r.index].is_activation())
            .collect()
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden_refs().count()
    }

    pub fn num_activations(&self) -> usize {
        self.activation_refs().len()
    }

    /// For every neuron, the neurons that read from it (with multiplicity
    /// collapsed), in layer order.
    pub fn consumers(&self) -> Vec<Vec<Vec<NeuronRef>>> {
        let mut out: Vec<Vec<Vec<NeuronRef>>> = self
            .layers
            .iter()
            .map(|l| vec![Vec::new(); l.len()])
            .collect();
        for r in self.refs() {
            for s in self.layers[r.layer][r.index].sources() {
                let list = &mut out[s.layer][s.index];
                if list.last() != Some(&r) {
                    list.push(r);
                }
            }
        }
        out
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Vec<Neuron>> {
        &mut self.layers
    }

    pub(crate) fn into_parts(
        self,
    ) -> (
        String,
        Vec<Vec<Neuron>>,
        Vec<Vec<NeuronRef>>,
        BTreeMap<String, String>,
    ) {
        (self.name, self.layers, self.origins, self.metadata)
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Input(format!(
                "input has {} components, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Values of every neuron for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub values: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn get(&self, r: NeuronRef) -> f64 {
        self.values[r.layer][r.index]
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().map_or(&[], Vec::as_slice)
    }
}

/// Evaluates every neuron for one input vector.
pub fn evaluate(net: &Network, input: &[f64]) -> Result<LayerTrace> {
    net.check_input(input)?;
    Ok(evaluate_unchecked(net, input))
}

pub(crate) fn evaluate_unchecked(net: &Network, input: &[f64]) -> LayerTrace {
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut out = Vec::with_capacity(layer.len());
        for (i, neuron) in layer.iter().enumerate() {
            out.push(neuron_value(neuron, &values, input, i));
        }
        values.push(out);
    }
    LayerTrace { values }
}

#[inline]
pub(crate) fn neuron_value(neuron: &Neuron, values: &[Vec<f64>], input: &[f64], i: usize) -> f64 {
    match neuron {
        Neuron::Input => input[i],
        Neuron::WeightedSum { bias, terms } => terms.iter().fold(*bias, |acc, t| {
            acc + t.coeff * values[t.source.layer][t.source.index]
        }),
        Neuron::Activation { source, func } => func.eval(values[source.layer][source.index]),
    }
}

/// Output vector only.
pub fn evaluate_output(net: &Network, input: &[f64]) -> Result<Vec<f64>> {
    Ok(evaluate(net, input)?.output().to_vec())
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NoLayers,
    NonInputLayerZero,
    InputOutsideLayerZero,
    OutputNotWeightedSum,
    EmptyLayer,
    ForwardReference(NeuronRef),
    DanglingReference(NeuronRef),
    BadFunction(String),
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub at: Option<NeuronRef>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(at) = self.at {
            write!(f, "neuron {at}: ")?;
        }
        match &self.kind {
            ViolationKind::NoLayers => write!(f, "network needs an input and an output layer"),
            ViolationKind::NonInputLayerZero => write!(f, "layer 0 may only hold inputs"),
            ViolationKind::InputOutsideLayerZero => write!(f, "input neuron outside layer 0"),
            ViolationKind::OutputNotWeightedSum => {
                write!(f, "output neurons must be weighted sums")
            }
            ViolationKind::EmptyLayer => write!(f, "empty layer"),
            ViolationKind::ForwardReference(r) => write!(f, "forward reference to {r}"),
            ViolationKind::DanglingReference(r) => write!(f, "reference to missing neuron {r}"),
            ViolationKind::BadFunction(msg) => write!(f, "{msg}"),
            ViolationKind::NonFinite => write!(f, "non-finite weight or bias"),
        }
    }
}

/// Every structural problem of `net`; empty means valid.
pub fn validate(net: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    if net.layers.len() < 2 {
        out.push(Violation {
            at: None,
            kind: ViolationKind::NoLayers,
        });
    }
    let last = net.layers.len().saturating_sub(1);
    for (l, layer) in net.layers.iter().enumerate() {
        if layer.is_empty() {
            out.push(Violation {
                at: Some(NeuronRef::new(l, 0)),
                kind: ViolationKind::EmptyLayer,
            });
        }
        for (i, neuron) in layer.iter().enumerate() {
            let at = Some(NeuronRef::new(l, i));
            let mut push = |kind| out.push(Violation { at, kind });
            match neuron {
                Neuron::Input if l != 0 => push(ViolationKind::InputOutsideLayerZero),
                Neuron::Input => {}
                _ if l == 0 => push(ViolationKind::NonInputLayerZero),
                _ => {}
            }
            if l == last && l > 0 && !neuron.is_weighted_sum() {
                push(ViolationKind::OutputNotWeightedSum);
            }
            if let Neuron::WeightedSum { bias, terms } = neuron {
                if !bias.is_finite() || terms.iter().any(|t| !t.coeff.is_finite()) {
                    push(ViolationKind::NonFinite);
                }
            }
            if let Neuron::Activation { func, .. } = neuron {
                for issue in func.issues() {
                    push(ViolationKind::BadFunction(issue));
                }
            }
            for s in neuron.sources() {
                if s.layer >= l {
                    push(ViolationKind::ForwardReference(s));
                } else if !net.contains(s) {
                    push(ViolationKind::DanglingReference(s));
                }
            }
        }
    }
    out
}

/// `matrix * x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn input_dim(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.matrix.iter().any(|row| row.len() != x.len()) {
            return Err(Error::Input(format!(
                "affine map expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(self
            .matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, c)| row.iter().zip(x).fold(*c, |acc, (a, xi)| acc + a * xi))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn cancel_net_output_at_one_is_twelve() {
        let net = fixtures::cancel_net();
        assert_eq!(evaluate_output(&net, &[1.0]).unwrap(), vec![12.0]);
    }

    #[test]
    fn vote_net_output_at_half() {
        let net = fixtures::vote_net();
        let out = evaluate_output(&net, &[0.5]).unwrap();
        assert!((out[0] - 1.3).abs() < 1e-12 && (out[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn relu_at_zero_is_zero() {
        let net = Network::new(
            "r",
            vec![
                vec![Neuron::Input],
                vec![Neuron::relu(NeuronRef::new(0, 0))],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(1, 0), 1.0)])],
            ],
        )
        .unwrap();
        assert_eq!(evaluate_output(&net, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let net = fixtures::cancel_net();
        assert!(matches!(evaluate(&net, &[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = fixtures::toy_net();
        let a = evaluate(&net, &[0.1, -0.7, 0.33]).unwrap();
        let b = evaluate(&net, &[0.1, -0.7, 0.33]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_clean_and_broken() {
        assert!(validate(&fixtures::cancel_net()).is_empty());

        let fwd = Network::new_unchecked(
            "fwd",
            vec![
                vec![Neuron::Input],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(2, 0), 1.0)])],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(1, 0), 1.0)])],
            ],
        );
        let v = validate(&fwd);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0].kind, ViolationKind::ForwardReference(_)));

        let bad_fn = PiecewiseLinearFn::new(
            vec![f64::INFINITY, 0.0, f64::NEG_INFINITY],
            vec![Line::ZERO, Line::IDENTITY],
        )
        .unwrap();
        let unsorted = Network::new_unchecked(
            "unsorted",
            vec![
                vec![Neuron::Input],
                vec![Neuron::Activation {
                    source: NeuronRef::new(0, 0),
                    func: bad_fn,
                }],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(1, 0), 1.0)])],
            ],
        );
        let v = validate(&unsorted);
        assert_eq!(v.len(), 1);
        assert_eq!(
            v[0].kind,
            ViolationKind::BadFunction("breakpoints not sorted".into())
        );
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
