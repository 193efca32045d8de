use crate::error::{Error, Result};
use crate::net::{Line, Network, Neuron, NeuronRef, Term};
use crate::prop::InputBox;

use super::{Cmp, Goal, LinearConstraint, Query, DEFAULT_TOLERANCE};

/// Two copies of a network that share every layer before neuron `v`'s
/// layer. From that layer on, each layer holds the original neurons at
/// indices `0..n` followed by the modified copies at `n..2n`; in the
/// modified copy `v` is the weighted sum `line(source)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinNetwork {
    pub network: Network,
    pub v: NeuronRef,
    pub line: Line,
    sizes: Vec<usize>,
}

impl TwinNetwork {
    pub fn new(base: &Network, v: NeuronRef, line: Line) -> Result<Self> {
        let source = activation_source(base, v)?;
        let p = v.layer;
        let sizes = base.layer_sizes();
        let orig_ref = |s: NeuronRef| s;
        let twin_ref = |s: NeuronRef| {
            if s.layer < p {
                s
            } else {
                NeuronRef::new(s.layer, sizes[s.layer] + s.index)
            }
        };
        let mut layers: Vec<Vec<Neuron>> = base.layers()[..p].to_vec();
        for (l, layer) in base.layers().iter().enumerate().skip(p) {
            let mut out: Vec<Neuron> = layer
                .iter()
                .map(|n| {
                    let mut n = n.clone();
                    n.map_sources(orig_ref);
                    n
                })
                .collect();
            for (i, n) in layer.iter().enumerate() {
                let mut n = if NeuronRef::new(l, i) == v {
                    Neuron::ws(line.intercept, vec![Term::new(source, line.slope)])
                } else {
                    n.clone()
                };
                n.map_sources(twin_ref);
                out.push(n);
            }
            layers.push(out);
        }
        let mut network = Network::new(format!("{}+twin", base.name), layers)?;
        network.metadata = base.metadata.clone();
        Ok(TwinNetwork {
            network,
            v,
            line,
            sizes,
        })
    }

    /// Positions of base neuron `r`'s original and modified copies, or
    /// `None` for shared prefix neurons.
    pub fn pair(&self, r: NeuronRef) -> Option<(NeuronRef, NeuronRef)> {
        if r.layer < self.v.layer || r.layer >= self.sizes.len() || r.index >= self.sizes[r.layer] {
            return None;
        }
        Some((r, NeuronRef::new(r.layer, self.sizes[r.layer] + r.index)))
    }

    /// Pairs for every neuron of base layer `l`.
    pub fn layer_pairs(&self, l: usize) -> Vec<(NeuronRef, NeuronRef)> {
        (0..self.sizes.get(l).copied().unwrap_or(0))
            .filter_map(|i| self.pair(NeuronRef::new(l, i)))
            .collect()
    }

    /// Pairing is total over all suffix neurons.
    pub fn all_pairs(&self) -> Vec<(NeuronRef, NeuronRef)> {
        (self.v.layer..self.sizes.len())
            .flat_map(|l| self.layer_pairs(l))
            .collect()
    }
}

fn activation_source(net: &Network, v: NeuronRef) -> Result<NeuronRef> {
    match net.neuron(v) {
        Some(Neuron::Activation { source, .. }) => Ok(*source),
        Some(_) => Err(Error::Precondition(format!(
            "neuron {v} is not an activation"
        ))),
        None => Err(Error::Precondition(format!("neuron {v} does not exist"))),
    }
}

/// Queries asking whether `v`'s source can leave segment `segment`: one per
/// finite end of the segment.
pub fn build_phase_query(
    net: &Network,
    input: &InputBox,
    v: NeuronRef,
    segment: usize,
) -> Result<Vec<Query>> {
    let source = activation_source(net, v)?;
    let Some(Neuron::Activation { func, .. }) = net.neuron(v) else {
        unreachable!()
    };
    if segment >= func.num_segments() {
        return Err(Error::Precondition(format!(
            "neuron {v} has {} segments, asked for segment {segment}",
            func.num_segments()
        )));
    }
    let (lo, hi) = func.segment_range(segment);
    let mut out = Vec::new();
    if lo.is_finite() {
        out.push(Query {
            network: net.clone(),
            input: input.clone(),
            goal: Goal::Feasible(vec![LinearConstraint::single(source, Cmp::Lt, lo)]),
            label: format!("phase {v}: source < {lo}"),
        });
    }
    if hi.is_finite() {
        out.push(Query {
            network: net.clone(),
            input: input.clone(),
            goal: Goal::Feasible(vec![LinearConstraint::single(source, Cmp::Gt, hi)]),
            label: format!("phase {v}: source > {hi}"),
        });
    }
    Ok(out)
}

/// Does replacing `v` by `line` change any value in base layer
/// `v.layer + k + 1` by more than `tolerance`?
pub fn build_forward_query(
    net: &Network,
    input: &InputBox,
    v: NeuronRef,
    line: Line,
    k: usize,
    tolerance: f64,
) -> Result<Query> {
    activation_source(net, v)?;
    let target = v.layer + k + 1;
    if target >= net.num_layers() {
        return Err(Error::Precondition(format!(
            "k = {k} from layer {} is beyond the output layer {}",
            v.layer,
            net.output_layer()
        )));
    }
    let twin = TwinNetwork::new(net, v, line)?;
    let pairs = twin.layer_pairs(target);
    Ok(Query {
        network: twin.network,
        input: input.clone(),
        goal: Goal::LayerMismatch { pairs, tolerance },
        label: format!(
            "forward {v} -> ({}, {}) at layer {target}",
            line.slope, line.intercept
        ),
    })
}

/// Forward query comparing the output layer.
pub fn forward_query_to_output(
    net: &Network,
    input: &InputBox,
    v: NeuronRef,
    line: Line,
) -> Result<Query> {
    let k = net.output_layer().saturating_sub(v.layer + 1);
    build_forward_query(net, input, v, line, k, DEFAULT_TOLERANCE)
}

/// Does replacing `v` by `line` change the winning class of some input
/// whose original winner leads by more than `margin`?
pub fn build_result_preserving_query(
    net: &Network,
    input: &InputBox,
    v: NeuronRef,
    line: Line,
    margin: f64,
) -> Result<Query> {
    if net.output_dim() < 2 {
        return Err(Error::Precondition(format!(
            "result-preserving queries need at least 2 outputs, network has {}",
            net.output_dim()
        )));
    }
    activation_source(net, v)?;
    let twin = TwinNetwork::new(net, v, line)?;
    let (orig, tw) = twin.layer_pairs(net.output_layer()).into_iter().unzip();
    Ok(Query {
        network: twin.network,
        input: input.clone(),
        goal: Goal::ArgmaxMismatch {
            orig,
            twin: tw,
            margin,
        },
        label: format!(
            "result-preserving {v} -> ({}, {}), margin {margin}",
            line.slope, line.intercept
        ),
    })
}
