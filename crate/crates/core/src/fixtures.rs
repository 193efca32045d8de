//! Small reference networks and a random network generator, shared by the
//! unit tests, the integration tests and the CLI examples.

use rand::Rng;

use crate::net::{Line, Network, Neuron, NeuronRef, PiecewiseLinearFn, Term};
use crate::prop::InputBox;

fn r(layer: usize, index: usize) -> NeuronRef {
    NeuronRef::new(layer, index)
}

fn t(layer: usize, index: usize, coeff: f64) -> Term {
    Term::new(r(layer, index), coeff)
}

/// `y = ReLU(x)` in [`cancel_net`].
pub const CANCEL_Y: NeuronRef = NeuronRef::new(2, 0);
/// `ReLU(x + 1)` in [`cancel_net`], active on the whole of `[-1, 1]`.
pub const CANCEL_SHIFT: NeuronRef = NeuronRef::new(2, 1);

/// One input, three ReLU layers. `y = ReLU(x)` enters the second
/// weighted-sum layer with coefficients `+1` and `-1`, and the third
/// weighted-sum layer adds both results, so `y` cancels there. Output at
/// `x = 1` is `12`.
pub fn cancel_net() -> Network {
    Network::new(
        "cancel_net",
        vec![
            vec![Neuron::Input],
            vec![
                Neuron::ws(0.0, vec![t(0, 0, 1.0)]),
                Neuron::ws(1.0, vec![t(0, 0, 1.0)]),
            ],
            vec![Neuron::relu(r(1, 0)), Neuron::relu(r(1, 1))],
            vec![
                Neuron::ws(1.0, vec![t(2, 0, 1.0), t(2, 1, 1.0)]),
                Neuron::ws(1.0, vec![t(2, 0, -1.0), t(2, 1, 1.0)]),
            ],
            vec![Neuron::relu(r(3, 0)), Neuron::relu(r(3, 1))],
            vec![
                Neuron::ws(0.0, vec![t(4, 0, 1.0), t(4, 1, 1.0)]),
                Neuron::ws(0.0, vec![t(4, 0, 1.0), t(4, 1, 1.0)]),
            ],
            vec![Neuron::relu(r(5, 0)), Neuron::relu(r(5, 1))],
            vec![Neuron::ws(0.0, vec![t(6, 0, 1.0), t(6, 1, 1.0)])],
        ],
    )
    .expect("cancel_net is well formed")
}

/// `ReLU(x)` in [`vote_net`].
pub const VOTE_X: NeuronRef = NeuronRef::new(2, 0);
/// `y = ReLU(x - 0.2)` in [`vote_net`].
pub const VOTE_Y: NeuronRef = NeuronRef::new(2, 1);

/// Two-class classifier: `o1 = 2 ReLU(x) + y`, `o2 = ReLU(x) - y + bias2`
/// with `y = ReLU(x - 0.2)` and `bias2 = 0.1`.
pub fn vote_net() -> Network {
    vote_net_with_bias(0.1)
}

/// [`vote_net`] with a different bias on the second output.
pub fn vote_net_with_bias(bias2: f64) -> Network {
    Network::new(
        "vote_net",
        vec![
            vec![Neuron::Input],
            vec![
                Neuron::ws(0.0, vec![t(0, 0, 1.0)]),
                Neuron::ws(-0.2, vec![t(0, 0, 1.0)]),
            ],
            vec![Neuron::relu(r(1, 0)), Neuron::relu(r(1, 1))],
            vec![
                Neuron::ws(0.0, vec![t(2, 0, 2.0), t(2, 1, 1.0)]),
                Neuron::ws(bias2, vec![t(2, 0, 1.0), t(2, 1, -1.0)]),
            ],
        ],
    )
    .expect("vote_net is well formed")
}

/// `[-1, 1]^dim`.
pub fn unit_box(dim: usize) -> InputBox {
    InputBox::uniform(dim, -1.0, 1.0)
}

/// Deterministic pseudo-weights in `[-1, 1]`.
fn weight(layer: usize, i: usize, j: usize) -> f64 {
    let s = (12.9898 * (i as f64 + 1.0) + 78.233 * (j as f64 + 1.0) + 37.719 * layer as f64).sin()
        * 43758.5453;
    let frac = s - s.floor();
    ((2.0 * frac - 1.0) * 100.0).round() / 100.0
}

/// The hand-built acceptance network: 3 inputs, two ReLU layers of width
/// 10, 2 outputs, meant for the box `[-1, 1]^3`.
///
/// Weights are fixed pseudo-random values rounded to two decimals. Biases
/// are small, except that each hidden pre-activation is shifted just enough
/// to keep one sign on the corner cube `[-1, -0.5]^3`, so the whole network
/// is affine there. Three first-layer units dip only slightly below zero
/// over the full box, which makes them cheap to linearise.
pub fn toy_net() -> Network {
    const DIPS: [f64; 3] = [2e-4, 2e-3, 2e-2];
    let mut dips = 0;
    let corner = InputBox::uniform(3, -1.0, -0.5);
    let mut layers = vec![vec![Neuron::Input; 3]];
    let mut ranges: Vec<(f64, f64)> = corner.dims.iter().map(|d| (d.lo, d.hi)).collect();
    // phase of each previous-layer unit on the corner: the range of its value
    let mut prev_layer = 0;
    for layer in 0..2 {
        let mut pre = Vec::new();
        let mut acts = Vec::new();
        let mut next_ranges = Vec::new();
        for i in 0..10 {
            let terms: Vec<Term> = (0..ranges.len())
                .map(|j| t(prev_layer, j, weight(layer, i, j)))
                .collect();
            let mut bias = 0.25 * weight(layer + 7, i, 11);
            // interval range over the corner; exact since the corner is affine
            let (mut lo, mut hi) = (bias, bias);
            for (tm, &(a, b)) in terms.iter().zip(&ranges) {
                let (p, q) = (tm.coeff * a, tm.coeff * b);
                lo += p.min(q);
                hi += p.max(q);
            }
            if lo < 0.0 && hi > 0.0 {
                let shift = if hi < -lo { -hi - 0.05 } else { -lo + 0.05 };
                bias += shift;
                lo += shift;
                hi += shift;
            }
            let neg: f64 = terms.iter().map(|tm| (-tm.coeff).max(0.0)).sum();
            if layer == 0 && dips < DIPS.len() && 1.5 * neg > 2.0 * DIPS[dips] {
                // minimum over [-1, 1]^3 is exactly -DIPS[dips], reached
                // outside the corner; on the corner the unit stays active
                let abs: f64 = terms.iter().map(|tm| tm.coeff.abs()).sum();
                let shift = abs - DIPS[dips] - bias;
                bias += shift;
                lo += shift;
                hi += shift;
                dips += 1;
            }
            pre.push(Neuron::ws(bias, terms));
            acts.push(Neuron::relu(r(2 * layer + 1, i)));
            next_ranges.push((lo.max(0.0), hi.max(0.0)));
        }
        layers.push(pre);
        layers.push(acts);
        ranges = next_ranges;
        prev_layer = 2 * layer + 2;
    }
    let outputs = (0..2)
        .map(|o| {
            Neuron::ws(
                0.1 * weight(9, o, 3),
                (0..10).map(|j| t(4, j, weight(5, o, j))).collect(),
            )
        })
        .collect();
    layers.push(outputs);
    Network::new("toy", layers).expect("toy net is well formed")
}

/// Shape limits for [`random_network`].
#[derive(Debug, Clone)]
pub struct RandomNetSpec {
    pub max_inputs: usize,
    pub max_hidden_layers: usize,
    pub max_width: usize,
    pub max_outputs: usize,
    pub min_outputs: usize,
    /// Cap on the total number of activation neurons.
    pub max_activations: usize,
    /// Probability that a weighted sum also reads from an older layer.
    pub skip_prob: f64,
    /// Probability that an activation is not a ReLU.
    pub general_pwl_prob: f64,
}

impl Default for RandomNetSpec {
    fn default() -> Self {
        RandomNetSpec {
            max_inputs: 3,
            max_hidden_layers: 3,
            max_width: 6,
            max_outputs: 3,
            min_outputs: 1,
            max_activations: usize::MAX,
            skip_prob: 0.2,
            general_pwl_prob: 0.2,
        }
    }
}

/// A random piecewise-linear activation: ReLU, leaky ReLU, hard-tanh, or
/// absolute value (which has a negative slope).
pub fn random_pwl<R: Rng + ?Sized>(rng: &mut R) -> PiecewiseLinearFn {
    let inf = f64::INFINITY;
    match rng.gen_range(0..4) {
        0 => PiecewiseLinearFn::relu(),
        1 => {
            let a = rng.gen_range(0.05..0.5);
            PiecewiseLinearFn::new(
                vec![-inf, 0.0, inf],
                vec![Line::new(a, 0.0), Line::IDENTITY],
            )
            .unwrap()
        }
        2 => {
            let c = rng.gen_range(0.2..1.5);
            PiecewiseLinearFn::new(
                vec![-inf, -c, c, inf],
                vec![Line::new(0.0, -c), Line::IDENTITY, Line::new(0.0, c)],
            )
            .unwrap()
        }
        _ => {
            let s = rng.gen_range(-0.5..0.5);
            PiecewiseLinearFn::new(
                vec![-inf, s, inf],
                vec![Line::new(-1.0, s), Line::new(1.0, -s)],
            )
            .unwrap()
        }
    }
}

/// A random layered network: alternating weighted-sum and activation
/// layers, then a weighted-sum output layer. Weights are uniform in
/// `[-1, 1]`, biases in `[-0.5, 0.5]`.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, spec: &RandomNetSpec) -> Network {
    let inputs = rng.gen_range(1..=spec.max_inputs);
    let hidden = rng.gen_range(1..=spec.max_hidden_layers);
    let mut layers = vec![vec![Neuron::Input; inputs]];
    let mut budget = spec.max_activations;
    let mut feeders: Vec<usize> = vec![0];

    for _ in 0..hidden {
        if budget == 0 {
            break;
        }
        let width = rng.gen_range(1..=spec.max_width.min(budget));
        budget -= width;
        let ws = random_ws_layer(rng, spec, &layers, &feeders, width);
        let l = layers.len();
        layers.push(ws);
        let acts = (0..width)
            .map(|i| {
                let func = if rng.gen_bool(spec.general_pwl_prob) {
                    random_pwl(rng)
                } else {
                    PiecewiseLinearFn::relu()
                };
                Neuron::Activation {
                    source: r(l, i),
                    func,
                }
            })
            .collect();
        layers.push(acts);
        feeders.push(l + 1);
    }
    let outputs = rng.gen_range(spec.min_outputs..=spec.max_outputs.max(spec.min_outputs));
    let out = random_ws_layer(rng, spec, &layers, &feeders, outputs);
    layers.push(out);
    Network::new("random", layers).expect("generated network is well formed")
}

fn random_ws_layer<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &RandomNetSpec,
    layers: &[Vec<Neuron>],
    feeders: &[usize],
    width: usize,
) -> Vec<Neuron> {
    let prev = *feeders.last().unwrap();
    let mut out = Vec::with_capacity(width);
    for _ in 0..width {
        let mut terms = Vec::new();
        for j in 0..layers[prev].len() {
            if rng.gen_bool(0.85) {
                terms.push(t(prev, j, rng.gen_range(-1.0..1.0)));
            }
        }
        if terms.is_empty() {
            let j = rng.gen_range(0..layers[prev].len());
            terms.push(t(prev, j, rng.gen_range(-1.0..1.0)));
        }
        if feeders.len() > 1 && rng.gen_bool(spec.skip_prob) {
            let older = feeders[rng.gen_range(0..feeders.len() - 1)];
            let j = rng.gen_range(0..layers[older].len());
            terms.push(t(older, j, rng.gen_range(-1.0..1.0)));
        }
        out.push(Neuron::ws(rng.gen_range(-0.5..0.5), terms));
    }
    out
}
