use rayon::prelude::*;

use crate::error::Result;
use crate::net::{evaluate_unchecked, Network, Neuron, NeuronRef};

use super::symbolic::envelopes_upto;
use super::{interval_with_prior, BoundsMap, InputBox, Interval};

/// Bound computation used on each sub-box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Interval,
    Symbolic,
}

#[derive(Debug, Clone, Copy)]
pub struct TightenOptions {
    /// Maximum number of leaves per neuron and direction.
    pub budget: usize,
    pub backend: Backend,
    pub parallel: bool,
}

impl Default for TightenOptions {
    fn default() -> Self {
        TightenOptions {
            budget: 64,
            backend: Backend::Symbolic,
            parallel: true,
        }
    }
}

fn eval_backend(
    net: &Network,
    input: &InputBox,
    prior: Option<&BoundsMap>,
    upto: usize,
    backend: Backend,
) -> BoundsMap {
    match backend {
        Backend::Interval => interval_with_prior(net, input, prior, upto),
        Backend::Symbolic => envelopes_upto(net, input, prior, upto).bounds,
    }
}

/// Symbolic bounds refined by bisecting the box, up to `budget` leaves per
/// neuron and direction.
pub fn tighten(net: &Network, input: &InputBox, budget: usize) -> Result<BoundsMap> {
    tighten_with(
        net,
        input,
        TightenOptions {
            budget,
            ..TightenOptions::default()
        },
        None,
    )
}

/// Layers are processed in order so that each layer's search benefits from
/// the already tightened bounds of earlier layers. `prior` must be sound on
/// `input` (for instance bounds computed on an enclosing box).
pub fn tighten_with(
    net: &Network,
    input: &InputBox,
    opts: TightenOptions,
    prior: Option<&BoundsMap>,
) -> Result<BoundsMap> {
    input.check_network(net)?;
    let mut bounds = eval_backend(net, input, prior, net.num_layers(), opts.backend);
    if opts.budget <= 1 {
        return Ok(bounds);
    }
    for l in 1..net.num_layers() {
        let size = net.layers()[l].len();
        let work = |i: usize| refine(net, input, &bounds, NeuronRef::new(l, i), opts);
        let refined: Vec<Interval> = if opts.parallel {
            (0..size).into_par_iter().map(work).collect()
        } else {
            (0..size).map(work).collect()
        };
        for (i, iv) in refined.into_iter().enumerate() {
            let r = NeuronRef::new(l, i);
            bounds.set(r, bounds.get(r).intersect(&iv));
        }
    }
    Ok(bounds)
}

/// Bounds for one neuron: the root evaluation with the current prior, then
/// best-first bisection for each direction of a weighted sum. Activation
/// bounds already follow exactly from their source's bounds.
fn refine(
    net: &Network,
    input: &InputBox,
    prior: &BoundsMap,
    r: NeuronRef,
    opts: TightenOptions,
) -> Interval {
    let upto = r.layer + 1;
    let root = eval_backend(net, input, Some(prior), upto, opts.backend).get(r);
    if root.is_empty() || root.width() == 0.0 {
        return root;
    }
    if !matches!(net.neuron(r), Some(Neuron::WeightedSum { .. })) {
        return root;
    }
    let sample = |b: &InputBox| evaluate_unchecked(net, &b.center()).get(r);
    let center = sample(input);
    let hi = search(net, input, prior, r, opts, root.hi, center, true, &sample);
    let lo = search(net, input, prior, r, opts, root.lo, center, false, &sample);
    Interval::new(lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn search(
    net: &Network,
    input: &InputBox,
    prior: &BoundsMap,
    r: NeuronRef,
    opts: TightenOptions,
    root: f64,
    center: f64,
    upper: bool,
    sample: &dyn Fn(&InputBox) -> f64,
) -> f64 {
    // work with maximisation; flip signs for the lower bound
    let sign = if upper { 1.0 } else { -1.0 };
    let mut leaves: Vec<(InputBox, f64)> = vec![(input.clone(), sign * root)];
    let mut best_seen = sign * center;
    let upto = r.layer + 1;
    while leaves.len() < opts.budget {
        let (worst, worst_val) =
            leaves
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, (_, v))| {
                    if *v > bv {
                        (i, *v)
                    } else {
                        (bi, bv)
                    }
                });
        if worst_val - best_seen <= 1e-9 * (1.0 + best_seen.abs()) {
            break;
        }
        let (leaf, parent_val) = leaves.swap_remove(worst);
        if leaf.max_width() <= 0.0 {
            leaves.push((leaf, parent_val));
            break;
        }
        let (a, b) = leaf.bisect(leaf.widest_dim());
        for child in [a, b] {
            let iv = eval_backend(net, &child, Some(prior), upto, opts.backend).get(r);
            let v = if iv.is_empty() {
                f64::NEG_INFINITY
            } else {
                (sign * if upper { iv.hi } else { iv.lo }).min(parent_val)
            };
            best_seen = best_seen.max(sign * sample(&child));
            leaves.push((child, v));
        }
    }
    let best = leaves
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    sign * best
}
