use crate::error::Result;
use crate::net::{Line, Network, Neuron, NeuronRef};

use super::{ws_interval, BoundsMap, InputBox, Interval};

/// `coeffs . x + constant` over the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(dim: usize, c: f64) -> Self {
        Affine {
            coeffs: vec![0.0; dim],
            constant: c,
        }
    }

    pub fn var(dim: usize, i: usize) -> Self {
        let mut a = Self::constant(dim, 0.0);
        a.coeffs[i] = 1.0;
        a
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(x)
            .fold(self.constant, |acc, (c, v)| acc + c * v)
    }

    pub fn add_scaled(&mut self, other: &Affine, c: f64) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += c * b;
        }
        self.constant += c * other.constant;
    }

    pub fn min_over(&self, b: &InputBox) -> f64 {
        self.coeffs
            .iter()
            .zip(&b.dims)
            .fold(self.constant, |acc, (&c, iv)| {
                acc + if c >= 0.0 { c * iv.lo } else { c * iv.hi }
            })
    }

    pub fn max_over(&self, b: &InputBox) -> f64 {
        self.coeffs
            .iter()
            .zip(&b.dims)
            .fold(self.constant, |acc, (&c, iv)| {
                acc + if c >= 0.0 { c * iv.hi } else { c * iv.lo }
            })
    }
}

/// Affine lower and upper envelopes of every neuron, valid on the box, plus
/// the concrete bounds they imply.
#[derive(Debug, Clone)]
pub struct Envelopes {
    pub lower: Vec<Vec<Affine>>,
    pub upper: Vec<Vec<Affine>>,
    pub bounds: BoundsMap,
    /// Some neuron's bounds became empty: no input in the box is compatible
    /// with the prior.
    pub infeasible: bool,
}

impl Envelopes {
    pub fn lower(&self, r: NeuronRef) -> &Affine {
        &self.lower[r.layer][r.index]
    }

    pub fn upper(&self, r: NeuronRef) -> &Affine {
        &self.upper[r.layer][r.index]
    }
}

/// `line(s)` bounded using the envelopes of `s`.
fn compose(line: Line, ls: &Affine, us: &Affine, want_lower: bool) -> Affine {
    let src = if (line.slope >= 0.0) == want_lower {
        ls
    } else {
        us
    };
    let mut out = Affine::constant(ls.coeffs.len(), line.intercept);
    out.add_scaled(src, line.slope);
    out
}

/// Affine bound propagation. Unstable activations use
/// [`crate::net::PiecewiseLinearFn::envelopes`]; every concrete bound is
/// intersected with interval arithmetic over the sources and with `prior`.
pub fn symbolic_envelopes(
    net: &Network,
    input: &InputBox,
    prior: Option<&BoundsMap>,
) -> Result<Envelopes> {
    input.check_network(net)?;
    Ok(envelopes_upto(net, input, prior, net.num_layers()))
}

pub(crate) fn envelopes_upto(
    net: &Network,
    input: &InputBox,
    prior: Option<&BoundsMap>,
    upto: usize,
) -> Envelopes {
    let dim = input.dim();
    let mut bounds = match prior {
        Some(p) => p.clone(),
        None => BoundsMap::unbounded(net),
    };
    let mut lower: Vec<Vec<Affine>> = Vec::with_capacity(upto);
    let mut upper: Vec<Vec<Affine>> = Vec::with_capacity(upto);
    let mut infeasible = false;

    for (l, layer) in net.layers().iter().enumerate().take(upto) {
        let mut lo_row = Vec::with_capacity(layer.len());
        let mut hi_row = Vec::with_capacity(layer.len());
        for (i, neuron) in layer.iter().enumerate() {
            let r = NeuronRef::new(l, i);
            let (lo, hi, iv) = match neuron {
                Neuron::Input => {
                    let v = Affine::var(dim, i);
                    (v.clone(), v, input.dims[i])
                }
                Neuron::WeightedSum { bias, terms } => {
                    let mut lo = Affine::constant(dim, *bias);
                    let mut hi = Affine::constant(dim, *bias);
                    for t in terms {
                        let (ls, us) = (
                            &lower[t.source.layer][t.source.index],
                            &upper[t.source.layer][t.source.index],
                        );
                        if t.coeff >= 0.0 {
                            lo.add_scaled(ls, t.coeff);
                            hi.add_scaled(us, t.coeff);
                        } else {
                            lo.add_scaled(us, t.coeff);
                            hi.add_scaled(ls, t.coeff);
                        }
                    }
                    let iv = Interval::new(lo.min_over(input), hi.max_over(input))
                        .intersect(&ws_interval(*bias, terms, &bounds));
                    (lo, hi, iv)
                }
                Neuron::Activation { source, func } => {
                    let s = bounds.get(*source);
                    let (ls, us) = (
                        &lower[source.layer][source.index],
                        &upper[source.layer][source.index],
                    );
                    if s.is_empty() {
                        (ls.clone(), us.clone(), s)
                    } else {
                        let (low_line, up_line) = match func.segment_containing(s.lo, s.hi) {
                            Some(k) => (func.pieces()[k], func.pieces()[k]),
                            None => func.envelopes(s.lo, s.hi),
                        };
                        let lo = compose(low_line, ls, us, true);
                        let hi = compose(up_line, ls, us, false);
                        let (rlo, rhi) = func.range_over(s.lo, s.hi);
                        let iv = Interval::new(lo.min_over(input), hi.max_over(input))
                            .intersect(&Interval::new(rlo, rhi));
                        (lo, hi, iv)
                    }
                }
            };
            let iv = match prior {
                Some(p) => iv.intersect(&p.get(r)),
                None => iv,
            };
            infeasible |= iv.is_empty();
            bounds.set(r, iv);
            lo_row.push(lo);
            hi_row.push(hi);
        }
        lower.push(lo_row);
        upper.push(hi_row);
    }
    Envelopes {
        lower,
        upper,
        bounds,
        infeasible,
    }
}

/// Concrete bounds from affine envelopes.
pub fn symbolic_bounds(net: &Network, input: &InputBox) -> Result<BoundsMap> {
    Ok(symbolic_envelopes(net, input, None)?.bounds)
}
