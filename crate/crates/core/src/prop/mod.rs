//! Sound per-neuron bounds over an input box.
//!
//! Three levels of precision: plain interval arithmetic, affine envelopes in
//! the input variables, and best-first bisection of the box on top of either.

mod symbolic;
mod tighten;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Network, Neuron, NeuronRef};

pub(crate) use symbolic::envelopes_upto;
pub use symbolic::{symbolic_bounds, symbolic_envelopes, Affine, Envelopes};
pub use tighten::{tighten, tighten_with, Backend, TightenOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_with(&self, x: f64, tol: f64) -> bool {
        self.lo - tol <= x && x <= self.hi + tol
    }

    /// True if `other` lies inside `self` up to `tol`.
    pub fn encloses(&self, other: &Interval, tol: f64) -> bool {
        self.lo - tol <= other.lo && other.hi <= self.hi + tol
    }

    /// May be empty.
    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    /// `c * self`.
    pub fn scale(&self, c: f64) -> Interval {
        if c >= 0.0 {
            Interval::new(c * self.lo, c * self.hi)
        } else {
            Interval::new(c * self.hi, c * self.lo)
        }
    }
}

/// Axis-aligned input domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub dims: Vec<Interval>,
}

impl InputBox {
    pub fn new(dims: Vec<Interval>) -> Result<Self> {
        for (d, iv) in dims.iter().enumerate() {
            if !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(Error::Input(format!("box dimension {d} is not finite")));
            }
            if iv.lo > iv.hi {
                return Err(Error::Input(format!(
                    "box dimension {d} has lo {} > hi {}",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(InputBox { dims })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(lo, hi)| Interval::new(lo, hi))
                .collect(),
        )
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        InputBox {
            dims: vec![Interval::new(lo, hi); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.dims.iter().map(Interval::mid).collect()
    }

    /// Lowest index among the widest dimensions.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for (d, iv) in self.dims.iter().enumerate() {
            if iv.width() > self.dims[best].width() {
                best = d;
            }
        }
        best
    }

    pub fn max_width(&self) -> f64 {
        self.dims.iter().map(Interval::width).fold(0.0, f64::max)
    }

    /// Halves along dimension `d` (lower half first).
    pub fn bisect(&self, d: usize) -> (InputBox, InputBox) {
        let mid = self.dims[d].mid();
        let mut a = self.clone();
        let mut b = self.clone();
        a.dims[d].hi = mid;
        b.dims[d].lo = mid;
        (a, b)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len() && self.dims.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }

    pub fn encloses(&self, other: &InputBox) -> bool {
        self.dims.len() == other.dims.len()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .all(|(a, b)| a.encloses(b, 0.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dims
            .iter()
            .map(|iv| {
                if iv.width() > 0.0 {
                    rng.gen_range(iv.lo..=iv.hi)
                } else {
                    iv.lo
                }
            })
            .collect()
    }

    /// Pulls `x` into the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (v, iv) in x.iter_mut().zip(&self.dims) {
            *v = v.clamp(iv.lo, iv.hi);
        }
    }

    pub fn check_network(&self, net: &Network) -> Result<()> {
        if self.dim() != net.input_dim() {
            return Err(Error::Input(format!(
                "box has {} dimensions, network has {} inputs",
                self.dim(),
                net.input_dim()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: InputBox =
            serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
        Self::new(raw.dims)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("box serializes")
    }
}

/// `[lb, ub]` for every neuron of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsMap {
    bounds: Vec<Vec<Interval>>,
}

#[derive(Serialize, Deserialize)]
struct BoundEntry {
    layer: usize,
    index: usize,
    lb: f64,
    ub: f64,
}

#[derive(Serialize, Deserialize)]
struct BoundsJson {
    bounds: Vec<BoundEntry>,
}

impl BoundsMap {
    pub fn from_layers(bounds: Vec<Vec<Interval>>) -> Self {
        BoundsMap { bounds }
    }

    /// Every neuron unbounded.
    pub fn unbounded(net: &Network) -> Self {
        BoundsMap {
            bounds: net
                .layer_sizes()
                .into_iter()
                .map(|n| vec![Interval::new(f64::NEG_INFINITY, f64::INFINITY); n])
                .collect(),
        }
    }

    pub fn get(&self, r: NeuronRef) -> Interval {
        self.bounds[r.layer][r.index]
    }

    pub fn set(&mut self, r: NeuronRef, iv: Interval) {
        self.bounds[r.layer][r.index] = iv;
    }

    pub fn layers(&self) -> &[Vec<Interval>] {
        &self.bounds
    }

    pub fn layer(&self, l: usize) -> &[Interval] {
        &self.bounds[l]
    }

    pub fn num_layers(&self) -> usize {
        self.bounds.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronRef, Interval)> + '_ {
        self.bounds.iter().enumerate().flat_map(|(l, layer)| {
            layer
                .iter()
                .enumerate()
                .map(move |(i, &iv)| (NeuronRef::new(l, i), iv))
        })
    }

    /// True if every interval of `other` lies inside the matching one here,
    /// up to `tol`.
    pub fn encloses(&self, other: &BoundsMap, tol: f64) -> bool {
        self.bounds.len() == other.bounds.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((_, a), (_, b))| a.encloses(&b, tol))
    }

    pub fn same_shape(&self, net: &Network) -> bool {
        self.bounds.iter().map(Vec::len).eq(net.layer_sizes())
    }

    pub fn to_json(&self) -> String {
        let json = BoundsJson {
            bounds: self
                .iter()
                .map(|(r, iv)| BoundEntry {
                    layer: r.layer,
                    index: r.index,
                    lb: iv.lo,
                    ub: iv.hi,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&json).expect("bounds serialize")
    }

    /// Reads bounds for `net` from JSON. Missing entries stay unbounded.
    pub fn from_json(text: &str, net: &Network) -> Result<Self> {
        let raw: BoundsJson =
            serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
        let mut out = Self::unbounded(net);
        for (k, e) in raw.bounds.into_iter().enumerate() {
            let r = NeuronRef::new(e.layer, e.index);
            if !net.contains(r) {
                return Err(Error::parse(
                    format!("$.bounds[{k}]"),
                    format!("no neuron {r} in network"),
                ));
            }
            out.set(r, Interval::new(e.lb, e.ub));
        }
        Ok(out)
    }
}

/// Interval for a weighted sum given its sources' intervals.
pub(crate) fn ws_interval(bias: f64, terms: &[crate::net::Term], bounds: &BoundsMap) -> Interval {
    let mut lo = bias;
    let mut hi = bias;
    for t in terms {
        let s = bounds.get(t.source).scale(t.coeff);
        lo += s.lo;
        hi += s.hi;
    }
    Interval::new(lo, hi)
}

/// Layer-by-layer interval arithmetic.
pub fn interval_bounds(net: &Network, input: &InputBox) -> Result<BoundsMap> {
    input.check_network(net)?;
    Ok(interval_with_prior(net, input, None, net.num_layers()))
}

/// Interval arithmetic intersected with `prior` at every neuron, for layers
/// below `upto`. Higher layers keep the prior (or stay unbounded).
pub(crate) fn interval_with_prior(
    net: &Network,
    input: &InputBox,
    prior: Option<&BoundsMap>,
    upto: usize,
) -> BoundsMap {
    let mut out = match prior {
        Some(p) => p.clone(),
        None => BoundsMap::unbounded(net),
    };
    for (l, layer) in net.layers().iter().enumerate().take(upto) {
        for (i, neuron) in layer.iter().enumerate() {
            let r = NeuronRef::new(l, i);
            let iv = match neuron {
                Neuron::Input => input.dims[i],
                Neuron::WeightedSum { bias, terms } => ws_interval(*bias, terms, &out),
                Neuron::Activation { source, func } => {
                    let s = out.get(*source);
                    if s.is_empty() {
                        s
                    } else {
                        let (lo, hi) = func.range_over(s.lo, s.hi);
                        Interval::new(lo, hi)
                    }
                }
            };
            let iv = match prior {
                Some(p) => iv.intersect(&p.get(r)),
                None => iv,
            };
            out.set(r, iv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::net::{evaluate, Term};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn r(l: usize, i: usize) -> NeuronRef {
        NeuronRef::new(l, i)
    }

    #[test]
    fn relu_interval() {
        let net = Network::new(
            "relu",
            vec![
                vec![Neuron::Input],
                vec![Neuron::relu(r(0, 0))],
                vec![Neuron::ws(0.0, vec![Term::new(r(1, 0), 1.0)])],
            ],
        )
        .unwrap();
        let b = interval_bounds(&net, &fixtures::unit_box(1)).unwrap();
        assert_eq!(b.get(r(1, 0)), Interval::new(0.0, 1.0));
    }

    #[test]
    fn sign_split() {
        let net = Network::new(
            "split",
            vec![
                vec![Neuron::Input, Neuron::Input],
                vec![Neuron::ws(
                    1.0,
                    vec![Term::new(r(0, 0), 2.0), Term::new(r(0, 1), -3.0)],
                )],
            ],
        )
        .unwrap();
        let b = interval_bounds(&net, &InputBox::uniform(2, 0.0, 1.0)).unwrap();
        assert_eq!(b.get(r(1, 0)), Interval::new(-2.0, 3.0));
    }

    #[test]
    fn cancel_net_shift_source_is_nonnegative() {
        let net = fixtures::cancel_net();
        let b = interval_bounds(&net, &fixtures::unit_box(1)).unwrap();
        assert_eq!(b.get(r(1, 1)), Interval::new(0.0, 2.0));
        // sample oracle
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let x = rng.gen_range(-1.0..=1.0);
            let v = evaluate(&net, &[x]).unwrap().get(r(1, 1));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 0.0 && hi <= 2.0 && lo < 0.01 && hi > 1.99);
    }

    #[test]
    fn box_json_roundtrip_and_checks() {
        let b = InputBox::from_pairs(&[(-1.0, 1.0), (0.0, 0.5)]).unwrap();
        assert_eq!(
            b.to_json(),
            r#"{"dims":[{"lo":-1.0,"hi":1.0},{"lo":0.0,"hi":0.5}]}"#
        );
        assert_eq!(InputBox::from_json(&b.to_json()).unwrap(), b);
        assert!(InputBox::from_json(r#"{"dims":[{"lo":1,"hi":0}]}"#).is_err());
        assert!(InputBox::from_json(r#"{"dim":[]}"#).is_err());
    }

    #[test]
    fn bounds_json_roundtrip() {
        let net = fixtures::vote_net();
        let b = interval_bounds(&net, &fixtures::unit_box(1)).unwrap();
        assert_eq!(BoundsMap::from_json(&b.to_json(), &net).unwrap(), b);
    }

    #[test]
    fn bisect_and_widest() {
        let b = InputBox::from_pairs(&[(0.0, 1.0), (0.0, 4.0), (0.0, 4.0)]).unwrap();
        assert_eq!(b.widest_dim(), 1);
        let (lo, hi) = b.bisect(1);
        assert_eq!(lo.dims[1], Interval::new(0.0, 2.0));
        assert_eq!(hi.dims[1], Interval::new(2.0, 4.0));
    }
}
