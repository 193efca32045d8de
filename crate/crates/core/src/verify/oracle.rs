//! Exhaustive reference solver for small queries.
//!
//! Every combination of activation segments makes the network affine; the
//! segment constraints and the goal then describe a polytope in the input
//! box, whose emptiness is decided by enumerating its vertices. This path
//! shares no code with bound propagation or the LP used by [`super::solve`].

use crate::error::{Error, Result};
use crate::net::{Network, Neuron, NeuronRef};

use super::{Cmp, Goal, Query};

pub const ORACLE_MAX_ACTIVATIONS: usize = 12;
pub const ORACLE_MAX_DIM: usize = 3;

const FEAS_TOL: f64 = 1e-9;
const STRICT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleVerdict {
    Sat(Vec<f64>),
    Unsat,
}

impl OracleVerdict {
    pub fn is_sat(&self) -> bool {
        matches!(self, OracleVerdict::Sat(_))
    }
}

/// `coeffs . x + constant`.
#[derive(Debug, Clone)]
struct Form {
    coeffs: Vec<f64>,
    constant: f64,
}

impl Form {
    fn zero(d: usize) -> Self {
        Form {
            coeffs: vec![0.0; d],
            constant: 0.0,
        }
    }

    fn axpy(&mut self, c: f64, other: &Form) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += c * b;
        }
        self.constant += c * other.constant;
    }
}

/// `a . x <= b`, or with `strict`, `a . x < b`.
#[derive(Debug, Clone)]
struct Halfspace {
    a: Vec<f64>,
    b: f64,
    strict: bool,
}

impl Halfspace {
    /// `form cmp rhs`.
    fn from_form(form: &Form, cmp: Cmp, rhs: f64) -> Self {
        let (sign, strict) = match cmp {
            Cmp::Lt => (1.0, true),
            Cmp::Le => (1.0, false),
            Cmp::Gt => (-1.0, true),
            Cmp::Ge => (-1.0, false),
        };
        Halfspace {
            a: form.coeffs.iter().map(|c| sign * c).collect(),
            b: sign * (rhs - form.constant),
            strict,
        }
    }
}

/// Decides a query by enumerating every segment assignment of the
/// activations that the goal depends on.
pub fn brute_force_oracle(query: &Query) -> Result<OracleVerdict> {
    let net = &query.network;
    let d = net.input_dim();
    if d > ORACLE_MAX_DIM || query.input.dim() != d {
        return Err(Error::Precondition(format!(
            "oracle needs at most {ORACLE_MAX_DIM} inputs matching the box, got {d}"
        )));
    }
    let cone = ancestors(net, &query.goal.refs());
    let activations = cone
        .iter()
        .filter(|&&r| net.neuron(r).unwrap().is_activation())
        .count();
    if activations > ORACLE_MAX_ACTIVATIONS {
        return Err(Error::Precondition(format!(
            "oracle handles at most {ORACLE_MAX_ACTIVATIONS} activations, query has {activations}"
        )));
    }
    let mut box_faces = Vec::new();
    for (k, iv) in query.input.dims.iter().enumerate() {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        box_faces.push(Halfspace {
            a: e.clone(),
            b: iv.hi,
            strict: false,
        });
        e[k] = -1.0;
        box_faces.push(Halfspace {
            a: e,
            b: -iv.lo,
            strict: false,
        });
    }
    let mut forms: Vec<Vec<Option<Form>>> =
        net.layers().iter().map(|l| vec![None; l.len()]).collect();
    let mut search = Search {
        query,
        cone: &cone,
        d,
    };
    Ok(match search.dfs(0, &mut forms, &mut box_faces) {
        Some(x) => OracleVerdict::Sat(x),
        None => OracleVerdict::Unsat,
    })
}

fn ancestors(net: &Network, roots: &[NeuronRef]) -> Vec<NeuronRef> {
    let mut seen: Vec<Vec<bool>> = net.layers().iter().map(|l| vec![false; l.len()]).collect();
    let mut stack = roots.to_vec();
    while let Some(r) = stack.pop() {
        if !seen[r.layer][r.index] {
            seen[r.layer][r.index] = true;
            stack.extend(net.neuron(r).unwrap().sources());
        }
    }
    net.refs().filter(|r| seen[r.layer][r.index]).collect()
}

struct Search<'a> {
    query: &'a Query,
    cone: &'a [NeuronRef],
    d: usize,
}

impl Search<'_> {
    fn dfs(
        &mut self,
        pos: usize,
        forms: &mut Vec<Vec<Option<Form>>>,
        cons: &mut Vec<Halfspace>,
    ) -> Option<Vec<f64>> {
        if pos == self.cone.len() {
            return self.check_goal(forms, cons);
        }
        let r = self.cone[pos];
        let form_of = |forms: &Vec<Vec<Option<Form>>>, s: NeuronRef| {
            forms[s.layer][s.index].clone().expect("sources come first")
        };
        match self.query.network.neuron(r).unwrap() {
            Neuron::Input => {
                let mut f = Form::zero(self.d);
                f.coeffs[r.index] = 1.0;
                forms[r.layer][r.index] = Some(f);
                self.dfs(pos + 1, forms, cons)
            }
            Neuron::WeightedSum { bias, terms } => {
                let mut f = Form::zero(self.d);
                f.constant = *bias;
                for t in terms {
                    f.axpy(t.coeff, &form_of(forms, t.source));
                }
                forms[r.layer][r.index] = Some(f);
                self.dfs(pos + 1, forms, cons)
            }
            Neuron::Activation { source, func } => {
                let s = form_of(forms, *source);
                for k in 0..func.num_segments() {
                    let (lo, hi) = func.segment_range(k);
                    let before = cons.len();
                    if lo.is_finite() {
                        cons.push(Halfspace::from_form(&s, Cmp::Ge, lo));
                    }
                    if hi.is_finite() {
                        cons.push(Halfspace::from_form(&s, Cmp::Le, hi));
                    }
                    if feasible_point(cons, self.d).is_some() {
                        let piece = func.pieces()[k];
                        let mut f = Form::zero(self.d);
                        f.constant = piece.intercept;
                        f.axpy(piece.slope, &s);
                        forms[r.layer][r.index] = Some(f);
                        if let Some(x) = self.dfs(pos + 1, forms, cons) {
                            return Some(x);
                        }
                    }
                    cons.truncate(before);
                }
                forms[r.layer][r.index] = None;
                None
            }
        }
    }

    fn check_goal(&self, forms: &[Vec<Option<Form>>], cons: &[Halfspace]) -> Option<Vec<f64>> {
        let f = |r: NeuronRef| forms[r.layer][r.index].clone().unwrap();
        let lin = |terms: &[(NeuronRef, f64)]| {
            let mut out = Form::zero(self.d);
            for &(r, w) in terms {
                out.axpy(w, &f(r));
            }
            out
        };
        let mut disjuncts: Vec<Vec<Halfspace>> = Vec::new();
        match &self.query.goal {
            Goal::Feasible(cs) => disjuncts.push(
                cs.iter()
                    .map(|c| Halfspace::from_form(&lin(&c.terms), c.cmp, c.rhs))
                    .collect(),
            ),
            Goal::LayerMismatch { pairs, tolerance } => {
                for &(a, b) in pairs {
                    let diff = lin(&[(a, 1.0), (b, -1.0)]);
                    disjuncts.push(vec![Halfspace::from_form(&diff, Cmp::Gt, *tolerance)]);
                    disjuncts.push(vec![Halfspace::from_form(&diff, Cmp::Lt, -*tolerance)]);
                }
            }
            Goal::ArgmaxMismatch { orig, twin, margin } => {
                let n = orig.len();
                if margin.is_finite() {
                    for i in 0..n {
                        // i is the original winner
                        let mut base = Vec::new();
                        for k in (0..n).filter(|&k| k != i) {
                            let diff = lin(&[(orig[i], 1.0), (orig[k], -1.0)]);
                            base.push(if *margin > 0.0 {
                                Halfspace::from_form(&diff, Cmp::Gt, *margin)
                            } else if k < i {
                                Halfspace::from_form(&diff, Cmp::Gt, 0.0)
                            } else {
                                Halfspace::from_form(&diff, Cmp::Ge, 0.0)
                            });
                        }
                        // the twin's winner is not i
                        for j in (0..n).filter(|&j| j != i) {
                            let diff = lin(&[(twin[j], 1.0), (twin[i], -1.0)]);
                            let cmp = if j < i { Cmp::Ge } else { Cmp::Gt };
                            let mut all = base.clone();
                            all.push(Halfspace::from_form(&diff, cmp, 0.0));
                            disjuncts.push(all);
                        }
                    }
                }
            }
        }
        for atoms in disjuncts {
            let mut all: Vec<Halfspace> = cons.to_vec();
            all.extend(atoms.iter().cloned());
            let vertices = vertices(&all, self.d);
            if vertices.is_empty() {
                continue;
            }
            let mut c = vec![0.0; self.d];
            for v in &vertices {
                for (ci, vi) in c.iter_mut().zip(v) {
                    *ci += vi / vertices.len() as f64;
                }
            }
            let strict_ok = atoms.iter().filter(|h| h.strict).all(|h| {
                let ax: f64 = h.a.iter().zip(&c).map(|(a, x)| a * x).sum();
                h.b - ax > STRICT_TOL
            });
            if strict_ok {
                return Some(c);
            }
        }
        None
    }
}

/// Normalised copy; `None` for a row with no variables (then `ok` tells
/// whether it holds).
fn normalise(h: &Halfspace) -> Option<(Vec<f64>, f64)> {
    let norm = h.a.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-14 {
        return None;
    }
    Some((h.a.iter().map(|a| a / norm).collect(), h.b / norm))
}

fn trivial_ok(h: &Halfspace) -> bool {
    h.b >= -FEAS_TOL
}

/// Any vertex of the closed polytope (strictness ignored).
fn feasible_point(cons: &[Halfspace], d: usize) -> Option<Vec<f64>> {
    enumerate(cons, d, true).into_iter().next()
}

/// All vertices of the closed polytope, with repetition.
fn vertices(cons: &[Halfspace], d: usize) -> Vec<Vec<f64>> {
    enumerate(cons, d, false)
}

fn enumerate(cons: &[Halfspace], d: usize, first_only: bool) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(cons.len());
    for h in cons {
        match normalise(h) {
            Some(row) => rows.push(row),
            None if trivial_ok(h) => {}
            None => return Vec::new(),
        }
    }
    let satisfies = |x: &[f64]| {
        rows.iter().all(|(a, b)| {
            let ax: f64 = a.iter().zip(x).map(|(p, q)| p * q).sum();
            ax <= b + FEAS_TOL
        })
    };
    let mut out = Vec::new();
    let m = rows.len();
    let mut idx: Vec<usize> = (0..d).collect();
    if m < d {
        return out;
    }
    loop {
        let a: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].0.clone()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| rows[i].1).collect();
        if let Some(x) = solve_square(a, b) {
            if satisfies(&x) {
                out.push(x);
                if first_only {
                    return out;
                }
            }
        }
        // next combination
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] < m - d + k {
                idx[k] += 1;
                for j in k + 1..d {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Gaussian elimination with partial pivoting.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
