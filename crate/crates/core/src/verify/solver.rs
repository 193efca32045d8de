use minilp::{ComparisonOp, OptimizationDirection, Problem};

use crate::net::{evaluate_unchecked, restrict_to_cone, Network, Neuron, NeuronRef, Term};
use crate::prop::{envelopes_upto, BoundsMap, Envelopes, InputBox, Interval};

use super::{Cmp, Goal, Query, Verdict, STRICT_SLACK};

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Maximum number of branch-and-bound nodes.
    pub budget: usize,
    /// Split activations instead of the box once at most this many are
    /// unstable.
    pub phase_split_threshold: usize,
    /// Split activations once every box side is below this fraction of the
    /// root box.
    pub min_relative_width: f64,
    /// Prune with a linear program over the affine envelopes.
    pub use_lp: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            budget: 10_000,
            phase_split_threshold: 3,
            min_relative_width: 1.0 / 1024.0,
            use_lp: true,
        }
    }
}

/// `value(neuron) cmp rhs` on a goal neuron of the compiled network.
#[derive(Debug, Clone, Copy)]
struct Atom {
    neuron: NeuronRef,
    cmp: Cmp,
    rhs: f64,
}

/// The goal as a disjunction of conjunctions of single-neuron atoms, over
/// a network extended by one weighted-sum layer holding the linear forms
/// the atoms read, restricted to what those forms depend on.
struct Compiled {
    net: Network,
    disjuncts: Vec<Vec<Atom>>,
}

struct GoalLayer {
    neurons: Vec<Vec<Term>>,
}

impl GoalLayer {
    fn add(&mut self, terms: Vec<(NeuronRef, f64)>) -> usize {
        let terms: Vec<Term> = terms.into_iter().map(|(r, w)| Term::new(r, w)).collect();
        if let Some(i) = self.neurons.iter().position(|t| *t == terms) {
            return i;
        }
        self.neurons.push(terms);
        self.neurons.len() - 1
    }
}

fn compile(query: &Query) -> Compiled {
    let mut layer = GoalLayer {
        neurons: Vec::new(),
    };
    // atoms refer to goal-layer indices until the layer is placed
    let mut disjuncts: Vec<Vec<(usize, Cmp, f64)>> = Vec::new();
    match &query.goal {
        Goal::Feasible(cs) => {
            disjuncts.push(
                cs.iter()
                    .map(|c| (layer.add(c.terms.clone()), c.cmp, c.rhs))
                    .collect(),
            );
        }
        Goal::LayerMismatch { pairs, tolerance } => {
            for &(a, b) in pairs {
                let g = layer.add(vec![(a, 1.0), (b, -1.0)]);
                disjuncts.push(vec![(g, Cmp::Gt, *tolerance)]);
                disjuncts.push(vec![(g, Cmp::Lt, -*tolerance)]);
            }
        }
        Goal::ArgmaxMismatch { orig, twin, margin } => {
            let n = orig.len();
            if margin.is_finite() {
                for i in 0..n {
                    let mut winner = Vec::new();
                    for k in (0..n).filter(|&k| k != i) {
                        let g = layer.add(vec![(orig[i], 1.0), (orig[k], -1.0)]);
                        let (cmp, rhs) = if *margin > 0.0 {
                            (Cmp::Gt, *margin)
                        } else if k < i {
                            (Cmp::Gt, 0.0)
                        } else {
                            (Cmp::Ge, 0.0)
                        };
                        winner.push((g, cmp, rhs));
                    }
                    for j in (0..n).filter(|&j| j != i) {
                        let g = layer.add(vec![(twin[j], 1.0), (twin[i], -1.0)]);
                        let cmp = if j < i { Cmp::Ge } else { Cmp::Gt };
                        let mut d = winner.clone();
                        d.push((g, cmp, 0.0));
                        disjuncts.push(d);
                    }
                }
            }
        }
    }

    let mut layers = query.network.layers().to_vec();
    let goal_layer = layers.len();
    layers.push(
        layer
            .neurons
            .iter()
            .map(|t| Neuron::ws(0.0, t.clone()))
            .collect(),
    );
    if layer.neurons.is_empty() {
        // nothing to satisfy; keep a valid shape
        layers[goal_layer].push(Neuron::ws(0.0, Vec::new()));
    }
    let extended = Network::new_unchecked(query.network.name.clone(), layers);
    let roots: Vec<NeuronRef> = (0..layer.neurons.len())
        .map(|i| NeuronRef::new(goal_layer, i))
        .collect();
    let (net, map) = restrict_to_cone(&extended, &roots);
    let disjuncts = disjuncts
        .into_iter()
        .map(|d| {
            d.into_iter()
                .map(|(g, cmp, rhs)| Atom {
                    neuron: map[goal_layer][g].expect("goal neuron kept"),
                    cmp,
                    rhs,
                })
                .collect()
        })
        .collect();
    Compiled { net, disjuncts }
}

struct Node {
    input: InputBox,
    prior: Option<BoundsMap>,
    /// Source intervals imposed by activation splits.
    fixes: Vec<(NeuronRef, Interval)>,
}

/// Branch and bound with the default options and the given node budget.
pub fn solve(query: &Query, budget: usize) -> Verdict {
    solve_with(
        query,
        &SolveOptions {
            budget,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_with(query: &Query, opts: &SolveOptions) -> Verdict {
    if query.input.dim() != query.network.input_dim() {
        return Verdict::Unknown {
            nodes: 0,
            frontier: vec![query.input.clone()],
        };
    }
    let compiled = compile(query);
    if compiled.disjuncts.is_empty() {
        return Verdict::Unsat { nodes: 0 };
    }
    let root_widths: Vec<f64> = query.input.dims.iter().map(Interval::width).collect();
    let mut stack = vec![Node {
        input: query.input.clone(),
        prior: None,
        fixes: Vec::new(),
    }];
    let mut nodes = 0;
    let mut stuck: Vec<InputBox> = Vec::new();

    while let Some(node) = stack.pop() {
        if nodes >= opts.budget {
            stack.push(node);
            break;
        }
        nodes += 1;
        match process(query, &compiled, &node, opts, &root_widths) {
            Outcome::Pruned => {}
            Outcome::Witness(x) => return Verdict::Sat { witness: x, nodes },
            Outcome::Branch(children) => stack.extend(children.into_iter().rev()),
            Outcome::Stuck => stuck.push(node.input),
        }
    }
    if stack.is_empty() && stuck.is_empty() {
        Verdict::Unsat { nodes }
    } else {
        let mut frontier: Vec<InputBox> = stack.into_iter().map(|n| n.input).collect();
        frontier.extend(stuck);
        Verdict::Unknown { nodes, frontier }
    }
}

enum Outcome {
    Pruned,
    Witness(Vec<f64>),
    Branch(Vec<Node>),
    Stuck,
}

/// An atom that can be true somewhere under bounds `iv`.
fn atom_possible(atom: &Atom, iv: Interval) -> bool {
    match atom.cmp {
        Cmp::Gt => iv.hi > atom.rhs + STRICT_SLACK,
        Cmp::Ge => iv.hi >= atom.rhs,
        Cmp::Lt => iv.lo < atom.rhs - STRICT_SLACK,
        Cmp::Le => iv.lo <= atom.rhs,
    }
}

fn process(
    query: &Query,
    compiled: &Compiled,
    node: &Node,
    opts: &SolveOptions,
    root_widths: &[f64],
) -> Outcome {
    let net = &compiled.net;
    let env = envelopes_upto(net, &node.input, node.prior.as_ref(), net.num_layers());
    if env.infeasible {
        return Outcome::Pruned;
    }
    let mut live: Vec<&Vec<Atom>> = compiled
        .disjuncts
        .iter()
        .filter(|d| d.iter().all(|a| atom_possible(a, env.bounds.get(a.neuron))))
        .collect();
    if live.is_empty() {
        return Outcome::Pruned;
    }

    let mut probes = vec![node.input.center()];
    for d in 0..node.input.dim() {
        for end in [node.input.dims[d].lo, node.input.dims[d].hi] {
            let mut p = node.input.center();
            p[d] = end;
            probes.push(p);
        }
    }
    if opts.use_lp {
        let mut kept = Vec::new();
        for d in live {
            match lp_check(&env, &node.input, &node.fixes, d) {
                LpResult::Infeasible => {}
                LpResult::Feasible(point) => {
                    if let Some(mut p) = point {
                        node.input.clamp(&mut p);
                        probes.push(p);
                    }
                    kept.push(d);
                }
            }
        }
        live = kept;
        if live.is_empty() {
            return Outcome::Pruned;
        }
    }

    for p in probes {
        let trace = evaluate_unchecked(net, &p);
        let hit = compiled
            .disjuncts
            .iter()
            .any(|d| d.iter().all(|a| a.cmp.holds(trace.get(a.neuron), a.rhs)));
        if hit && query.witnesses(&p) {
            return Outcome::Witness(p);
        }
    }

    // branching
    let unstable: Vec<(NeuronRef, NeuronRef)> = net
        .activation_refs()
        .into_iter()
        .filter_map(|r| {
            let Some(Neuron::Activation { source, func }) = net.neuron(r) else {
                return None;
            };
            let s = env.bounds.get(*source);
            (func.segment_containing(s.lo, s.hi).is_none()).then_some((r, *source))
        })
        .collect();
    let rel_width = node
        .input
        .dims
        .iter()
        .zip(root_widths)
        .filter(|(_, &w)| w > 0.0)
        .map(|(iv, &w)| iv.width() / w)
        .fold(0.0, f64::max);
    let box_splittable = node.input.max_width() > 0.0;

    if !unstable.is_empty()
        && (unstable.len() <= opts.phase_split_threshold
            || rel_width < opts.min_relative_width
            || !box_splittable)
    {
        let (v, source) = unstable[0];
        let Some(Neuron::Activation { func, .. }) = net.neuron(v) else {
            unreachable!()
        };
        let s = env.bounds.get(source);
        let children = func
            .segments_overlapping(s.lo, s.hi)
            .into_iter()
            .map(|k| {
                let (a, b) = func.segment_range(k);
                let fix = s.intersect(&Interval::new(a, b));
                let mut prior = env.bounds.clone();
                prior.set(source, fix);
                let mut fixes = node.fixes.clone();
                fixes.push((source, fix));
                Node {
                    input: node.input.clone(),
                    prior: Some(prior),
                    fixes,
                }
            })
            .collect();
        return Outcome::Branch(children);
    }
    if box_splittable {
        let (a, b) = node.input.bisect(node.input.widest_dim());
        let children = [a, b]
            .into_iter()
            .map(|input| Node {
                input,
                prior: Some(env.bounds.clone()),
                fixes: node.fixes.clone(),
            })
            .collect();
        return Outcome::Branch(children);
    }
    Outcome::Stuck
}

enum LpResult {
    Infeasible,
    /// Possibly feasible; carries the LP optimum point when one was found.
    Feasible(Option<Vec<f64>>),
}

/// Relaxation of one conjunction over the node: every atom must be
/// satisfiable by the envelope on its side, and every activation split must
/// be compatible with its source's envelopes.
fn lp_check(
    env: &Envelopes,
    input: &InputBox,
    fixes: &[(NeuronRef, Interval)],
    atoms: &[Atom],
) -> LpResult {
    let any_strict = atoms.iter().any(|a| a.cmp.is_strict());
    let first = solve_lp(env, input, fixes, atoms, false);
    match first {
        None => LpResult::Feasible(None),
        Some(LpOutcome::Infeasible) => LpResult::Infeasible,
        Some(LpOutcome::Optimal { t, point }) => {
            if t < -1e-9 {
                return LpResult::Infeasible;
            }
            if t > STRICT_SLACK || !any_strict {
                return LpResult::Feasible(Some(point));
            }
            // only the strict atoms need a positive margin
            match solve_lp(env, input, fixes, atoms, true) {
                None => LpResult::Feasible(Some(point)),
                Some(LpOutcome::Infeasible) => LpResult::Infeasible,
                Some(LpOutcome::Optimal { t, point }) => {
                    if t <= STRICT_SLACK {
                        LpResult::Infeasible
                    } else {
                        LpResult::Feasible(Some(point))
                    }
                }
            }
        }
    }
}

enum LpOutcome {
    Infeasible,
    Optimal { t: f64, point: Vec<f64> },
}

/// Maximises `t <= 1` such that each atom's envelope clears its threshold
/// by `t`. With `strict_only`, non-strict atoms only need margin `0`.
/// `None` means the LP solver gave no usable answer.
fn solve_lp(
    env: &Envelopes,
    input: &InputBox,
    fixes: &[(NeuronRef, Interval)],
    atoms: &[Atom],
    strict_only: bool,
) -> Option<LpOutcome> {
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let xs: Vec<_> = input
        .dims
        .iter()
        .map(|iv| lp.add_var(0.0, (iv.lo, iv.hi)))
        .collect();
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));

    for a in atoms {
        // envelope-side expression e(x) with e(x) >= margin required
        let (coeffs, constant, sign) = if a.cmp.is_greater() {
            let u = env.upper(a.neuron);
            (&u.coeffs, u.constant - a.rhs, 1.0)
        } else {
            let l = env.lower(a.neuron);
            (&l.coeffs, a.rhs - l.constant, -1.0)
        };
        let mut expr: Vec<(minilp::Variable, f64)> = xs
            .iter()
            .zip(coeffs)
            .map(|(&x, &c)| (x, sign * c))
            .collect();
        if !strict_only || a.cmp.is_strict() {
            expr.push((t, -1.0));
            lp.add_constraint(expr.as_slice(), ComparisonOp::Ge, -constant);
        } else {
            lp.add_constraint(expr.as_slice(), ComparisonOp::Ge, -constant - 1e-9);
        }
    }
    for &(s, fix) in fixes {
        if fix.hi.is_finite() {
            let l = env.lower(s);
            let expr: Vec<_> = xs.iter().zip(&l.coeffs).map(|(&x, &c)| (x, c)).collect();
            lp.add_constraint(
                expr.as_slice(),
                ComparisonOp::Le,
                fix.hi - l.constant + 1e-9,
            );
        }
        if fix.lo.is_finite() {
            let u = env.upper(s);
            let expr: Vec<_> = xs.iter().zip(&u.coeffs).map(|(&x, &c)| (x, c)).collect();
            lp.add_constraint(
                expr.as_slice(),
                ComparisonOp::Ge,
                fix.lo - u.constant - 1e-9,
            );
        }
    }
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| lp.solve()));
    match result {
        Ok(Ok(sol)) => Some(LpOutcome::Optimal {
            t: *sol.var_value(t),
            point: xs.iter().map(|&x| *sol.var_value(x)).collect(),
        }),
        Ok(Err(minilp::Error::Infeasible)) => Some(LpOutcome::Infeasible),
        _ => None,
    }
}
