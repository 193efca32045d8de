//! The end-to-end simplification pass over one network and one box.
//!
//! 1. Tighten bounds and remove every activation they prove stable.
//! 2. Sample the box and discard candidates a sample refutes.
//! 3. Verify the rest one neuron at a time, in layer order, removing on
//!    UNSAT.
//! 4. In the relaxed modes, linearise cheap unstable activations under the
//!    output error budget.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{replace_activation, saturate_ws_elimination, Line, Network, Neuron, NeuronRef};
use crate::prop::{tighten_with, BoundsMap, InputBox, TightenOptions};
use crate::redundancy::{
    classify_phase_by_bounds, greedy_relaxed_removal, simulate_filter, Candidate, Evidence,
    LedgerSummary, RedundancyKind, RedundancyVerdict, Replacement,
};
use crate::verify::{solve, Verdict, DEFAULT_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// Outputs must stay the same.
    Exact,
    /// The winning class must stay the same wherever it leads by more than
    /// `delta`.
    ResultPreserving { delta: f64 },
    /// Exact removals, then linearisation with output error at most `e_t`.
    Relaxed { e_t: f64 },
    /// Result-preserving removals, then linearisation under `e_t`.
    Full { delta: f64, e_t: f64 },
}

impl Mode {
    fn delta(&self) -> Option<f64> {
        match *self {
            Mode::ResultPreserving { delta } | Mode::Full { delta, .. } => Some(delta),
            _ => None,
        }
    }

    fn error_budget(&self) -> Option<f64> {
        match *self {
            Mode::Relaxed { e_t } | Mode::Full { e_t, .. } => Some(e_t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Leaves per neuron and direction when tightening bounds.
    pub bound_budget: usize,
    pub sim_samples: usize,
    /// Branch-and-bound nodes per query.
    pub verify_budget: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Largest output change still counted as "unchanged" in exact mode.
    pub tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bound_budget: 64,
            sim_samples: 100_000,
            verify_budget: 10_000,
            mode: Mode::Exact,
            seed: 0,
            threads: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bound_budget == 0 || self.sim_samples == 0 || self.verify_budget == 0 {
            return Err(Error::Input(
                "budgets and sample counts must be at least 1".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::Input("thread count must be at least 1".into()));
        }
        if let Some(d) = self.mode.delta() {
            if !(d >= 0.0) {
                return Err(Error::Input(format!("delta must be >= 0, got {d}")));
            }
        }
        if let Some(e) = self.mode.error_budget() {
            if !(e >= 0.0) {
                return Err(Error::Input(format!("error budget must be >= 0, got {e}")));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Input("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeStats {
    pub layers: usize,
    pub neurons: usize,
    pub hidden: usize,
    pub activations: usize,
}

impl SizeStats {
    pub fn of(net: &Network) -> Self {
        SizeStats {
            layers: net.num_layers(),
            neurons: net.num_neurons(),
            hidden: net.num_hidden(),
            activations: net.num_activations(),
        }
    }
}

/// Counts over the original hidden neurons: `removed + surviving +
/// unknown == hidden_before`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub hidden_before: usize,
    pub activations_before: usize,
    pub phase_by_bounds: usize,
    pub phase_verified: usize,
    pub forward: usize,
    pub result_preserving: usize,
    pub relaxed: usize,
    /// Candidates refuted by sampling.
    pub simulation_refuted: usize,
    pub removed: usize,
    pub surviving: usize,
    pub unknown: usize,
}

/// Wall-clock seconds per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub bounds: f64,
    pub simulation: f64,
    pub verification: f64,
    pub relaxed: f64,
    pub total: f64,
}

/// Neuron positions refer to the network passed to [`simplify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplifyReport {
    pub mode: Mode,
    pub counts: Counts,
    pub verdicts: Vec<RedundancyVerdict>,
    /// Every original hidden neuron that is gone, including weighted sums
    /// folded away by elimination.
    pub removed: Vec<NeuronRef>,
    /// Activations left in place because a query ran out of budget.
    pub unknown: Vec<NeuronRef>,
    /// Error bound of the result against the network after the exact (or
    /// result-preserving) steps.
    pub ledger: LedgerSummary,
    pub size_before: SizeStats,
    pub size_after: SizeStats,
    pub timings: Timings,
}

impl SimplifyReport {
    /// Removed activations certified as phase-redundant, over all original
    /// activations.
    pub fn phase_fraction(&self) -> f64 {
        if self.counts.activations_before == 0 {
            return 0.0;
        }
        (self.counts.phase_by_bounds + self.counts.phase_verified) as f64
            / self.counts.activations_before as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn simplify(
    net: &Network,
    input: &InputBox,
    config: &PipelineConfig,
) -> Result<(Network, SimplifyReport)> {
    simplify_with_prior(net, input, config, None)
}

/// As [`simplify`], intersecting the first bound computation with `prior`
/// (bounds of the same network on an enclosing box).
pub fn simplify_with_prior(
    net: &Network,
    input: &InputBox,
    config: &PipelineConfig,
    prior: Option<&BoundsMap>,
) -> Result<(Network, SimplifyReport)> {
    config.validate()?;
    input.check_network(net)?;
    if config.mode.delta().is_some() && net.output_dim() < 2 {
        return Err(Error::Input(format!(
            "result-preserving modes need at least 2 outputs, network has {}",
            net.output_dim()
        )));
    }
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?
            .install(|| run(net, input, config, prior)),
        None => run(net, input, config, prior),
    }
}

struct State {
    cur: Network,
    verdicts: Vec<RedundancyVerdict>,
    counts: Counts,
}

impl State {
    /// Replaces the activation at current position `v`, records `verdict`
    /// and folds away what became a plain weighted sum.
    fn remove(&mut self, v: NeuronRef, line: Line, verdict: RedundancyVerdict) -> Result<()> {
        self.cur = saturate_ws_elimination(&replace_activation(&self.cur, v, line)?);
        match verdict.kind {
            RedundancyKind::PhaseRedundant { .. } => match verdict.evidence {
                Evidence::Bounds { .. } => self.counts.phase_by_bounds += 1,
                _ => self.counts.phase_verified += 1,
            },
            RedundancyKind::ForwardRedundant { .. } => self.counts.forward += 1,
            RedundancyKind::ResultPreserving { .. } => self.counts.result_preserving += 1,
            RedundancyKind::RelaxedRedundant { .. } => self.counts.relaxed += 1,
        }
        self.verdicts.push(verdict);
        Ok(())
    }
}

fn run(
    net: &Network,
    input: &InputBox,
    config: &PipelineConfig,
    prior: Option<&BoundsMap>,
) -> Result<(Network, SimplifyReport)> {
    let t_total = Instant::now();
    let mut timings = Timings::default();
    let mut base = net.clone();
    base.reset_origins();
    let size_before = SizeStats::of(&base);
    let hidden_before: BTreeSet<NeuronRef> = base.hidden_refs().collect();
    let tighten_opts = TightenOptions {
        budget: config.bound_budget,
        ..TightenOptions::default()
    };

    let mut st = State {
        cur: base.clone(),
        verdicts: Vec::new(),
        counts: Counts {
            hidden_before: size_before.hidden,
            activations_before: size_before.activations,
            ..Counts::default()
        },
    };

    // Step 1: bounds.
    let t = Instant::now();
    let bounds = tighten_with(&base, input, tighten_opts, prior)?;
    let mut stable = Vec::new();
    let mut unstable = Vec::new();
    for v in base.activation_refs() {
        let Some(Neuron::Activation { source, func }) = base.neuron(v) else {
            unreachable!()
        };
        let iv = bounds.get(*source);
        match classify_phase_by_bounds(&base, &bounds, v) {
            Some(segment) => stable.push((v, segment, func.pieces()[segment], iv)),
            None => {
                let segs = if iv.is_empty() {
                    (0..func.num_segments()).collect()
                } else {
                    func.segments_overlapping(iv.lo, iv.hi)
                };
                unstable.push((v, segs, func.pieces().to_vec()));
            }
        }
    }
    for (v, segment, line, source) in stable {
        let pos = st.cur.find_origin(v).expect("activation still present");
        st.remove(
            pos,
            line,
            RedundancyVerdict {
                neuron: v,
                kind: RedundancyKind::PhaseRedundant { segment },
                evidence: Evidence::Bounds { source },
            },
        )?;
    }
    timings.bounds = t.elapsed().as_secs_f64();

    // Step 2: simulation, on candidates phrased against the current network.
    let t = Instant::now();
    let mut plans: BTreeMap<NeuronRef, Vec<Candidate>> = BTreeMap::new();
    let mut sim_cands = Vec::new();
    let mut sim_owner = Vec::new();
    for (v, segs, pieces) in &unstable {
        let pos = st
            .cur
            .find_origin(*v)
            .expect("unstable activation still present");
        let mut cands: Vec<Candidate> = segs
            .iter()
            .map(|&segment| Candidate::Phase {
                neuron: pos,
                segment,
            })
            .collect();
        let mut lines: Vec<Line> = Vec::new();
        for &s in segs {
            if !lines.contains(&pieces[s]) {
                lines.push(pieces[s]);
            }
        }
        for line in lines {
            cands.push(removal_candidate(&st.cur, pos, line, config));
        }
        for c in cands {
            sim_cands.push(c);
            sim_owner.push(*v);
        }
    }
    let sim = simulate_filter(&st.cur, input, &sim_cands, config.sim_samples, config.seed)?;
    st.counts.simulation_refuted = sim.dropped.len();
    for c in sim.survivors {
        let i = sim_cands
            .iter()
            .position(|x| *x == c)
            .expect("survivor was a candidate");
        plans.entry(sim_owner[i]).or_default().push(c);
    }
    timings.simulation = t.elapsed().as_secs_f64();

    // Step 3: verification, layer by layer in original order.
    let t = Instant::now();
    let mut unknown: BTreeSet<NeuronRef> = BTreeSet::new();
    for (origin, cands) in plans {
        let Some(pos) = st.cur.find_origin(origin) else {
            continue;
        };
        if !st.cur.neuron(pos).is_some_and(Neuron::is_activation) {
            continue;
        }
        let mut saw_unknown = false;
        for c in cands {
            let c = retarget(&c, &st.cur, pos, config);
            let queries = c.queries(&st.cur, input)?;
            let mut nodes = 0;
            let mut all_unsat = true;
            for q in &queries {
                let v = solve(q, config.verify_budget);
                nodes += v.nodes();
                match v {
                    Verdict::Unsat { .. } => {}
                    Verdict::Unknown { .. } => {
                        saw_unknown = true;
                        all_unsat = false;
                        break;
                    }
                    Verdict::Sat { .. } => {
                        all_unsat = false;
                        break;
                    }
                }
            }
            if !all_unsat {
                continue;
            }
            let line = c.line(&st.cur).expect("candidate has a line");
            let kind = match c {
                Candidate::Phase { segment, .. } => RedundancyKind::PhaseRedundant { segment },
                Candidate::Forward { k, line, .. } => RedundancyKind::ForwardRedundant { k, line },
                Candidate::ResultPreserving { line, margin, .. } => {
                    RedundancyKind::ResultPreserving {
                        line,
                        delta: margin,
                    }
                }
            };
            log::debug!("{origin} ({pos} now): {}", kind.name());
            st.remove(
                pos,
                line,
                RedundancyVerdict {
                    neuron: origin,
                    kind,
                    evidence: Evidence::Verifier {
                        queries: queries.iter().map(|q| q.label.clone()).collect(),
                        nodes,
                    },
                },
            )?;
            saw_unknown = false;
            break;
        }
        if saw_unknown {
            unknown.insert(origin);
        }
    }
    timings.verification = t.elapsed().as_secs_f64();

    // Step 4: relaxed removal.
    let t = Instant::now();
    let mut ledger = LedgerSummary::zero(st.cur.output_dim());
    if let Some(e_t) = config.mode.error_budget() {
        let before = st.cur.clone();
        let b = tighten_with(&before, input, tighten_opts, None)?;
        let (after, l) = greedy_relaxed_removal(&before, &b, e_t)?;
        let headline = l.headline();
        for r in &l.replacements {
            let Some(Neuron::Activation { source, .. }) = before.neuron(r.neuron) else {
                unreachable!()
            };
            st.counts.relaxed += 1;
            st.verdicts.push(RedundancyVerdict {
                neuron: before.origin(r.neuron),
                kind: RedundancyKind::RelaxedRedundant {
                    line: r.mode.line(),
                    epsilon: r.epsilon,
                },
                evidence: Evidence::Ledger {
                    source: b.get(*source),
                    headline,
                },
            });
        }
        ledger = l.summary();
        ledger.replacements = l
            .replacements
            .iter()
            .map(|r| Replacement {
                neuron: before.origin(r.neuron),
                ..*r
            })
            .collect();
        st.cur = after;
    }
    timings.relaxed = t.elapsed().as_secs_f64();

    let present: BTreeSet<NeuronRef> = st.cur.refs().map(|r| st.cur.origin(r)).collect();
    let removed: Vec<NeuronRef> = hidden_before
        .iter()
        .copied()
        .filter(|r| !present.contains(r))
        .collect();
    let unknown: Vec<NeuronRef> = unknown
        .into_iter()
        .filter(|r| present.contains(r))
        .collect();
    st.counts.removed = removed.len();
    st.counts.unknown = unknown.len();
    st.counts.surviving = hidden_before.len() - removed.len() - unknown.len();
    timings.total = t_total.elapsed().as_secs_f64();

    let size_after = SizeStats::of(&st.cur);
    let report = SimplifyReport {
        mode: config.mode,
        counts: st.counts,
        verdicts: st.verdicts,
        removed,
        unknown,
        ledger,
        size_before,
        size_after,
        timings,
    };
    Ok((st.cur, report))
}

fn removal_candidate(
    net: &Network,
    v: NeuronRef,
    line: Line,
    config: &PipelineConfig,
) -> Candidate {
    match config.mode.delta() {
        Some(margin) => Candidate::ResultPreserving {
            neuron: v,
            line,
            margin,
        },
        None => Candidate::Forward {
            neuron: v,
            line,
            k: net.output_layer() - v.layer - 1,
            tolerance: config.tolerance,
        },
    }
}

/// The same question about the neuron now at `pos`.
fn retarget(c: &Candidate, net: &Network, pos: NeuronRef, config: &PipelineConfig) -> Candidate {
    match c {
        Candidate::Phase { segment, .. } => Candidate::Phase {
            neuron: pos,
            segment: *segment,
        },
        Candidate::Forward { line, .. } | Candidate::ResultPreserving { line, .. } => {
            removal_candidate(net, pos, *line, config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::net::{argmax, evaluate_output};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick(mode: Mode) -> PipelineConfig {
        PipelineConfig {
            sim_samples: 2000,
            mode,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn cancel_net_exact() {
        let net = fixtures::cancel_net();
        let input = fixtures::unit_box(1);
        let (out, rep) = simplify(&net, &input, &quick(Mode::Exact)).unwrap();
        let find = |r| {
            rep.verdicts
                .iter()
                .find(|v| v.neuron == r)
                .map(|v| v.kind.clone())
        };
        assert_eq!(
            find(fixtures::CANCEL_SHIFT),
            Some(RedundancyKind::PhaseRedundant { segment: 1 })
        );
        assert!(matches!(
            find(fixtures::CANCEL_Y),
            Some(RedundancyKind::ForwardRedundant { line, .. }) if line == Line::ZERO
        ));
        assert!(rep.removed.contains(&fixtures::CANCEL_Y));
        assert!(rep.removed.contains(&fixtures::CANCEL_SHIFT));
        let c = rep.counts;
        assert_eq!(c.removed + c.surviving + c.unknown, c.hidden_before);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap()[0];
            let b = evaluate_output(&out, &x).unwrap()[0];
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(evaluate_output(&out, &[1.0]).unwrap(), vec![12.0]);
    }

    #[test]
    fn vote_net_result_preserving() {
        let net = fixtures::vote_net();
        let input = fixtures::unit_box(1);
        let (out, rep) =
            simplify(&net, &input, &quick(Mode::ResultPreserving { delta: 0.0 })).unwrap();
        assert!(rep.removed.contains(&fixtures::VOTE_Y));
        for i in 0..=10_000 {
            let x = [-1.0 + 2.0 * i as f64 / 10_000.0];
            assert_eq!(
                argmax(&evaluate_output(&net, &x).unwrap()),
                argmax(&evaluate_output(&out, &x).unwrap())
            );
        }
        assert!(simplify(
            &fixtures::cancel_net(),
            &input,
            &quick(Mode::ResultPreserving { delta: 0.0 })
        )
        .is_err());
    }

    #[test]
    fn starved_run_reconciles() {
        let net = fixtures::toy_net();
        let cfg = PipelineConfig {
            sim_samples: 1,
            verify_budget: 1,
            bound_budget: 1,
            ..PipelineConfig::default()
        };
        let (out, rep) = simplify(&net, &fixtures::unit_box(3), &cfg).unwrap();
        let c = rep.counts;
        assert_eq!(c.removed + c.surviving + c.unknown, c.hidden_before);
        assert!(c.unknown > 0);
        assert!(out.num_neurons() <= net.num_neurons());
    }

    #[test]
    fn relaxed_respects_budget_and_is_deterministic() {
        let net = fixtures::toy_net();
        let input = fixtures::unit_box(3);
        let cfg = PipelineConfig {
            threads: Some(1),
            ..quick(Mode::Relaxed { e_t: 1e-2 })
        };
        let (out, rep) = simplify(&net, &input, &cfg).unwrap();
        assert!(rep.ledger.headline <= 1e-2);
        let (out2, rep2) = simplify(&net, &input, &cfg).unwrap();
        assert_eq!(out, out2);
        assert_eq!(rep.verdicts, rep2.verdicts);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap();
            let b = evaluate_output(&out, &x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= rep.ledger.headline + 1e-9);
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let net = fixtures::cancel_net();
        let input = fixtures::unit_box(1);
        for cfg in [
            PipelineConfig {
                verify_budget: 0,
                ..PipelineConfig::default()
            },
            quick(Mode::Relaxed { e_t: -1.0 }),
        ] {
            assert!(matches!(simplify(&net, &input, &cfg), Err(Error::Input(_))));
        }
        assert!(simplify(&net, &fixtures::unit_box(2), &quick(Mode::Exact)).is_err());
    }
}
