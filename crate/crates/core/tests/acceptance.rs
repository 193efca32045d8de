//! Acceptance suite. Runs every criterion, prints one line each and fails
//! if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nnshrink_core::fixtures::{self, random_network, RandomNetSpec};
use nnshrink_core::net::{
    argmax, evaluate, evaluate_output, replace_activation, Line, Neuron, NeuronRef,
};
use nnshrink_core::pipeline::{simplify, Mode, PipelineConfig};
use nnshrink_core::prop::{interval_bounds, symbolic_bounds, tighten, InputBox, Interval};
use nnshrink_core::redundancy::{
    minimal_error_line, propagate_error_bounds, RedundancyKind, Replacement, ReplacementMode,
};
use nnshrink_core::slice::{
    family_evaluate, linearization_report, slice_and_simplify, EntryModel, SlicePlan,
};
use nnshrink_core::verify::{
    brute_force_oracle, build_forward_query, build_phase_query, build_result_preserving_query,
    solve, Query, Verdict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rounding slack when comparing sampled values against certified bounds.
const FP_SLACK: f64 = 1e-9;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> InputBox {
    InputBox::new(
        (0..dim)
            .map(|_| {
                let lo: f64 = rng.gen_range(-2.0..1.0);
                Interval::new(lo, lo + rng.gen_range(0.1..2.0))
            })
            .collect(),
    )
    .unwrap()
}

fn corpus_spec() -> RandomNetSpec {
    RandomNetSpec {
        max_inputs: 3,
        max_hidden_layers: 5,
        max_width: 8,
        ..RandomNetSpec::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let net = fixtures::cancel_net();
    let at1 = evaluate_output(&net, &[1.0]).map_err(|e| e.to_string())?;
    check(at1 == vec![12.0], || format!("N(1) = {at1:?}"))?;
    let input = fixtures::unit_box(1);
    let (simple, report) =
        simplify(&net, &input, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let kind_of = |v: NeuronRef| {
        report
            .verdicts
            .iter()
            .find(|d| d.neuron == v)
            .map(|d| &d.kind)
    };
    check(
        matches!(
            kind_of(fixtures::CANCEL_Y),
            Some(RedundancyKind::ForwardRedundant { .. })
        ),
        || format!("y verdict {:?}", kind_of(fixtures::CANCEL_Y)),
    )?;
    check(
        matches!(
            kind_of(fixtures::CANCEL_SHIFT),
            Some(RedundancyKind::PhaseRedundant { segment: 1 })
        ),
        || format!("ReLU(x + 1) verdict {:?}", kind_of(fixtures::CANCEL_SHIFT)),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = input.sample(&mut rng);
        let a = evaluate_output(&net, &x).unwrap();
        let b = evaluate_output(&simple, &x).unwrap();
        worst = worst.max((a[0] - b[0]).abs());
    }
    check(worst <= 1e-9, || format!("max output difference {worst:e}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!(
        "N(1)=12, y forward, ReLU(x + 1) phase, {} -> {} hidden, max diff {worst:.1e}",
        report.counts.hidden_before,
        simple.num_hidden()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let net = fixtures::vote_net();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let at = evaluate_output(&net, &[0.5]).unwrap();
    check(close(&at, &[1.3, 0.3]), || format!("N(0.5) = {at:?}"))?;
    let zeroed = replace_activation(&net, fixtures::VOTE_Y, Line::ZERO).unwrap();
    let at0 = evaluate_output(&zeroed, &[0.5]).unwrap();
    check(close(&at0, &[1.0, 0.6]), || {
        format!("zeroed N(0.5) = {at0:?}")
    })?;

    let input = fixtures::unit_box(1);
    let cfg = PipelineConfig {
        mode: Mode::ResultPreserving { delta: 0.0 },
        ..PipelineConfig::default()
    };
    let (simple, report) = simplify(&net, &input, &cfg).map_err(|e| e.to_string())?;
    check(report.removed.contains(&fixtures::VOTE_Y), || {
        format!("y not removed: {:?}", report.removed)
    })?;
    let disagreements = (0..=10_000)
        .map(|i| -1.0 + 2.0 * i as f64 / 10_000.0)
        .filter(|&x| {
            argmax(&evaluate_output(&net, &[x]).unwrap())
                != argmax(&evaluate_output(&simple, &[x]).unwrap())
        })
        .count();
    check(disagreements == 0, || {
        format!("{disagreements} grid points change label")
    })?;
    within(Duration::from_secs(1), start)?;
    Ok("outputs [1.3, 0.3] / [1.0, 0.6], y removed, 10001-point labels agree".into())
}

/// Exact max of `|relu(x) - l(x)|` over `[lb, ub]`: the difference is
/// piecewise linear with a single kink at 0.
fn relu_line_error(l: Line, lb: f64, ub: f64) -> f64 {
    [lb, 0.0, ub]
        .iter()
        .map(|&x| (x.max(0.0) - l.eval(x)).abs())
        .fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let lb = -rng.gen_range(1e-3..10.0);
        let ub = rng.gen_range(1e-3..10.0);
        let (line, e) = minimal_error_line(lb, ub).map_err(|e| e.to_string())?;
        let grid = (0..=10_000)
            .map(|i| lb + (ub - lb) * i as f64 / 10_000.0)
            .map(|x| (x.max(0.0) - line.eval(x)).abs())
            .fold(0.0, f64::max);
        worst_gap = worst_gap.max((grid - e).abs());
        check((grid - e).abs() <= 1e-9, || {
            format!("[{lb}, {ub}]: e {e} vs grid {grid}")
        })?;
        let (da, db) = (0.2 * line.slope.max(0.05), 0.5 * e.max(1e-6));
        for i in 0..=100 {
            for j in 0..=100 {
                let p = Line::new(
                    line.slope + da * (i as f64 / 50.0 - 1.0),
                    line.intercept + db * (j as f64 / 50.0 - 1.0),
                );
                let err = relu_line_error(p, lb, ub);
                check(err >= e - 1e-12, || {
                    format!("[{lb}, {ub}]: line {p:?} reaches {err} < {e}")
                })?;
            }
        }
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "100 intervals, max |e - grid| {worst_gap:.1e}, no perturbed line better"
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = corpus_spec();
    let (mut total_repl, mut violations, mut worst_ratio) = (0usize, 0usize, 0.0f64);
    for n in 0..200 {
        let net = random_network(&mut rng, &spec);
        let input = random_box(&mut rng, net.input_dim());
        let bounds = if n % 2 == 0 {
            interval_bounds(&net, &input).unwrap()
        } else {
            tighten(&net, &input, 4).unwrap()
        };
        let mut repls = Vec::new();
        for v in net.activation_refs() {
            if !rng.gen_bool(0.4) {
                continue;
            }
            let Some(Neuron::Activation { func, source }) = net.neuron(v) else {
                unreachable!()
            };
            let src = bounds.get(*source);
            let mode = match rng.gen_range(0..4) {
                0 => ReplacementMode::Zero,
                1 => ReplacementMode::Identity,
                2 => ReplacementMode::Line(func.relaxed_line(src.lo, src.hi).0),
                _ => ReplacementMode::Line(Line::new(
                    rng.gen_range(-1.0..1.5),
                    rng.gen_range(-0.5..0.5),
                )),
            };
            if let Ok(r) = Replacement::tight(&net, &bounds, v, mode) {
                repls.push(r);
            }
        }
        let ledger = propagate_error_bounds(&net, &repls, &bounds).map_err(|e| e.to_string())?;
        total_repl += repls.len();
        let mut modified = net.clone();
        for r in &repls {
            modified = replace_activation(&modified, r.neuron, r.mode.line()).unwrap();
        }
        let outs = ledger.outputs();
        for _ in 0..10_000 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap();
            let b = evaluate_output(&modified, &x).unwrap();
            for ((ya, yb), eb) in a.iter().zip(&b).zip(outs) {
                let slack = FP_SLACK * (1.0 + ya.abs());
                if yb < &(ya - eb.lo - slack) || yb > &(ya + eb.hi + slack) {
                    violations += 1;
                }
                let dev = (yb - ya).abs();
                if eb.max() > 0.0 {
                    worst_ratio = worst_ratio.max(dev / eb.max());
                }
            }
        }
    }
    check(violations == 0, || {
        format!("{violations} ledger violations")
    })?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "200 nets, {total_repl} replacements, 0 violations, tightest use {:.0}% of bound",
        100.0 * worst_ratio
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = RandomNetSpec {
        max_activations: 6,
        ..RandomNetSpec::default()
    };
    let (mut total, mut unknown, mut sat, mut nets) = (0usize, 0usize, 0usize, 0usize);
    while nets < 200 {
        let net = random_network(&mut rng, &spec);
        let input = random_box(&mut rng, net.input_dim());
        let acts = net.activation_refs();
        let v = acts[rng.gen_range(0..acts.len())];
        let Some(Neuron::Activation { func, .. }) = net.neuron(v) else {
            unreachable!()
        };
        let seg = rng.gen_range(0..func.num_segments());
        let line = if rng.gen_bool(0.5) {
            func.pieces()[seg]
        } else {
            Line::new(rng.gen_range(-1.0..1.5), rng.gen_range(-0.5..0.5))
        };
        let queries: Vec<Query> = match nets % 3 {
            0 => build_phase_query(&net, &input, v, seg).unwrap(),
            1 => {
                let k = rng.gen_range(0..=net.num_layers() - v.layer - 2);
                vec![build_forward_query(&net, &input, v, line, k, 1e-9).unwrap()]
            }
            _ if net.output_dim() >= 2 => {
                let margin = if rng.gen_bool(0.5) { 0.0 } else { 0.1 };
                vec![build_result_preserving_query(&net, &input, v, line, margin).unwrap()]
            }
            _ => continue,
        };
        nets += 1;
        for q in queries {
            total += 1;
            let oracle = brute_force_oracle(&q).map_err(|e| e.to_string())?;
            let verdict = solve(&q, 10_000);
            if oracle.is_sat() {
                sat += 1;
            }
            unknown += verdict.is_unknown() as usize;
            check(!(verdict.is_sat() && !oracle.is_sat()), || {
                format!("{}: solver SAT, oracle UNSAT", q.label)
            })?;
            check(!(verdict.is_unsat() && oracle.is_sat()), || {
                format!("{}: solver UNSAT, oracle SAT", q.label)
            })?;
            if let Verdict::Sat { witness, .. } = &verdict {
                check(q.witnesses(witness), || format!("{}: bad witness", q.label))?;
            }
        }
    }
    let rate = unknown as f64 / total as f64;
    check(rate < 0.1, || format!("UNKNOWN rate {:.1}%", 100.0 * rate))?;
    within(Duration::from_secs(300), start)?;
    Ok(format!(
        "{total} queries ({sat} SAT), no contradictions, UNKNOWN {:.1}%",
        100.0 * rate
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = corpus_spec();
    let mut checked = 0usize;
    for _ in 0..200 {
        let net = random_network(&mut rng, &spec);
        let input = random_box(&mut rng, net.input_dim());
        let ib = interval_bounds(&net, &input).unwrap();
        let sb = symbolic_bounds(&net, &input).unwrap();
        let tb = tighten(&net, &input, 16).unwrap();
        check(ib.encloses(&sb, 1e-9), || {
            format!("{}: symbolic escapes interval", net.name)
        })?;
        check(sb.encloses(&tb, 1e-9), || {
            format!("{}: tightened escapes symbolic", net.name)
        })?;
        for _ in 0..10_000 {
            let x = input.sample(&mut rng);
            let trace = evaluate(&net, &x).unwrap();
            for r in net.refs() {
                let y = trace.get(r);
                let tol = FP_SLACK * (1.0 + y.abs());
                for (name, b) in [("interval", &ib), ("symbolic", &sb), ("tighten", &tb)] {
                    check(b.get(r).contains_with(y, tol), || {
                        format!("{name} misses {r} = {y} at {x:?}: {:?}", b.get(r))
                    })?;
                }
                checked += 1;
            }
        }
    }
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "200 nets, {checked} neuron values inside all three, nesting holds"
    ))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let net = fixtures::toy_net();
    let input = fixtures::unit_box(3);
    let cfg = PipelineConfig::default();
    let (_, whole) = simplify(&net, &input, &cfg).map_err(|e| e.to_string())?;
    let plan = SlicePlan::uniform(3, 4).unwrap();
    let family = slice_and_simplify(&net, &input, &plan, &cfg, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = input.sample(&mut rng);
        let a = evaluate_output(&net, &x).unwrap();
        let b = family_evaluate(&family, &x).map_err(|e| e.to_string())?;
        for (ya, yb) in a.iter().zip(&b) {
            worst = worst.max((ya - yb).abs() / ya.abs().max(1.0));
        }
    }
    check(worst <= 1e-6, || format!("relative difference {worst:e}"))?;
    let lin = linearization_report(&family);
    let base = whole.phase_fraction();
    check(lin.mean_phase_fraction > base, || {
        format!(
            "phase fraction {} sliced vs {base} whole",
            lin.mean_phase_fraction
        )
    })?;
    within(Duration::from_secs(300), start)?;
    Ok(format!(
        "64 cells, max rel diff {worst:.1e}, phase fraction {:.1}% -> {:.1}%, {} fully linear",
        100.0 * base,
        100.0 * lin.mean_phase_fraction,
        lin.fully_linear
    ))
}

fn criterion_8() -> Outcome {
    let net = fixtures::toy_net();
    let input = fixtures::unit_box(3);
    let plan = SlicePlan::uniform(3, 4).unwrap();
    let family = slice_and_simplify(&net, &input, &plan, &PipelineConfig::default(), Some(&[0]))
        .map_err(|e| e.to_string())?;
    let entry = &family.entries[0];
    let corner = InputBox::uniform(3, -1.0, -0.5);
    check(entry.input == corner, || {
        format!("entry 0 covers {:?}", entry.input)
    })?;
    let EntryModel::Affine(map) = &entry.model else {
        return Err(format!(
            "entry 0 keeps {} hidden neurons",
            entry.model.hidden()
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = corner.sample(&mut rng);
        let a = evaluate_output(&net, &x).unwrap();
        let b = map.apply(&x).unwrap();
        for (ya, yb) in a.iter().zip(&b) {
            worst = worst.max((ya - yb).abs());
        }
    }
    check(worst <= 1e-6, || {
        format!("affine entry differs by {worst:e}")
    })?;
    Ok(format!("corner cell is affine, max diff {worst:.1e}"))
}

fn criterion_9() -> Outcome {
    let net = fixtures::toy_net();
    let input = fixtures::unit_box(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Vec<f64>> = (0..10_000).map(|_| input.sample(&mut rng)).collect();
    let reference: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| evaluate_output(&net, x).unwrap())
        .collect();
    let mut rows = Vec::new();
    let mut last = (0usize, 0usize);
    for e_t in [1e-4, 1e-3, 1e-2] {
        let cfg = PipelineConfig {
            mode: Mode::Relaxed { e_t },
            ..PipelineConfig::default()
        };
        let (simple, report) = simplify(&net, &input, &cfg).map_err(|e| e.to_string())?;
        let headline = report.ledger.headline;
        check(headline <= e_t, || {
            format!("e_t {e_t}: headline {headline}")
        })?;
        let empirical = samples
            .iter()
            .zip(&reference)
            .flat_map(|(x, a)| {
                let b = evaluate_output(&simple, x).unwrap();
                a.iter()
                    .zip(b)
                    .map(|(ya, yb)| (ya - yb).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        check(empirical <= headline + FP_SLACK, || {
            format!("e_t {e_t}: empirical {empirical} above ledger {headline}")
        })?;
        let now = (report.counts.relaxed, report.counts.removed);
        check(now.0 >= last.0 && now.1 >= last.1, || {
            format!("e_t {e_t}: removals {now:?} after {last:?}")
        })?;
        last = now;
        rows.push(format!(
            "{e_t:e}: {} relaxed, ledger {headline:.1e}, seen {empirical:.1e}",
            now.0
        ));
    }
    Ok(rows.join("; "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("cancelling network", criterion_1),
        ("two-class vote network", criterion_2),
        ("minimal-error line optimality", criterion_3),
        ("error ledger soundness", criterion_4),
        ("verifier vs oracle", criterion_5),
        ("bound soundness and dominance", criterion_6),
        ("slicing equivalence", criterion_7),
        ("complete linearization witness", criterion_8),
        ("relaxed budget compliance", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {}. {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name} ({secs:.2}s): {why}", i + 1)
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
