use nnshrink_core::fixtures::{random_network, RandomNetSpec};
use nnshrink_core::net::{
    evaluate, evaluate_output, parse_network, replace_activation, serialize_network, Line, Network,
    Neuron, NeuronRef, Term,
};
use nnshrink_core::pipeline::{simplify, PipelineConfig};
use nnshrink_core::prop::{interval_bounds, symbolic_bounds, tighten, InputBox, Interval};
use nnshrink_core::redundancy::{
    minimal_error_line, propagate_error_bounds, simulate_filter, Candidate, Replacement,
    ReplacementMode,
};
use nnshrink_core::slice::{
    route, slice_domain, EntryModel, FamilyEntry, NetworkFamily, SlicePlan,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net_and_box(seed: u64, spec: &RandomNetSpec) -> (Network, InputBox, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(&mut rng, spec);
    let input = InputBox::new(
        (0..net.input_dim())
            .map(|_| {
                let lo: f64 = rng.gen_range(-2.0..1.0);
                Interval::new(lo, lo + rng.gen_range(0.1..2.0))
            })
            .collect(),
    )
    .unwrap();
    (net, input, rng)
}

fn tol(y: f64) -> f64 {
    1e-9 * (1.0 + y.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bounds_contain_sampled_values(seed in any::<u64>()) {
        let (net, input, mut rng) = net_and_box(seed, &RandomNetSpec::default());
        let maps = [
            interval_bounds(&net, &input).unwrap(),
            symbolic_bounds(&net, &input).unwrap(),
            tighten(&net, &input, 8).unwrap(),
        ];
        prop_assert!(maps[0].encloses(&maps[1], 1e-9));
        prop_assert!(maps[1].encloses(&maps[2], 1e-9));
        for _ in 0..200 {
            let x = input.sample(&mut rng);
            let trace = evaluate(&net, &x).unwrap();
            for r in net.refs() {
                let y = trace.get(r);
                for m in &maps {
                    prop_assert!(m.get(r).contains_with(y, tol(y)), "{} = {} outside {:?}", r, y, m.get(r));
                }
            }
        }
    }

    #[test]
    fn ledger_bounds_output_deviation(seed in any::<u64>(), p in 0.1f64..0.9) {
        let (net, input, mut rng) = net_and_box(seed, &RandomNetSpec::default());
        let bounds = tighten(&net, &input, 4).unwrap();
        let mut repls = Vec::new();
        for v in net.activation_refs() {
            if !rng.gen_bool(p) {
                continue;
            }
            let mode = match rng.gen_range(0..3) {
                0 => ReplacementMode::Zero,
                1 => ReplacementMode::Identity,
                _ => ReplacementMode::Line(Line::new(rng.gen_range(-1.0..1.5), rng.gen_range(-0.5..0.5))),
            };
            if let Ok(r) = Replacement::tight(&net, &bounds, v, mode) {
                repls.push(r);
            }
        }
        let ledger = propagate_error_bounds(&net, &repls, &bounds).unwrap();
        let mut modified = net.clone();
        for r in &repls {
            modified = replace_activation(&modified, r.neuron, r.mode.line()).unwrap();
        }
        for _ in 0..300 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap();
            let b = evaluate_output(&modified, &x).unwrap();
            for ((ya, yb), e) in a.iter().zip(&b).zip(ledger.outputs()) {
                prop_assert!(*yb >= ya - e.lo - tol(*ya) && *yb <= ya + e.hi + tol(*ya));
            }
        }
    }

    #[test]
    fn exact_simplification_keeps_outputs(seed in any::<u64>()) {
        let spec = RandomNetSpec { max_activations: 8, ..RandomNetSpec::default() };
        let (net, input, mut rng) = net_and_box(seed, &spec);
        let cfg = PipelineConfig { sim_samples: 500, verify_budget: 2000, bound_budget: 8, ..PipelineConfig::default() };
        let (simple, report) = simplify(&net, &input, &cfg).unwrap();
        prop_assert_eq!(
            report.counts.removed + report.counts.unknown + report.counts.surviving,
            report.counts.hidden_before
        );
        prop_assert!(simple.num_hidden() <= net.num_hidden());
        for _ in 0..300 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap();
            let b = evaluate_output(&simple, &x).unwrap();
            for (ya, yb) in a.iter().zip(&b) {
                prop_assert!((ya - yb).abs() <= 1e-6 * (1.0 + ya.abs()), "{:?} vs {:?} at {:?}", a, b, x);
            }
        }
    }

    #[test]
    fn phase_counterexamples_leave_the_segment(seed in any::<u64>()) {
        let (net, input, _) = net_and_box(seed, &RandomNetSpec::default());
        let mut candidates = Vec::new();
        for v in net.activation_refs() {
            let Some(Neuron::Activation { func, .. }) = net.neuron(v) else { unreachable!() };
            for segment in 0..func.num_segments() {
                candidates.push(Candidate::Phase { neuron: v, segment });
            }
        }
        let out = simulate_filter(&net, &input, &candidates, 256, seed).unwrap();
        prop_assert_eq!(out.survivors.len() + out.dropped.len(), candidates.len());
        for cx in &out.dropped {
            prop_assert!(input.contains(&cx.input));
            let Candidate::Phase { neuron, segment } = cx.candidate else { unreachable!() };
            let Some(Neuron::Activation { func, source }) = net.neuron(neuron) else { unreachable!() };
            let s = evaluate(&net, &cx.input).unwrap().get(*source);
            let (lo, hi) = func.segment_range(segment);
            prop_assert!(s < lo || s > hi, "{} at {} inside [{}, {}]", neuron, s, lo, hi);
        }
    }

    #[test]
    fn json_round_trip_preserves_function(seed in any::<u64>()) {
        let (net, input, mut rng) = net_and_box(seed, &RandomNetSpec::default());
        let back = parse_network(&serialize_network(&net)).unwrap();
        for _ in 0..50 {
            let x = input.sample(&mut rng);
            prop_assert_eq!(evaluate_output(&net, &x).unwrap(), evaluate_output(&back, &x).unwrap());
        }
    }

    #[test]
    fn routing_picks_the_enclosing_cell(
        splits in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = InputBox::uniform(splits.len(), -1.0, 2.0);
        let plan = SlicePlan::new(splits.clone()).unwrap();
        let cells = slice_domain(&input, &plan).unwrap();
        prop_assert_eq!(cells.len(), splits.iter().product::<usize>());
        let stub = Network::new(
            "sum",
            vec![
                vec![Neuron::Input; splits.len()],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(0, 0), 1.0)])],
            ],
        )
        .unwrap();
        let family = NetworkFamily {
            plan,
            input: input.clone(),
            entries: cells
                .iter()
                .enumerate()
                .map(|(index, c)| FamilyEntry {
                    index,
                    input: c.clone(),
                    model: EntryModel::Network(stub.clone()),
                    report: None,
                })
                .collect(),
        };
        for _ in 0..100 {
            let x = input.sample(&mut rng);
            let i = route(&family, &x).unwrap();
            prop_assert!(cells[i].contains(&x));
        }
        prop_assert!(route(&family, &vec![2.5; splits.len()]).is_err());
    }

    #[test]
    fn minimal_error_line_beats_any_line(
        lb in -10.0f64..-1e-3,
        ub in 1e-3f64..10.0,
        a in -2.0f64..2.0,
        b in -5.0f64..5.0,
    ) {
        let (_, e) = minimal_error_line(lb, ub).unwrap();
        let l = Line::new(a, b);
        let err = [lb, 0.0, ub].iter().map(|&x| (x.max(0.0) - l.eval(x)).abs()).fold(0.0, f64::max);
        prop_assert!(err >= e - 1e-12);
    }
}
