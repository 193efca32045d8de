use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{evaluate_unchecked, replace_activation, LayerTrace, Network, Neuron};
use crate::prop::InputBox;
use crate::verify::argmax_mismatch;

use super::Candidate;

const CHUNK: usize = 4096;

/// A sampled input that refutes a candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub candidate: Candidate,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimulationOutcome {
    pub survivors: Vec<Candidate>,
    pub dropped: Vec<Counterexample>,
}

/// Evaluates `samples` uniform inputs from the box (fixed by `seed`) and
/// drops every candidate that one of them refutes. The counterexample kept
/// is the first refuting sample in draw order.
pub fn simulate_filter(
    net: &Network,
    input: &InputBox,
    candidates: &[Candidate],
    samples: usize,
    seed: u64,
) -> Result<SimulationOutcome> {
    if samples == 0 {
        return Err(Error::Precondition(
            "simulation needs at least one sample".into(),
        ));
    }
    input.check_network(net)?;
    let checkers: Vec<Checker> = candidates
        .iter()
        .map(|c| Checker::new(net, c))
        .collect::<Result<_>>()?;
    let mut refuted: Vec<Option<Vec<f64>>> = vec![None; candidates.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < samples {
        let n = CHUNK.min(samples - done);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| input.sample(&mut rng)).collect();
        done += n;
        let traces: Vec<LayerTrace> = xs.par_iter().map(|x| evaluate_unchecked(net, x)).collect();
        let hits: Vec<Option<usize>> = checkers
            .par_iter()
            .zip(&refuted)
            .map(|(ch, r)| {
                if r.is_some() {
                    return None;
                }
                (0..n).find(|&s| ch.refutes(&xs[s], &traces[s]))
            })
            .collect();
        for (slot, hit) in refuted.iter_mut().zip(hits) {
            if let Some(s) = hit {
                *slot = Some(xs[s].clone());
            }
        }
        if refuted.iter().all(Option::is_some) {
            break;
        }
    }
    let mut out = SimulationOutcome::default();
    for (c, r) in candidates.iter().zip(refuted) {
        match r {
            None => out.survivors.push(c.clone()),
            Some(x) => out.dropped.push(Counterexample {
                candidate: c.clone(),
                input: x,
            }),
        }
    }
    Ok(out)
}

enum Checker {
    Phase {
        source: crate::net::NeuronRef,
        lo: f64,
        hi: f64,
    },
    Forward {
        modified: Network,
        layer: usize,
        tolerance: f64,
    },
    Argmax {
        modified: Network,
        margin: f64,
    },
}

impl Checker {
    fn new(net: &Network, c: &Candidate) -> Result<Self> {
        let v = c.neuron();
        let Some(Neuron::Activation { source, func }) = net.neuron(v) else {
            return Err(Error::Precondition(format!(
                "neuron {v} is not an activation"
            )));
        };
        Ok(match *c {
            Candidate::Phase { segment, .. } => {
                if segment >= func.num_segments() {
                    return Err(Error::Precondition(format!(
                        "neuron {v} has no segment {segment}"
                    )));
                }
                let (lo, hi) = func.segment_range(segment);
                Checker::Phase {
                    source: *source,
                    lo,
                    hi,
                }
            }
            Candidate::Forward {
                line, k, tolerance, ..
            } => {
                let layer = v.layer + k + 1;
                if layer >= net.num_layers() {
                    return Err(Error::Precondition(format!(
                        "k = {k} from layer {} is beyond the output layer",
                        v.layer
                    )));
                }
                Checker::Forward {
                    modified: replace_activation(net, v, line)?,
                    layer,
                    tolerance,
                }
            }
            Candidate::ResultPreserving { line, margin, .. } => {
                if net.output_dim() < 2 {
                    return Err(Error::Precondition(
                        "result-preserving candidates need at least 2 outputs".into(),
                    ));
                }
                Checker::Argmax {
                    modified: replace_activation(net, v, line)?,
                    margin,
                }
            }
        })
    }

    fn refutes(&self, x: &[f64], orig: &LayerTrace) -> bool {
        match self {
            Checker::Phase { source, lo, hi } => {
                let s = orig.get(*source);
                s < *lo || s > *hi
            }
            Checker::Forward {
                modified,
                layer,
                tolerance,
            } => {
                let m = evaluate_unchecked(modified, x);
                orig.values[*layer]
                    .iter()
                    .zip(&m.values[*layer])
                    .any(|(a, b)| (a - b).abs() > *tolerance)
            }
            Checker::Argmax { modified, margin } => {
                let m = evaluate_unchecked(modified, x);
                argmax_mismatch(orig.output(), m.output(), *margin)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::net::{Line, NeuronRef, Term};

    #[test]
    fn relu_on_both_signs_is_dropped() {
        let net = Network::new(
            "r",
            vec![
                vec![Neuron::Input],
                vec![Neuron::relu(NeuronRef::new(0, 0))],
                vec![Neuron::ws(0.0, vec![Term::new(NeuronRef::new(1, 0), 1.0)])],
            ],
        )
        .unwrap();
        let v = NeuronRef::new(1, 0);
        let cands = [
            Candidate::Phase {
                neuron: v,
                segment: 0,
            },
            Candidate::Phase {
                neuron: v,
                segment: 1,
            },
        ];
        let out = simulate_filter(&net, &fixtures::unit_box(1), &cands, 1000, 3).unwrap();
        assert!(out.survivors.is_empty());
        assert_eq!(out.dropped.len(), 2);
    }

    #[test]
    fn cancel_net_forward_survives() {
        let net = fixtures::cancel_net();
        let cands = [
            Candidate::Forward {
                neuron: fixtures::CANCEL_Y,
                line: Line::ZERO,
                k: 2,
                tolerance: 1e-9,
            },
            Candidate::Forward {
                neuron: fixtures::CANCEL_Y,
                line: Line::ZERO,
                k: 1,
                tolerance: 1e-9,
            },
        ];
        let out = simulate_filter(&net, &fixtures::unit_box(1), &cands, 100_000, 0).unwrap();
        assert_eq!(out.survivors, vec![cands[0].clone()]);
        assert_eq!(out.dropped.len(), 1);
    }

    #[test]
    fn counterexamples_witness_the_queries() {
        let net = fixtures::vote_net_with_bias(0.5);
        let input = fixtures::unit_box(1);
        let cand = Candidate::ResultPreserving {
            neuron: fixtures::VOTE_Y,
            line: Line::ZERO,
            margin: 0.0,
        };
        let out = simulate_filter(&net, &input, std::slice::from_ref(&cand), 10_000, 1).unwrap();
        assert_eq!(out.dropped.len(), 1);
        let x = &out.dropped[0].input;
        assert!(cand
            .queries(&net, &input)
            .unwrap()
            .iter()
            .any(|q| q.witnesses(x)));

        let ok = simulate_filter(&fixtures::vote_net(), &input, &[cand], 10_000, 1).unwrap();
        assert_eq!(ok.survivors.len(), 1);
    }

    #[test]
    fn deterministic_for_seed() {
        let net = fixtures::toy_net();
        let input = fixtures::unit_box(3);
        let cands: Vec<Candidate> = net
            .activation_refs()
            .into_iter()
            .flat_map(|v| (0..2).map(move |segment| Candidate::Phase { neuron: v, segment }))
            .collect();
        let a = simulate_filter(&net, &input, &cands, 5000, 42).unwrap();
        let b = simulate_filter(&net, &input, &cands, 5000, 42).unwrap();
        assert_eq!(a, b);
        assert!(simulate_filter(&net, &input, &cands, 0, 42).is_err());
    }
}
