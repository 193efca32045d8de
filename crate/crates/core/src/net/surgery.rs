//! Neuron removal.
//!
//! A weighted-sum neuron `v = b_v + sum c_i x_i` that only feeds weighted
//! sums can be substituted into each consumer `u = b_u + c v + ...`, giving
//! `u = (b_u + c b_v) + sum c c_i x_i + ...`, after which `v` has no
//! readers and is deleted. Activation neurons are removed by first turning
//! them into weighted sums of their source.

use crate::error::{Error, Result};

use super::{AffineMap, Line, Network, Neuron, NeuronRef, Term};

/// Mutable working copy where deleted neurons leave holes until compaction.
struct Work {
    name: String,
    layers: Vec<Vec<Option<Neuron>>>,
    origins: Vec<Vec<NeuronRef>>,
    metadata: std::collections::BTreeMap<String, String>,
}

impl Work {
    fn from(net: &Network) -> Self {
        let (name, layers, origins, metadata) = net.clone().into_parts();
        Work {
            name,
            layers: layers
                .into_iter()
                .map(|l| l.into_iter().map(Some).collect())
                .collect(),
            origins,
            metadata,
        }
    }

    fn get(&self, r: NeuronRef) -> Option<&Neuron> {
        self.layers.get(r.layer)?.get(r.index)?.as_ref()
    }

    fn live(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        self.layers.iter().enumerate().flat_map(|(l, layer)| {
            layer
                .iter()
                .enumerate()
                .filter(|(_, n)| n.is_some())
                .map(move |(i, _)| NeuronRef::new(l, i))
        })
    }

    fn consumers_of(&self, v: NeuronRef) -> Vec<NeuronRef> {
        self.live()
            .filter(|&u| u.layer > v.layer)
            .filter(|&u| self.get(u).unwrap().sources().contains(&v))
            .collect()
    }

    /// Substitutes weighted-sum `v` into all its consumers and deletes it.
    fn eliminate(&mut self, v: NeuronRef) -> Result<()> {
        let last = self.layers.len() - 1;
        if v.layer == 0 || v.layer == last {
            return Err(Error::Precondition(format!(
                "neuron {v} is in the input or output layer and cannot be removed"
            )));
        }
        let (vb, vterms) = match self.get(v) {
            Some(Neuron::WeightedSum { bias, terms }) => (*bias, terms.clone()),
            Some(_) => {
                return Err(Error::Precondition(format!(
                    "neuron {v} is not a weighted sum"
                )))
            }
            None => return Err(Error::Precondition(format!("neuron {v} does not exist"))),
        };
        let consumers = self.consumers_of(v);
        if let Some(u) = consumers
            .iter()
            .find(|&&u| !self.get(u).unwrap().is_weighted_sum())
        {
            return Err(Error::Precondition(format!(
                "neuron {v} feeds activation neuron {u}"
            )));
        }
        for u in consumers {
            let Some(Neuron::WeightedSum { bias, terms }) = self.layers[u.layer][u.index].as_mut()
            else {
                unreachable!()
            };
            let c: f64 = terms
                .iter()
                .filter(|t| t.source == v)
                .map(|t| t.coeff)
                .sum();
            terms.retain(|t| t.source != v);
            *bias += c * vb;
            for t in &vterms {
                add_term(terms, t.source, c * t.coeff);
            }
        }
        self.layers[v.layer][v.index] = None;
        Ok(())
    }

    fn compact(self) -> Network {
        self.compact_with_map().0
    }

    /// Removes holes and empty hidden layers. The map sends each old
    /// position to its new one, or `None` if the neuron was deleted.
    fn compact_with_map(self) -> (Network, Vec<Vec<Option<NeuronRef>>>) {
        let Work {
            name,
            layers,
            origins,
            mut metadata,
        } = self;
        let last = layers.len() - 1;
        let mut map: Vec<Vec<Option<NeuronRef>>> = Vec::with_capacity(layers.len());
        let mut dropped = Vec::new();
        let mut next_layer = 0;
        for (l, layer) in layers.iter().enumerate() {
            let live = layer.iter().filter(|n| n.is_some()).count();
            if live == 0 && l != 0 && l != last {
                dropped.push(l);
                map.push(vec![None; layer.len()]);
                continue;
            }
            let mut idx = 0;
            map.push(
                layer
                    .iter()
                    .map(|n| {
                        n.as_ref().map(|_| {
                            let r = NeuronRef::new(next_layer, idx);
                            idx += 1;
                            r
                        })
                    })
                    .collect(),
            );
            next_layer += 1;
        }

        let mut new_layers = Vec::with_capacity(next_layer);
        let mut new_origins = Vec::with_capacity(next_layer);
        for (l, (layer, orig)) in layers.into_iter().zip(origins).enumerate() {
            if dropped.contains(&l) {
                continue;
            }
            let mut nl = Vec::new();
            let mut no = Vec::new();
            for (neuron, o) in layer.into_iter().zip(orig) {
                if let Some(mut n) = neuron {
                    n.map_sources(|s| map[s.layer][s.index].expect("reference to deleted neuron"));
                    nl.push(n);
                    no.push(o);
                }
            }
            new_layers.push(nl);
            new_origins.push(no);
        }
        if !dropped.is_empty() {
            let note = dropped
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            metadata
                .entry("surgery.dropped_layers".to_string())
                .and_modify(|s| {
                    s.push(';');
                    s.push_str(&note);
                })
                .or_insert(note);
        }
        (
            Network::from_parts(name, new_layers, new_origins, metadata),
            map,
        )
    }
}

/// Keeps the inputs and every ancestor of `roots` (roots included), and
/// drops everything else. Returns the smaller network and the position map.
pub(crate) fn restrict_to_cone(
    net: &Network,
    roots: &[NeuronRef],
) -> (Network, Vec<Vec<Option<NeuronRef>>>) {
    let mut keep: Vec<Vec<bool>> = net.layers().iter().map(|l| vec![false; l.len()]).collect();
    keep[0].iter_mut().for_each(|k| *k = true);
    let mut stack: Vec<NeuronRef> = roots.to_vec();
    while let Some(r) = stack.pop() {
        if keep[r.layer][r.index] {
            continue;
        }
        keep[r.layer][r.index] = true;
        stack.extend(net.neuron(r).unwrap().sources());
    }
    let mut work = Work::from(net);
    for (l, layer) in work.layers.iter_mut().enumerate() {
        for (i, n) in layer.iter_mut().enumerate() {
            if !keep[l][i] {
                *n = None;
            }
        }
    }
    work.compact_with_map()
}

/// Adds `coeff * source` to a term list, merging duplicates. A merged
/// coefficient that cancels to exactly zero drops the term.
fn add_term(terms: &mut Vec<Term>, source: NeuronRef, coeff: f64) {
    if let Some(pos) = terms.iter().position(|t| t.source == source) {
        terms[pos].coeff += coeff;
        if terms[pos].coeff == 0.0 {
            terms.remove(pos);
        }
    } else if coeff != 0.0 {
        terms.push(Term::new(source, coeff));
    }
}

/// Substitutes the weighted-sum neuron `v` into its consumers and deletes it.
pub fn eliminate_ws_neuron(net: &Network, v: NeuronRef) -> Result<Network> {
    let mut work = Work::from(net);
    work.eliminate(v)?;
    Ok(work.compact())
}

/// Turns activation `v = f(x)` into the weighted sum `v = a x + b`.
pub fn replace_activation(net: &Network, v: NeuronRef, line: Line) -> Result<Network> {
    let source = match net.neuron(v) {
        Some(Neuron::Activation { source, .. }) => *source,
        Some(_) => {
            return Err(Error::Precondition(format!(
                "neuron {v} is not an activation"
            )))
        }
        None => return Err(Error::Precondition(format!("neuron {v} does not exist"))),
    };
    let mut out = net.clone();
    out.layers_mut()[v.layer][v.index] =
        Neuron::ws(line.intercept, vec![Term::new(source, line.slope)]);
    Ok(out)
}

/// Eliminates every hidden weighted-sum neuron that only feeds weighted sums,
/// until none is left.
pub fn saturate_ws_elimination(net: &Network) -> Network {
    let mut work = Work::from(net);
    let last = work.layers.len().saturating_sub(1);
    loop {
        let eligible: Vec<NeuronRef> = work
            .live()
            .filter(|r| r.layer > 0 && r.layer < last)
            .filter(|&r| work.get(r).unwrap().is_weighted_sum())
            .filter(|&r| {
                work.consumers_of(r)
                    .iter()
                    .all(|&u| work.get(u).unwrap().is_weighted_sum())
            })
            .collect();
        if eligible.is_empty() {
            break;
        }
        for v in eligible {
            // eligibility cannot be lost by substituting other weighted sums
            work.eliminate(v)
                .expect("eligible neuron must be removable");
        }
    }
    work.compact()
}

/// The exact affine map computed by `net`, or `None` if an activation
/// survives saturation.
pub fn to_affine(net: &Network) -> Option<AffineMap> {
    let sat = saturate_ws_elimination(net);
    if sat.num_activations() > 0 {
        return None;
    }
    let dim = sat.input_dim();
    let mut forms: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(sat.num_layers());
    for layer in sat.layers() {
        let mut out = Vec::with_capacity(layer.len());
        for (i, neuron) in layer.iter().enumerate() {
            let form = match neuron {
                Neuron::Input => {
                    let mut c = vec![0.0; dim];
                    c[i] = 1.0;
                    (c, 0.0)
                }
                Neuron::WeightedSum { bias, terms } => {
                    let mut c = vec![0.0; dim];
                    let mut k = *bias;
                    for t in terms {
                        let (sc, sk) = &forms[t.source.layer][t.source.index];
                        for (a, b) in c.iter_mut().zip(sc) {
                            *a += t.coeff * b;
                        }
                        k += t.coeff * sk;
                    }
                    (c, k)
                }
                Neuron::Activation { .. } => unreachable!(),
            };
            out.push(form);
        }
        forms.push(out);
    }
    let outputs = forms.pop()?;
    let (matrix, offset) = outputs.into_iter().unzip();
    Some(AffineMap { matrix, offset })
}
