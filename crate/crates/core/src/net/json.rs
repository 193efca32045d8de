//! Network JSON format.
//!
//! ```json
//! {"name": "n", "layers": [
//!   {"kind": "input", "size": 1},
//!   {"kind": "weighted_sum", "neurons": [{"bias": 0, "terms": [{"layer": 0, "index": 0, "coeff": 1}]}]},
//!   {"kind": "activation", "neurons": [{"source": {"layer": 1, "index": 0}, "fn": "relu"}]},
//!   {"kind": "weighted_sum", "neurons": [{"bias": 0, "terms": [{"layer": 2, "index": 0, "coeff": 1}]}]}
//! ]}
//! ```
//!
//! Infinite breakpoints are written as the strings `"-inf"` and `"inf"`.
//! Neurons may carry an `"origin"` reference and the network an optional
//! string-valued `"metadata"` object.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

use super::{Line, Network, Neuron, NeuronRef, PiecewiseLinearFn, Term};

pub fn parse_network(text: &str) -> Result<Network> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
    network_from_value(&value)
}

pub fn serialize_network(net: &Network) -> String {
    serde_json::to_string_pretty(&network_to_value(net)).expect("network serializes")
}

pub(crate) fn network_from_value(value: &Value) -> Result<Network> {
    let root = object(value, "$")?;
    let name = match root.get("name") {
        None => String::new(),
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::parse("$.name", "expected a string"))?
            .to_string(),
    };
    let layers_v = root
        .get("layers")
        .ok_or_else(|| Error::parse("$.layers", "missing required key"))?
        .as_array()
        .ok_or_else(|| Error::parse("$.layers", "expected an array"))?;

    let mut layers = Vec::with_capacity(layers_v.len());
    let mut origins = Vec::with_capacity(layers_v.len());
    for (l, lv) in layers_v.iter().enumerate() {
        let path = format!("$.layers[{l}]");
        let obj = object(lv, &path)?;
        let kind = field(obj, &path, "kind")?
            .as_str()
            .ok_or_else(|| Error::parse(format!("{path}.kind"), "expected a string"))?;
        let mut layer = Vec::new();
        let mut layer_origins = Vec::new();
        match kind {
            "input" => {
                let size = uint(field(obj, &path, "size")?, &format!("{path}.size"))?;
                for i in 0..size {
                    layer.push(Neuron::Input);
                    layer_origins.push(NeuronRef::new(l, i));
                }
            }
            "weighted_sum" | "activation" => {
                let neurons = array(field(obj, &path, "neurons")?, &format!("{path}.neurons"))?;
                for (i, nv) in neurons.iter().enumerate() {
                    let npath = format!("{path}.neurons[{i}]");
                    let nobj = object(nv, &npath)?;
                    let neuron = if kind == "weighted_sum" {
                        parse_ws(nobj, &npath)?
                    } else {
                        parse_activation(nobj, &npath)?
                    };
                    layer.push(neuron);
                    layer_origins.push(match nobj.get("origin") {
                        Some(o) => neuron_ref(o, &format!("{npath}.origin"))?,
                        None => NeuronRef::new(l, i),
                    });
                }
            }
            other => {
                return Err(Error::parse(
                    format!("{path}.kind"),
                    format!("unknown layer kind {other:?}"),
                ))
            }
        }
        layers.push(layer);
        origins.push(layer_origins);
    }

    let mut metadata = BTreeMap::new();
    if let Some(m) = root.get("metadata") {
        for (k, v) in object(m, "$.metadata")? {
            let s = v
                .as_str()
                .ok_or_else(|| Error::parse(format!("$.metadata.{k}"), "expected a string"))?;
            metadata.insert(k.clone(), s.to_string());
        }
    }

    let net = Network::from_parts(name, layers, origins, metadata);
    let violations = super::validate(&net);
    if let Some(v) = violations.first() {
        let path = match v.at {
            Some(r) => format!("$.layers[{}].neurons[{}]", r.layer, r.index),
            None => "$.layers".to_string(),
        };
        return Err(Error::parse(path, v.to_string()));
    }
    Ok(net)
}

fn parse_ws(obj: &Map<String, Value>, path: &str) -> Result<Neuron> {
    let bias = number(field(obj, path, "bias")?, &format!("{path}.bias"))?;
    let terms_v = array(field(obj, path, "terms")?, &format!("{path}.terms"))?;
    let mut terms = Vec::with_capacity(terms_v.len());
    for (t, tv) in terms_v.iter().enumerate() {
        let tpath = format!("{path}.terms[{t}]");
        let tobj = object(tv, &tpath)?;
        let source = NeuronRef::new(
            uint(field(tobj, &tpath, "layer")?, &format!("{tpath}.layer"))?,
            uint(field(tobj, &tpath, "index")?, &format!("{tpath}.index"))?,
        );
        let coeff = number(field(tobj, &tpath, "coeff")?, &format!("{tpath}.coeff"))?;
        terms.push(Term::new(source, coeff));
    }
    Ok(Neuron::ws(bias, terms))
}

fn parse_activation(obj: &Map<String, Value>, path: &str) -> Result<Neuron> {
    let source = neuron_ref(field(obj, path, "source")?, &format!("{path}.source"))?;
    let fpath = format!("{path}.fn");
    let fv = field(obj, path, "fn")?;
    let func = match fv {
        Value::String(s) if s == "relu" => PiecewiseLinearFn::relu(),
        Value::String(s) => {
            return Err(Error::parse(fpath, format!("unknown function {s:?}")));
        }
        Value::Object(fobj) => {
            let bps = array(
                field(fobj, &fpath, "breakpoints")?,
                &format!("{fpath}.breakpoints"),
            )?
            .iter()
            .enumerate()
            .map(|(i, v)| extended(v, &format!("{fpath}.breakpoints[{i}]")))
            .collect::<Result<Vec<_>>>()?;
            let slopes = numbers(field(fobj, &fpath, "slopes")?, &format!("{fpath}.slopes"))?;
            let intercepts = numbers(
                field(fobj, &fpath, "intercepts")?,
                &format!("{fpath}.intercepts"),
            )?;
            if slopes.len() != intercepts.len() {
                return Err(Error::parse(
                    fpath,
                    "slopes and intercepts must have the same length",
                ));
            }
            let pieces = slopes
                .into_iter()
                .zip(intercepts)
                .map(|(a, b)| Line::new(a, b))
                .collect();
            PiecewiseLinearFn::new(bps, pieces).map_err(|e| Error::parse(fpath, e))?
        }
        _ => return Err(Error::parse(fpath, "expected \"relu\" or an object")),
    };
    Ok(Neuron::Activation { source, func })
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::parse(path, "expected an object"))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::parse(path, "expected an array"))
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(format!("{path}.{key}"), "missing required key"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::parse(path, format!("expected a number, found {v}")))
}

fn numbers(v: &Value, path: &str) -> Result<Vec<f64>> {
    array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect()
}

/// A number or one of the strings `"inf"`, `"-inf"`.
fn extended(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::String(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
        Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        _ => number(v, path),
    }
}

fn uint(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::parse(path, format!("expected a non-negative integer, found {v}")))
}

fn neuron_ref(v: &Value, path: &str) -> Result<NeuronRef> {
    let obj = object(v, path)?;
    Ok(NeuronRef::new(
        uint(field(obj, path, "layer")?, &format!("{path}.layer"))?,
        uint(field(obj, path, "index")?, &format!("{path}.index"))?,
    ))
}

fn extended_to_value(x: f64) -> Value {
    if x == f64::INFINITY {
        json!("inf")
    } else if x == f64::NEG_INFINITY {
        json!("-inf")
    } else {
        json!(x)
    }
}

pub(crate) fn network_to_value(net: &Network) -> Value {
    let mixed = net.layers().iter().any(|layer| {
        layer.iter().any(Neuron::is_activation) && layer.iter().any(|n| !n.is_activation())
    });
    if mixed {
        return network_to_value(&split_mixed_layers(net));
    }
    let mut layers = Vec::with_capacity(net.num_layers());
    for (l, layer) in net.layers().iter().enumerate() {
        let value = if matches!(layer.first(), Some(Neuron::Input)) {
            json!({"kind": "input", "size": layer.len()})
        } else {
            let kind = if layer.iter().all(Neuron::is_activation) && !layer.is_empty() {
                "activation"
            } else {
                "weighted_sum"
            };
            let neurons: Vec<Value> = layer
                .iter()
                .enumerate()
                .map(|(i, neuron)| {
                    let mut obj = neuron_to_map(neuron);
                    let o = net.origin(NeuronRef::new(l, i));
                    if o != NeuronRef::new(l, i) {
                        obj.insert("origin".into(), json!({"layer": o.layer, "index": o.index}));
                    }
                    Value::Object(obj)
                })
                .collect();
            json!({"kind": kind, "neurons": neurons})
        };
        layers.push(value);
    }
    let mut root = Map::new();
    root.insert("name".into(), json!(net.name));
    root.insert("layers".into(), Value::Array(layers));
    if !net.metadata.is_empty() {
        root.insert("metadata".into(), json!(net.metadata));
    }
    Value::Object(root)
}

fn neuron_to_map(neuron: &Neuron) -> Map<String, Value> {
    let mut obj = Map::new();
    match neuron {
        Neuron::Input => {}
        Neuron::WeightedSum { bias, terms } => {
            obj.insert("bias".into(), json!(bias));
            let terms: Vec<Value> = terms
                .iter()
                .map(
                    |t| json!({"layer": t.source.layer, "index": t.source.index, "coeff": t.coeff}),
                )
                .collect();
            obj.insert("terms".into(), Value::Array(terms));
        }
        Neuron::Activation { source, func } => {
            obj.insert(
                "source".into(),
                json!({"layer": source.layer, "index": source.index}),
            );
            let f = if func.is_relu() {
                json!("relu")
            } else {
                json!({
                    "breakpoints": func.breakpoints().iter().map(|&x| extended_to_value(x)).collect::<Vec<_>>(),
                    "slopes": func.pieces().iter().map(|p| p.slope).collect::<Vec<_>>(),
                    "intercepts": func.pieces().iter().map(|p| p.intercept).collect::<Vec<_>>(),
                })
            };
            obj.insert("fn".into(), f);
        }
    }
    obj
}

/// The file format has one neuron kind per layer. Surgery can leave a
/// layer holding both kinds; such a layer is split into a weighted-sum
/// layer followed by an activation layer, which keeps every reference
/// pointing backwards.
fn split_mixed_layers(net: &Network) -> Network {
    let mut layers: Vec<Vec<Neuron>> = Vec::new();
    let mut origins: Vec<Vec<NeuronRef>> = Vec::new();
    let mut map: Vec<Vec<NeuronRef>> = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        let ws: Vec<usize> = (0..layer.len())
            .filter(|&i| !layer[i].is_activation())
            .collect();
        let act: Vec<usize> = (0..layer.len())
            .filter(|&i| layer[i].is_activation())
            .collect();
        let mut row = vec![NeuronRef::new(0, 0); layer.len()];
        for group in [ws, act] {
            if group.is_empty() {
                continue;
            }
            let nl = layers.len();
            let mut new_layer = Vec::new();
            let mut new_origins = Vec::new();
            for (j, &i) in group.iter().enumerate() {
                row[i] = NeuronRef::new(nl, j);
                new_layer.push(layer[i].clone());
                new_origins.push(net.origin(NeuronRef::new(l, i)));
            }
            layers.push(new_layer);
            origins.push(new_origins);
        }
        map.push(row);
    }
    for layer in &mut layers {
        for n in layer.iter_mut() {
            n.map_sources(|s| map[s.layer][s.index]);
        }
    }
    Network::from_parts(net.name.clone(), layers, origins, net.metadata.clone())
}
