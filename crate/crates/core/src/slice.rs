//! Input slicing: split the box into a grid, simplify each cell on its own,
//! and serve inputs from the cell they fall in.
//!
//! Cells are half-open `[lo, hi)` per dimension except the last one, which
//! is closed, so every point of the base box belongs to exactly one cell.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::net::{parse_network, serialize_network, to_affine, AffineMap, Network};
use crate::pipeline::{simplify_with_prior, PipelineConfig, SimplifyReport};
use crate::prop::{tighten_with, InputBox, Interval, TightenOptions};

/// Number of even sub-ranges per input dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub splits: Vec<usize>,
}

impl SlicePlan {
    pub fn new(splits: Vec<usize>) -> Result<Self> {
        if let Some(d) = splits.iter().position(|&n| n == 0) {
            return Err(Error::Input(format!("dimension {d} has 0 splits")));
        }
        Ok(SlicePlan { splits })
    }

    pub fn uniform(dim: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; dim])
    }

    /// Parses `"2,2,4"`.
    pub fn parse(text: &str) -> Result<Self> {
        let splits = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad split count {s:?} in {text:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(splits)
    }

    pub fn count(&self) -> usize {
        self.splits.iter().product()
    }

    fn check(&self, input: &InputBox) -> Result<()> {
        if self.splits.len() != input.dim() {
            return Err(Error::Input(format!(
                "plan has {} dimensions, box has {}",
                self.splits.len(),
                input.dim()
            )));
        }
        Ok(())
    }

    /// Per-dimension cell coordinates of flat index `index` (row-major,
    /// last dimension fastest).
    fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.splits.len()];
        for d in (0..self.splits.len()).rev() {
            out[d] = index % self.splits[d];
            index /= self.splits[d];
        }
        out
    }

    fn flat(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.splits)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }
}

/// Left edge of cell `k` of `n` over `iv`; `edge(n) == hi` exactly.
fn edge(iv: &Interval, n: usize, k: usize) -> f64 {
    if k == n {
        iv.hi
    } else {
        iv.lo + iv.width() * k as f64 / n as f64
    }
}

/// The grid of cells in row-major order.
pub fn slice_domain(input: &InputBox, plan: &SlicePlan) -> Result<Vec<InputBox>> {
    plan.check(input)?;
    Ok((0..plan.count())
        .map(|i| cell(input, plan, &plan.coords(i)))
        .collect())
}

fn cell(input: &InputBox, plan: &SlicePlan, coords: &[usize]) -> InputBox {
    InputBox {
        dims: input
            .dims
            .iter()
            .zip(&plan.splits)
            .zip(coords)
            .map(|((iv, &n), &k)| Interval::new(edge(iv, n, k), edge(iv, n, k + 1)))
            .collect(),
    }
}

/// What an entry evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryModel {
    Network(Network),
    Affine(AffineMap),
}

impl EntryModel {
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            EntryModel::Network(n) => crate::net::evaluate_output(n, x),
            EntryModel::Affine(a) => a.apply(x),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, EntryModel::Affine(_))
    }

    /// Hidden neurons left; an affine map has none.
    pub fn hidden(&self) -> usize {
        match self {
            EntryModel::Network(n) => n.num_hidden(),
            EntryModel::Affine(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyEntry {
    pub index: usize,
    pub input: InputBox,
    pub model: EntryModel,
    /// `None` for cells left unsimplified.
    pub report: Option<SimplifyReport>,
}

impl FamilyEntry {
    /// Output error bound of the entry against the original network.
    pub fn error_bound(&self) -> f64 {
        self.report.as_ref().map_or(0.0, |r| r.ledger.headline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkFamily {
    pub plan: SlicePlan,
    pub input: InputBox,
    pub entries: Vec<FamilyEntry>,
}

/// Simplifies the network on every cell of `plan`, or only on the cells
/// listed in `sample`; the other cells keep the original network.
pub fn slice_and_simplify(
    net: &Network,
    input: &InputBox,
    plan: &SlicePlan,
    config: &PipelineConfig,
    sample: Option<&[usize]>,
) -> Result<NetworkFamily> {
    config.validate()?;
    input.check_network(net)?;
    let cells = slice_domain(input, plan)?;
    let mut selected = vec![sample.is_none(); cells.len()];
    for &i in sample.unwrap_or(&[]) {
        *selected.get_mut(i).ok_or_else(|| {
            Error::Input(format!(
                "sample index {i} out of range (0..{})",
                cells.len()
            ))
        })? = true;
    }
    let work = || -> Result<NetworkFamily> {
        let parent = tighten_with(
            net,
            input,
            TightenOptions {
                budget: config.bound_budget,
                ..TightenOptions::default()
            },
            None,
        )?;
        let inner = PipelineConfig {
            threads: None,
            ..config.clone()
        };
        let entries = cells
            .into_par_iter()
            .enumerate()
            .map(|(index, cell)| {
                if !selected[index] {
                    return Ok(FamilyEntry {
                        index,
                        input: cell,
                        model: EntryModel::Network(net.clone()),
                        report: None,
                    });
                }
                let cfg = PipelineConfig {
                    seed: config.seed.wrapping_add(index as u64),
                    ..inner.clone()
                };
                let (simplified, report) = simplify_with_prior(net, &cell, &cfg, Some(&parent))?;
                let model = match to_affine(&simplified) {
                    Some(a) => EntryModel::Affine(a),
                    None => EntryModel::Network(simplified),
                };
                Ok(FamilyEntry {
                    index,
                    input: cell,
                    model,
                    report: Some(report),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkFamily {
            plan: plan.clone(),
            input: input.clone(),
            entries,
        })
    };
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Index of the cell holding `x`.
pub fn route(family: &NetworkFamily, x: &[f64]) -> Result<usize> {
    if x.len() != family.input.dim() {
        return Err(Error::Routing(format!(
            "input has {} values, family expects {}",
            x.len(),
            family.input.dim()
        )));
    }
    let mut coords = Vec::with_capacity(x.len());
    for (d, ((iv, &n), &v)) in family
        .input
        .dims
        .iter()
        .zip(&family.plan.splits)
        .zip(x)
        .enumerate()
    {
        if !iv.contains(v) {
            return Err(Error::Routing(format!(
                "input {v} in dimension {d} is outside [{}, {}]",
                iv.lo, iv.hi
            )));
        }
        let mut k = if iv.width() > 0.0 {
            (((v - iv.lo) / iv.width() * n as f64).floor() as usize).min(n - 1)
        } else {
            0
        };
        // agree with the cell edges exactly
        while k > 0 && v < edge(iv, n, k) {
            k -= 1;
        }
        while k + 1 < n && v >= edge(iv, n, k + 1) {
            k += 1;
        }
        coords.push(k);
    }
    Ok(family.plan.flat(&coords))
}

pub fn family_evaluate(family: &NetworkFamily, x: &[f64]) -> Result<Vec<f64>> {
    let i = route(family, x)?;
    family.entries[i].model.evaluate(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub index: usize,
    pub simplified: bool,
    pub hidden_before: usize,
    pub hidden_after: usize,
    pub removed_fraction: f64,
    pub phase_fraction: f64,
    pub fully_linear: bool,
    pub error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub entries: Vec<EntryStats>,
    pub mean_removed: f64,
    pub min_removed: f64,
    pub max_removed: f64,
    pub mean_phase_fraction: f64,
    pub fully_linear: usize,
}

/// Per-cell removal statistics. Means run over simplified cells only.
pub fn linearization_report(family: &NetworkFamily) -> LinearizationReport {
    let entries: Vec<EntryStats> = family
        .entries
        .iter()
        .map(|e| {
            let hidden_before = e
                .report
                .as_ref()
                .map_or(e.model.hidden(), |r| r.counts.hidden_before);
            let hidden_after = e.model.hidden();
            EntryStats {
                index: e.index,
                simplified: e.report.is_some(),
                hidden_before,
                hidden_after,
                removed_fraction: if hidden_before == 0 {
                    0.0
                } else {
                    hidden_before.saturating_sub(hidden_after) as f64 / hidden_before as f64
                },
                phase_fraction: e
                    .report
                    .as_ref()
                    .map_or(0.0, SimplifyReport::phase_fraction),
                fully_linear: e.model.is_affine(),
                error_bound: e.error_bound(),
            }
        })
        .collect();
    let done: Vec<&EntryStats> = entries.iter().filter(|e| e.simplified).collect();
    let mean = |f: fn(&EntryStats) -> f64| {
        if done.is_empty() {
            0.0
        } else {
            done.iter().map(|e| f(e)).sum::<f64>() / done.len() as f64
        }
    };
    let removed = |e: &EntryStats| e.removed_fraction;
    LinearizationReport {
        mean_removed: mean(removed),
        min_removed: if done.is_empty() {
            0.0
        } else {
            done.iter()
                .map(|e| e.removed_fraction)
                .fold(f64::INFINITY, f64::min)
        },
        max_removed: done.iter().map(|e| e.removed_fraction).fold(0.0, f64::max),
        mean_phase_fraction: mean(|e| e.phase_fraction),
        fully_linear: entries.iter().filter(|e| e.fully_linear).count(),
        entries,
    }
}

fn entry_file(index: usize) -> String {
    format!("entry_{index:06}.json")
}

fn report_file(index: usize) -> String {
    format!("report_{index:06}.json")
}

impl NetworkFamily {
    /// Writes `manifest.json` plus one file per entry (and per report).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest_entries = Vec::new();
        for e in &self.entries {
            let body = match &e.model {
                EntryModel::Network(n) => serialize_network(n),
                EntryModel::Affine(a) => json!({ "affine": a }).to_string(),
            };
            fs::write(dir.join(entry_file(e.index)), body)?;
            let mut m = json!({
                "index": e.index,
                "path": entry_file(e.index),
                "fully_linear": e.model.is_affine(),
                "error_bound": e.error_bound(),
            });
            if let Some(r) = &e.report {
                fs::write(dir.join(report_file(e.index)), r.to_json())?;
                m["report"] = json!(report_file(e.index));
            }
            manifest_entries.push(m);
        }
        let manifest = json!({
            "plan": self.plan.splits,
            "box": self.input,
            "entries": manifest_entries,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        let m: Value = serde_json::from_str(&text).map_err(|e| Error::parse("$", e.to_string()))?;
        let plan: Vec<usize> = serde_json::from_value(m["plan"].clone())
            .map_err(|e| Error::parse("$.plan", e.to_string()))?;
        let plan = SlicePlan::new(plan)?;
        let input: InputBox = serde_json::from_value(m["box"].clone())
            .map_err(|e| Error::parse("$.box", e.to_string()))?;
        let input = InputBox::new(input.dims)?;
        plan.check(&input)?;
        let list = m["entries"]
            .as_array()
            .ok_or_else(|| Error::parse("$.entries", "expected an array"))?;
        if list.len() != plan.count() {
            return Err(Error::parse(
                "$.entries",
                format!(
                    "{} entries for a plan of {} cells",
                    list.len(),
                    plan.count()
                ),
            ));
        }
        let mut entries = Vec::with_capacity(list.len());
        for (k, item) in list.iter().enumerate() {
            let path = format!("$.entries[{k}]");
            let index = item["index"]
                .as_u64()
                .ok_or_else(|| Error::parse(format!("{path}.index"), "expected an integer"))?
                as usize;
            if index != k {
                return Err(Error::parse(
                    format!("{path}.index"),
                    "entries must be in order",
                ));
            }
            let file = item["path"]
                .as_str()
                .ok_or_else(|| Error::parse(format!("{path}.path"), "expected a string"))?;
            let body = fs::read_to_string(dir.join(file))?;
            let v: Value = serde_json::from_str(&body)
                .map_err(|e| Error::parse(file.to_string(), e.to_string()))?;
            let model = match v.get("affine") {
                Some(a) => EntryModel::Affine(
                    serde_json::from_value(a.clone())
                        .map_err(|e| Error::parse(format!("{file}: $.affine"), e.to_string()))?,
                ),
                None => EntryModel::Network(parse_network(&body)?),
            };
            let report = match item.get("report").and_then(Value::as_str) {
                Some(r) => Some(
                    serde_json::from_str(&fs::read_to_string(dir.join(r))?)
                        .map_err(|e| Error::parse(r.to_string(), e.to_string()))?,
                ),
                None => None,
            };
            entries.push(FamilyEntry {
                index,
                input: cell(&input, &plan, &plan.coords(index)),
                model,
                report,
            });
        }
        Ok(NetworkFamily {
            plan,
            input,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::net::evaluate_output;
    use crate::pipeline::{simplify, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick() -> PipelineConfig {
        PipelineConfig {
            sim_samples: 1000,
            ..PipelineConfig::default()
        }
    }

    fn dummy_family(lo: f64, hi: f64, n: usize) -> NetworkFamily {
        let input = InputBox::from_pairs(&[(lo, hi)]).unwrap();
        let plan = SlicePlan::new(vec![n]).unwrap();
        let net = fixtures::cancel_net();
        NetworkFamily {
            entries: slice_domain(&input, &plan)
                .unwrap()
                .into_iter()
                .enumerate()
                .map(|(index, input)| FamilyEntry {
                    index,
                    input,
                    model: EntryModel::Network(net.clone()),
                    report: None,
                })
                .collect(),
            plan,
            input,
        }
    }

    #[test]
    fn grid_shapes() {
        let b = InputBox::from_pairs(&[(0.0, 1.0)]).unwrap();
        let cells = slice_domain(&b, &SlicePlan::new(vec![2]).unwrap()).unwrap();
        assert_eq!(cells[0].dims[0], Interval::new(0.0, 0.5));
        assert_eq!(cells[1].dims[0], Interval::new(0.5, 1.0));
        let b2 = fixtures::unit_box(2);
        let cells = slice_domain(&b2, &SlicePlan::new(vec![2, 2]).unwrap()).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(
            cells[1].dims,
            vec![Interval::new(-1.0, 0.0), Interval::new(0.0, 1.0)]
        );
        assert_eq!(
            cells[2].dims,
            vec![Interval::new(0.0, 1.0), Interval::new(-1.0, 0.0)]
        );
        let b5 = fixtures::unit_box(5);
        assert_eq!(
            slice_domain(&b5, &SlicePlan::uniform(5, 8).unwrap())
                .unwrap()
                .len(),
            32_768
        );
        assert!(slice_domain(&b5, &SlicePlan::uniform(4, 8).unwrap()).is_err());
        assert!(SlicePlan::parse("2,x").is_err());
        assert!(SlicePlan::parse("2,0").is_err());
        assert_eq!(SlicePlan::parse("2, 3").unwrap().splits, vec![2, 3]);
    }

    #[test]
    fn routing_edges() {
        let f = dummy_family(0.0, 1.0, 2);
        assert_eq!(route(&f, &[0.5]).unwrap(), 1);
        assert_eq!(route(&f, &[1.0]).unwrap(), 1);
        assert_eq!(route(&f, &[0.0]).unwrap(), 0);
        assert_eq!(route(&f, &[0.4999999]).unwrap(), 0);
        assert!(matches!(route(&f, &[1.0000001]), Err(Error::Routing(_))));
        assert!(route(&f, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn routing_partitions() {
        let f = dummy_family(-0.3, 0.7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x = f.input.sample(&mut rng);
            let i = route(&f, &x).unwrap();
            let iv = f.entries[i].input.dims[0];
            assert!(iv.lo <= x[0] && (x[0] < iv.hi || (i == 6 && x[0] == iv.hi)));
        }
        for k in 0..=7 {
            let x = edge(&f.input.dims[0], 7, k);
            let i = route(&f, &[x]).unwrap();
            assert_eq!(i, k.min(6));
        }
    }

    #[test]
    fn one_cell_equals_plain_simplify() {
        let net = fixtures::cancel_net();
        let input = fixtures::unit_box(1);
        let fam = slice_and_simplify(
            &net,
            &input,
            &SlicePlan::new(vec![1]).unwrap(),
            &quick(),
            None,
        )
        .unwrap();
        let (plain, _) = simplify(&net, &input, &quick()).unwrap();
        match &fam.entries[0].model {
            EntryModel::Network(n) => assert_eq!(n.layers(), plain.layers()),
            EntryModel::Affine(a) => assert_eq!(Some(a), to_affine(&plain).as_ref()),
        }
    }

    #[test]
    fn vote_net_left_quarter_collapses() {
        let net = fixtures::vote_net();
        let input = fixtures::unit_box(1);
        let fam = slice_and_simplify(
            &net,
            &input,
            &SlicePlan::new(vec![4]).unwrap(),
            &quick(),
            None,
        )
        .unwrap();
        assert!(fam.entries[0].model.is_affine());
        let rep = linearization_report(&fam);
        assert!(rep.entries[0].fully_linear);
        assert!(rep.fully_linear >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let x = input.sample(&mut rng);
            let a = evaluate_output(&net, &x).unwrap();
            let b = family_evaluate(&fam, &x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sampled_cells_and_round_trip() {
        let net = fixtures::toy_net();
        let input = fixtures::unit_box(3);
        let plan = SlicePlan::uniform(3, 2).unwrap();
        let cfg = PipelineConfig {
            mode: Mode::Relaxed { e_t: 1e-3 },
            ..quick()
        };
        let fam = slice_and_simplify(&net, &input, &plan, &cfg, Some(&[0, 5])).unwrap();
        assert_eq!(fam.entries.iter().filter(|e| e.report.is_some()).count(), 2);
        let rep = linearization_report(&fam);
        assert_eq!(rep.entries[1].removed_fraction, 0.0);
        assert!(slice_and_simplify(&net, &input, &plan, &cfg, Some(&[8])).is_err());

        let dir = tempfile::tempdir().unwrap();
        fam.save(dir.path()).unwrap();
        let back = NetworkFamily::load(dir.path()).unwrap();
        assert_eq!(back.plan, fam.plan);
        assert_eq!(back.entries.len(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let x = input.sample(&mut rng);
            assert_eq!(
                family_evaluate(&back, &x).unwrap(),
                family_evaluate(&fam, &x).unwrap()
            );
            let e = &fam.entries[route(&fam, &x).unwrap()];
            let a = evaluate_output(&net, &x).unwrap();
            let b = family_evaluate(&fam, &x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= e.error_bound() + 1e-9);
            }
        }
        assert!(NetworkFamily::load(&dir.path().join("missing")).is_err());
    }
}
