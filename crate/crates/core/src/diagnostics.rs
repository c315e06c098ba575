//! Routing-quality metrics: cue alignment of the Top-K mixture, routing
//! sharpness, within-category routing variance, and expert selection
//! frequencies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cues::sample_variance;
use crate::error::{Error, Result};
use crate::numerics::{check_dims, cosine, Matrix, Vector};
use crate::options::aggregate;

/// Factor applied to routing variance for reporting.
pub const VARIANCE_REPORT_SCALE: f64 = 10.0;

/// `cos(Σ_i g_i · h_i, direction)` over the selected experts.
pub fn sim_score(expert_outputs: &[Vector], gate: &[f64], direction: &[f64]) -> Result<f64> {
    let mixture = aggregate(gate, expert_outputs)?;
    cosine(&mixture, direction)
}

/// `gate` restricted to `topk` and renormalized.
pub fn topk_gate(gate: &[f64], topk: &[usize]) -> Result<Vector> {
    let picked = topk
        .iter()
        .map(|&i| {
            gate.get(i).copied().ok_or(Error::InvalidExpert {
                index: i,
                experts: gate.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mass: f64 = picked.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::InvalidRouting("top-k gate has no mass"));
    }
    Vector::new(picked.into_iter().map(|g| g / mass).collect())
}

/// Mean gate over `topk` minus the mean over the remaining experts.
pub fn routing_sharpness(gate: &[f64], topk: &[usize]) -> Result<f64> {
    let e = gate.len();
    if topk.is_empty() {
        return Err(Error::InvalidRouting("empty top-k set"));
    }
    if topk.len() >= e {
        return Err(Error::UndefinedSharpness);
    }
    let mut selected = vec![false; e];
    for &i in topk {
        *selected.get_mut(i).ok_or(Error::InvalidExpert { index: i, experts: e })? = true;
    }
    let (mut top, mut rest) = (0.0, 0.0);
    for (g, s) in gate.iter().zip(&selected) {
        if *s {
            top += g;
        } else {
            rest += g;
        }
    }
    Ok(top / topk.len() as f64 - rest / (e - topk.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryVariance {
    pub raw: f64,
    pub scaled: f64,
}

/// Per category, the mean over experts of the sample variance of that
/// expert's gate value.
pub fn routing_variance(
    gates_by_category: &BTreeMap<String, Vec<Vector>>,
) -> Result<BTreeMap<String, CategoryVariance>> {
    gates_by_category
        .iter()
        .map(|(category, gates)| {
            if gates.len() < 2 {
                return Err(Error::InsufficientSamples(category.clone()));
            }
            let e = gates[0].dim();
            for g in gates {
                check_dims("routing variance gate", e, g.dim())?;
            }
            let raw = (0..e)
                .map(|i| {
                    let column: Vec<f64> = gates.iter().map(|g| g[i]).collect();
                    sample_variance(&column)
                })
                .sum::<f64>()
                / e as f64;
            Ok((
                category.clone(),
                CategoryVariance {
                    raw,
                    scaled: raw * VARIANCE_REPORT_SCALE,
                },
            ))
        })
        .collect()
}

/// Selection frequency of each expert per category.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub categories: Vec<String>,
    /// `categories × E`
    pub frequency: Matrix,
}

pub fn selection_heatmap(decisions: &[(String, Vec<usize>)], experts: usize) -> Result<Heatmap> {
    if decisions.is_empty() {
        return Err(Error::InvalidInput("empty decision log".into()));
    }
    let mut counts: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for (category, topk) in decisions {
        let entry = counts
            .entry(category.as_str())
            .or_insert_with(|| (0, vec![0.0; experts]));
        entry.0 += 1;
        for &i in topk {
            *entry.1.get_mut(i).ok_or(Error::InvalidExpert { index: i, experts })? += 1.0;
        }
    }
    let categories: Vec<String> = counts.keys().map(|c| c.to_string()).collect();
    let mut values = Vec::with_capacity(categories.len() * experts);
    for (n, row) in counts.values() {
        values.extend(row.iter().map(|c| c / *n as f64));
    }
    Ok(Heatmap {
        categories,
        frequency: Matrix::new(counts.len(), experts, values)?,
    })
}

impl Heatmap {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["category".to_string()];
        header.extend((0..self.frequency.cols()).map(|i| format!("expert{i}")));
        w.write_record(&header)?;
        for (r, category) in self.categories.iter().enumerate() {
            let mut record = vec![category.clone()];
            record.extend(self.frequency.row(r).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let cols = r.headers()?.len().saturating_sub(1);
        let mut categories = Vec::new();
        let mut values = Vec::new();
        for record in r.records() {
            let record = record?;
            categories.push(record[0].to_string());
            for field in record.iter().skip(1) {
                values.push(field.parse::<f64>().map_err(|e| Error::InvalidInput(e.to_string()))?);
            }
        }
        Ok(Heatmap {
            frequency: Matrix::new(categories.len(), cols, values)?,
            categories,
        })
    }
}

/// Per-category routing statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub sharpness: Option<f64>,
    pub variance: Option<CategoryVariance>,
    pub sim_mean: Option<f64>,
}

/// Accumulates per-sample routing records into [`RoutingDiagnostics`].
#[derive(Default)]
pub struct DiagnosticsBuilder {
    gates: BTreeMap<String, Vec<Vector>>,
    sharpness: BTreeMap<String, Vec<f64>>,
    sims: BTreeMap<String, Vec<f64>>,
    decisions: Vec<(String, Vec<usize>)>,
}

impl DiagnosticsBuilder {
    pub fn record(&mut self, category: &str, gate: &Vector, topk: &[usize], sim: Option<f64>) -> Result<()> {
        match routing_sharpness(gate, topk) {
            Ok(s) => self.sharpness.entry(category.to_string()).or_default().push(s),
            Err(Error::UndefinedSharpness) => {}
            Err(e) => return Err(e),
        }
        self.gates.entry(category.to_string()).or_default().push(gate.clone());
        if let Some(s) = sim {
            self.sims.entry(category.to_string()).or_default().push(s);
        }
        self.decisions.push((category.to_string(), topk.to_vec()));
        Ok(())
    }

    pub fn finish(self, experts: usize) -> Result<RoutingDiagnostics> {
        let heatmap = selection_heatmap(&self.decisions, experts)?;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let mut per_category = BTreeMap::new();
        for (category, gates) in &self.gates {
            let variance = if gates.len() >= 2 {
                let single = BTreeMap::from([(category.clone(), gates.clone())]);
                routing_variance(&single)?.remove(category)
            } else {
                None
            };
            per_category.insert(
                category.clone(),
                CategoryStats {
                    count: gates.len(),
                    sharpness: self.sharpness.get(category).map(|s| mean(s)),
                    variance,
                    sim_mean: self.sims.get(category).map(|s| mean(s)),
                },
            );
        }
        let all_sharpness: Vec<f64> = self.sharpness.values().flatten().copied().collect();
        let all_sims: Vec<f64> = self.sims.values().flatten().copied().collect();
        let variances: Vec<f64> = per_category
            .values()
            .filter_map(|c| c.variance.map(|v| v.raw))
            .collect();
        Ok(RoutingDiagnostics {
            sim: (!all_sims.is_empty()).then(|| mean(&all_sims)),
            sharpness: (!all_sharpness.is_empty()).then(|| mean(&all_sharpness)),
            variance: (!variances.is_empty()).then(|| mean(&variances)),
            per_category,
            heatmap,
        })
    }
}

/// Routing diagnostics over one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDiagnostics {
    /// Mean Sim over samples that carry cues.
    pub sim: Option<f64>,
    /// Mean sharpness over samples; `None` when `K = E`.
    pub sharpness: Option<f64>,
    /// Mean raw routing variance over categories with at least 2 samples.
    pub variance: Option<f64>,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub heatmap: Heatmap,
}

impl RoutingDiagnostics {
    /// One row per category plus an `overall` row.
    pub fn write_csv(&self, run_id: &str, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "run_id",
            "category",
            "sharpness",
            "variance_raw",
            "variance_x10",
            "sim_mean",
        ])?;
        for (category, stats) in &self.per_category {
            w.write_record([
                run_id.to_string(),
                category.clone(),
                opt(stats.sharpness),
                opt(stats.variance.map(|v| v.raw)),
                opt(stats.variance.map(|v| v.scaled)),
                opt(stats.sim_mean),
            ])?;
        }
        w.write_record([
            run_id.to_string(),
            "overall".to_string(),
            opt(self.sharpness),
            opt(self.variance),
            opt(self.variance.map(|v| v * VARIANCE_REPORT_SCALE)),
            opt(self.sim),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
