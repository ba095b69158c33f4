//! Utterance-level ASR decoder signals and their min-max scaling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SIGNALS: usize = 4;

/// Per-word statistics of the 1-best hypothesis from a lattice decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub graph_costs: Vec<f64>,
    pub acoustic_costs: Vec<f64>,
    pub confidences: Vec<f64>,
    pub alternative_counts: Vec<u32>,
}

/// `[avg graph cost, avg acoustic cost, avg confidence, avg alternatives]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderSignals(pub [f64; N_SIGNALS]);

impl DecoderSignals {
    pub fn avg_graph_cost(&self) -> f64 {
        self.0[0]
    }
    pub fn avg_acoustic_cost(&self) -> f64 {
        self.0[1]
    }
    pub fn avg_confidence(&self) -> f64 {
        self.0[2]
    }
    pub fn avg_alternatives(&self) -> f64 {
        self.0[3]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Averages each per-word list of the lattice summary.
pub fn summarize(lattice: &LatticeSummary) -> Result<DecoderSignals> {
    let n = lattice.graph_costs.len();
    if n == 0 {
        return Err(Error::validation(
            "graph_costs",
            "1-best hypothesis has no words",
        ));
    }
    for (name, len) in [
        ("acoustic_costs", lattice.acoustic_costs.len()),
        ("confidences", lattice.confidences.len()),
        ("alternative_counts", lattice.alternative_counts.len()),
    ] {
        if len != n {
            return Err(Error::validation(
                name,
                format!("has {len} entries, graph_costs has {n}"),
            ));
        }
    }
    if let Some(c) = lattice.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::validation("confidences", format!("{c} outside [0, 1]")));
    }
    let alts: Vec<f64> = lattice.alternative_counts.iter().map(|&a| f64::from(a)).collect();
    Ok(DecoderSignals([
        mean(&lattice.graph_costs),
        mean(&lattice.acoustic_costs),
        mean(&lattice.confidences),
        mean(&alts),
    ]))
}

/// Reads one lattice summary JSON object per line.
pub fn read_lattice_summaries(path: &Path) -> Result<Vec<LatticeSummary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: [f64; N_SIGNALS],
    pub max: [f64; N_SIGNALS],
    pub fitted: bool,
}

impl Default for MinMaxScaler {
    fn default() -> Self {
        MinMaxScaler {
            min: [0.0; N_SIGNALS],
            max: [0.0; N_SIGNALS],
            fitted: false,
        }
    }
}

impl MinMaxScaler {
    pub fn fit(dataset: &[DecoderSignals]) -> Result<Self> {
        let Some(first) = dataset.first() else {
            return Err(Error::Data("cannot fit scaler on an empty dataset".into()));
        };
        let mut min = first.0;
        let mut max = first.0;
        for s in &dataset[1..] {
            for k in 0..N_SIGNALS {
                min[k] = min[k].min(s.0[k]);
                max[k] = max[k].max(s.0[k]);
            }
        }
        Ok(MinMaxScaler {
            min,
            max,
            fitted: true,
        })
    }

    /// Scales into `[0, 1]`; values outside the fitted range clamp and a
    /// constant dimension maps to 0.
    pub fn transform(&self, raw: &DecoderSignals) -> Result<DecoderSignals> {
        if !self.fitted {
            return Err(Error::Config("min-max scaler used before fitting".into()));
        }
        let mut out = [0.0; N_SIGNALS];
        for k in 0..N_SIGNALS {
            let span = self.max[k] - self.min[k];
            out[k] = if span > 0.0 {
                ((raw.0[k] - self.min[k]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Ok(DecoderSignals(out))
    }
}

pub fn fit_scaler(dataset: &[DecoderSignals]) -> Result<MinMaxScaler> {
    MinMaxScaler::fit(dataset)
}
