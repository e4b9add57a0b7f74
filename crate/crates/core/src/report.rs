//! Run metrics files and the cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::{LossBreakdown, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::io::read_json;
use crate::scene::Domain;
use crate::transfer::Variant;

pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_SCHEMA: &str = "zsda-metrics";
pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SourceOnly,
    Zodi,
    ZodiNoSim,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SourceOnly => "source_only",
            TrainMode::Zodi => "zodi",
            TrainMode::ZodiNoSim => "zodi_no_sim",
        }
    }

    pub fn lambda(self, configured: f64) -> f64 {
        match self {
            TrainMode::Zodi => configured,
            TrainMode::SourceOnly | TrainMode::ZodiNoSim => 0.0,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(TrainMode::SourceOnly),
            "zodi" => Ok(TrainMode::Zodi),
            "zodi_no_sim" => Ok(TrainMode::ZodiNoSim),
            _ => Err(invalid!(
                "unknown mode {s:?} (expected source_only, zodi or zodi_no_sim)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainScore {
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl DomainScore {
    pub fn from_values(values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            mean,
            std,
            per_seed: values,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One trained segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    /// Target domain the training pairs were transferred to; `None` for
    /// source-only models, which are evaluated on every target.
    pub adapted_to: Option<Domain>,
    pub seed: u64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub history: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub schema: String,
    pub version: u32,
    /// Column label in reports.
    pub run: String,
    pub mode: TrainMode,
    /// Transfer variant of the training pairs; `None` for source-only.
    pub variant: Option<Variant>,
    pub lambda: f64,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub source_domain: Domain,
    pub config: TrainConfig,
    /// Images read during adaptation, by domain.
    pub reads: BTreeMap<Domain, u64>,
    pub domains: BTreeMap<Domain, DomainScore>,
    pub models: Vec<ModelRecord>,
}

impl RunMetrics {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("metrics {}: {m}", self.run)));
        if self.schema != METRICS_SCHEMA || self.version != METRICS_VERSION {
            return bad(format!("unsupported schema {} v{}", self.schema, self.version));
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.domains.is_empty() {
            return bad("no evaluated domains".into());
        }
        if self.lambda != self.mode.lambda(self.lambda) {
            return bad(format!("mode {} requires lambda 0", self.mode));
        }
        for (d, s) in &self.domains {
            if s.per_seed.len() != self.seeds.len() {
                return bad(format!("{d}: {} scores for {} seeds", s.per_seed.len(), self.seeds.len()));
            }
            if s.per_seed.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("{d}: mIoU outside [0, 1]"));
            }
            let (mean, std) = mean_std(&s.per_seed);
            if (mean - s.mean).abs() > 1e-12 || (std - s.std).abs() > 1e-12 {
                return bad(format!("{d}: mean/std disagree with per-seed scores"));
            }
        }
        if self.reads.iter().any(|(d, &n)| *d != self.source_domain && n > 0) {
            return bad("adaptation read non-source images".into());
        }
        for m in &self.models {
            if m.history.len() != self.config.epochs {
                return bad(format!("model seed {}: {} history entries", m.seed, m.history.len()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(METRICS_FILE)
        } else {
            path.to_path_buf()
        };
        if !path.exists() {
            return Err(Error::Missing {
                what: "metrics file",
                path,
            });
        }
        let m: RunMetrics = read_json(&path)?;
        m.validate()?;
        Ok(m)
    }
}

fn fmt_delta(d: f64) -> String {
    // Avoid printing "-0.0000".
    let d = if d.abs() < 5e-5 { 0.0 } else { d };
    format!("{d:+.4}")
}

/// Domain × run table of mean mIoU. Runs after a source-only run also show
/// their difference from it.
pub fn render_report(runs: &[RunMetrics]) -> Result<String> {
    let first = runs.first().ok_or_else(|| invalid!("report needs at least one run"))?;
    let domains: Vec<Domain> = first.domains.keys().copied().collect();
    for r in &runs[1..] {
        let ds: Vec<Domain> = r.domains.keys().copied().collect();
        if ds != domains {
            let names = |v: &[Domain]| v.iter().map(|d| d.name()).collect::<Vec<_>>().join(",");
            return Err(invalid!(
                "inconsistent domains: run {} has [{}], run {} has [{}]",
                first.run,
                names(&domains),
                r.run,
                names(&ds)
            ));
        }
    }
    let baseline = runs.iter().find(|r| r.mode == TrainMode::SourceOnly);
    let mean_of = |r: &RunMetrics| r.domains.values().map(|s| s.mean).sum::<f64>() / domains.len() as f64;

    let header: Vec<String> = std::iter::once("domain".to_owned())
        .chain(runs.iter().map(|r| r.run.clone()))
        .collect();
    let mut rows = vec![header];
    let cell = |r: &RunMetrics, v: f64, base: Option<f64>| match base {
        Some(b) if !std::ptr::eq(r, baseline.unwrap()) => format!("{v:.4} ({})", fmt_delta(v - b)),
        _ => format!("{v:.4}"),
    };
    for d in &domains {
        let mut row = vec![d.name().to_owned()];
        for r in runs {
            let base = baseline.map(|b| b.domains[d].mean);
            row.push(cell(r, r.domains[d].mean, base));
        }
        rows.push(row);
    }
    let mut row = vec!["mean".to_owned()];
    for r in runs {
        row.push(cell(r, mean_of(r), baseline.map(mean_of)));
    }
    rows.push(row);

    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths
                .iter()
                .enumerate()
                .map(|(c, &w)| if c == 0 { "-".repeat(w) } else { format!("{}:", "-".repeat(w - 1)) })
                .collect();
            let _ = writeln!(out, "| {} |", rule.join(" | "));
        }
    }
    Ok(out)
}
