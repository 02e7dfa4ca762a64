//! Side-by-side comparison of two finished runs.

use super::experiment::{io_err, read_summary, RunError, RunSummary};
use crate::diagnostics::{compare_to_truth, DistanceReport, Truth};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub method: String,
    pub seed: u64,
    pub distance: Option<DistanceReport>,
    /// Minimum over dimensions of the ESS at each shared checkpoint.
    pub ess_curve: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target: String,
    pub truth: Option<Truth>,
    pub a: RunEntry,
    pub b: RunEntry,
    /// Smaller sum of squared moment errors; `None` on a tie or without truth.
    pub distance_winner: Option<Winner>,
    /// Larger minimum ESS at the last shared checkpoint.
    pub ess_winner: Option<Winner>,
}

fn pick(a: Option<f64>, b: Option<f64>, smaller_wins: bool) -> Option<Winner> {
    let (a, b) = (a?, b?);
    if a == b {
        None
    } else if (a < b) == smaller_wins {
        Some(Winner::A)
    } else {
        Some(Winner::B)
    }
}

pub fn compare_summaries(
    a: &RunSummary,
    dir_a: &Path,
    b: &RunSummary,
    dir_b: &Path,
    truth: Option<Truth>,
) -> Result<Comparison, RunError> {
    if a.target != b.target || a.dim != b.dim {
        return Err(RunError::Setup(format!(
            "runs target different models: {} (d={}) vs {} (d={})",
            a.target, a.dim, b.target, b.dim
        )));
    }
    let truth = truth.or_else(|| a.truth.clone());
    let distance = |s: &RunSummary| -> Result<Option<DistanceReport>, RunError> {
        match &truth {
            Some(t) => compare_to_truth(&s.q_moments.mean, &s.q_moments.std, t)
                .map(Some)
                .map_err(|e| RunError::Setup(e.to_string())),
            None => Ok(None),
        }
    };
    let shared: Vec<usize> = a
        .cumulative_ess
        .iter()
        .map(|p| p.n)
        .filter(|n| b.cumulative_ess.iter().any(|q| q.n == *n))
        .collect();
    let curve = |s: &RunSummary| -> Vec<(usize, Option<f64>)> {
        shared
            .iter()
            .map(|n| (*n, s.cumulative_ess.iter().find(|p| p.n == *n).and_then(|p| p.min)))
            .collect()
    };
    let entry = |s: &RunSummary, dir: &Path| -> Result<RunEntry, RunError> {
        Ok(RunEntry {
            dir: dir.to_path_buf(),
            method: s.method.to_string(),
            seed: s.seed,
            distance: distance(s)?,
            ess_curve: curve(s),
        })
    };
    let ea = entry(a, dir_a)?;
    let eb = entry(b, dir_b)?;
    let distance_winner = pick(
        ea.distance.as_ref().map(|d| d.sum_sq),
        eb.distance.as_ref().map(|d| d.sum_sq),
        true,
    );
    let last = |e: &RunEntry| e.ess_curve.last().and_then(|p| p.1);
    let ess_winner = pick(last(&ea), last(&eb), false);
    Ok(Comparison {
        target: a.target.clone(),
        truth,
        a: ea,
        b: eb,
        distance_winner,
        ess_winner,
    })
}

/// Reads both summaries, writes `compare.json` into `out_dir`, and returns the report.
pub fn compare_runs(dir_a: &Path, dir_b: &Path, truth: Option<&Path>, out_dir: &Path) -> Result<Comparison, RunError> {
    let a = read_summary(dir_a)?;
    let b = read_summary(dir_b)?;
    let truth = match truth {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?;
            Some(serde_json::from_str::<Truth>(&text)?)
        }
        None => None,
    };
    let report = compare_summaries(&a, dir_a, &b, dir_b, truth)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    let path = out_dir.join("compare.json");
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(&path, text).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(report)
}

/// Plain-text rendering for stdout.
pub fn render(c: &Comparison) -> String {
    let mut out = format!("target: {}\n", c.target);
    for (label, e) in [("A", &c.a), ("B", &c.b)] {
        let dist = e
            .distance
            .as_ref()
            .map_or("n/a".to_string(), |d| format!("{:.6}", d.sum_sq));
        let ess = e
            .ess_curve
            .last()
            .and_then(|p| p.1)
            .map_or("n/a".to_string(), |v| format!("{v:.1}"));
        out += &format!(
            "{label}: {} (method {}, seed {})  sum_sq_err {dist}  final_min_ess {ess}\n",
            e.dir.display(),
            e.method,
            e.seed
        );
    }
    let name = |w: Option<Winner>| match w {
        Some(Winner::A) => "A",
        Some(Winner::B) => "B",
        None => "tie",
    };
    out += &format!(
        "closer to truth: {}\nhigher ESS: {}\n",
        name(c.distance_winner),
        name(c.ess_winner)
    );
    out
}
