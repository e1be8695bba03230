//! Rebuilds the comparison table from metrics CSVs alone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::experiment::{write_comparison, ComparisonRow, MeanStd};

/// Fields encoded in a metrics file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsName {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub hash: String,
}

/// Parses `metrics_{scenario}_{mode}_s{seed}_{hash}.csv`.
pub fn parse_metrics_name(name: &str) -> Option<MetricsName> {
    let stem = name.strip_prefix("metrics_")?.strip_suffix(".csv")?;
    let parts: Vec<&str> = stem.split('_').collect();
    let [scenario, mode, seed, hash] = parts[..] else {
        return None;
    };
    Some(MetricsName {
        scenario: scenario.to_string(),
        mode: mode.to_string(),
        seed: seed.strip_prefix('s')?.parse().ok()?,
        hash: hash.to_string(),
    })
}

/// Mean of the accuracy column, averaged per timestep first so that runs
/// with participant-only evaluation weigh every timestep equally.
fn mean_accuracy(path: &Path) -> CliResult<f64> {
    let csv_err = |source| CliError::Csv { context: path.display().to_string(), source };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Report(format!("{}: missing column `{name}`", path.display())))
    };
    let (t_col, acc_col) = (col("t")?, col("accuracy")?);
    let mut per_t: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let bad = || CliError::Report(format!("{}: malformed row {:?}", path.display(), row.position()));
        let t: usize = row.get(t_col).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let acc: f64 = row.get(acc_col).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let e = per_t.entry(t).or_default();
        e.0 += acc;
        e.1 += 1;
    }
    if per_t.is_empty() {
        return Err(CliError::Report(format!("{}: no rows", path.display())));
    }
    Ok(per_t.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_t.len() as f64)
}

/// Scans `dir` for metrics files and writes `comparison.csv` there.
pub fn report(dir: &Path) -> CliResult<Vec<ComparisonRow>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut groups: BTreeMap<(String, String, String), Vec<(u64, f64)>> = BTreeMap::new();
    let mut names: Vec<_> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<CliResult<_>>()?;
    names.sort();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(parse_metrics_name) else {
            continue;
        };
        let acc = mean_accuracy(&path)?;
        groups.entry((name.hash, name.scenario, name.mode)).or_default().push((name.seed, acc));
    }
    if groups.is_empty() {
        return Err(CliError::Report(format!("no metrics files in {}", dir.display())));
    }
    let rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|((_, scenario, mode), runs)| {
            let stat = MeanStd::of(&runs.iter().map(|(_, a)| *a).collect::<Vec<_>>());
            ComparisonRow {
                scenario,
                mode: mode.replacen('-', ":", 1),
                seeds: runs.len(),
                mean_accuracy: stat.mean,
                std_accuracy: stat.std,
            }
        })
        .collect();
    write_comparison(&dir.join("comparison.csv"), &rows)?;
    Ok(rows)
}
