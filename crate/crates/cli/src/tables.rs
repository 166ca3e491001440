//! Result tables rendered as aligned text and as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use endd::eval::RankingMetric;
use endd::uncertainty::{Aggregate, Measure};

use crate::pipeline::{CorpusRow, Metrics, System, TestSet, AUC_RANKINGS, REJECTION_RANKINGS};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, header: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out += &line(&self.header);
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out += &"-".repeat(total);
        out.push('\n');
        for r in &self.rows {
            out += &line(r);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}",
            self.header
                .iter()
                .map(|h| esc(h))
                .collect::<Vec<_>>()
                .join(",")
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}",
                r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(",")
            );
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (ext, body) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn corpus_table(rows: &[CorpusRow]) -> Table {
    let mut t = Table::new("Corpora", &["corpus", "sentences", "mean_length", "domain"]);
    for r in rows {
        t.push(vec![
            r.name.to_string(),
            r.stats.sentences.to_string(),
            format!("{:.2}", r.stats.mean_length),
            r.domain.to_string(),
        ]);
    }
    t
}

fn find(metrics: &[Metrics], system: System, testset: TestSet) -> Option<&Metrics> {
    metrics
        .iter()
        .find(|m| m.system == system && m.testset == testset)
}

fn testsets(metrics: &[Metrics]) -> Vec<TestSet> {
    TestSet::ALL
        .into_iter()
        .filter(|t| metrics.iter().any(|m| m.testset == *t))
        .collect()
}

fn systems(metrics: &[Metrics], pred: impl Fn(System) -> bool) -> Vec<System> {
    System::ALL
        .into_iter()
        .filter(|s| pred(*s) && metrics.iter().any(|m| m.system == *s))
        .collect()
}

/// GLEU (×100) per test set and system; `ind` shows member mean ± sd.
pub fn gleu_table(metrics: &[Metrics]) -> Table {
    let sys = systems(metrics, |_| true);
    let mut header = vec!["testset"];
    header.extend(sys.iter().map(|s| s.name()));
    let mut t = Table::new("GLEU (x100)", &header);
    for ts in testsets(metrics) {
        let mut row = vec![ts.name().to_string()];
        for s in &sys {
            row.push(match find(metrics, *s, ts) {
                Some(m) => match m.gleu_sd {
                    Some(sd) => format!("{} ± {}", pct(m.gleu), pct(sd)),
                    None => pct(m.gleu),
                },
                None => "-".into(),
            });
        }
        t.push(row);
    }
    t
}

/// Mean sequence uncertainties, as sums and per-token rates.
pub fn uncertainty_table(metrics: &[Metrics]) -> Table {
    let mut t = Table::new(
        "Uncertainty (mean over sentences)",
        &[
            "system", "testset", "tu_sum", "du_sum", "ku_sum", "tu_rate", "du_rate", "ku_rate",
        ],
    );
    for s in systems(metrics, System::has_uncertainty) {
        for ts in testsets(metrics) {
            if let Some(u) = find(metrics, s, ts).and_then(|m| m.uncertainty) {
                let mut row = vec![s.name().to_string(), ts.name().to_string()];
                for agg in [Aggregate::Sum, Aggregate::Rate] {
                    for meas in [Measure::Total, Measure::Data, Measure::Knowledge] {
                        row.push(format!("{:.4}", u.get(meas, agg)));
                    }
                }
                t.push(row);
            }
        }
    }
    t
}

/// Relative area under the rejection curve (×100) per ranking.
pub fn auc_rr_table(metrics: &[Metrics]) -> Table {
    let mut header = vec!["system", "testset"];
    header.extend(AUC_RANKINGS.iter().map(|m| m.name()));
    let mut t = Table::new("AUC_RR (x100)", &header);
    for s in systems(metrics, System::has_uncertainty) {
        for ts in testsets(metrics) {
            if let Some(m) = find(metrics, s, ts) {
                let mut row = vec![s.name().to_string(), ts.name().to_string()];
                row.extend(
                    AUC_RANKINGS
                        .iter()
                        .map(|r| m.auc_rr_of(*r).map(pct).unwrap_or_else(|| "-".into())),
                );
                t.push(row);
            }
        }
    }
    t
}

/// GLEU (×100) after rejecting the configured fraction.
pub fn rejection_table(metrics: &[Metrics]) -> Table {
    let fraction = metrics
        .iter()
        .find_map(|m| m.rejection.as_ref().map(|r| r.fraction))
        .unwrap_or(0.1);
    let mut header = vec!["system", "testset", "none"];
    header.extend(REJECTION_RANKINGS.iter().map(|m| m.name()));
    header.push(RankingMetric::Manual.name());
    let title = format!("GLEU (x100) at {:.0}% rejection", 100.0 * fraction);
    let mut t = Table::new(&title, &header);
    for s in systems(metrics, System::has_uncertainty) {
        for ts in testsets(metrics) {
            if let Some(r) = find(metrics, s, ts).and_then(|m| m.rejection.as_ref()) {
                let mut row = vec![s.name().to_string(), ts.name().to_string(), pct(r.none)];
                row.extend(
                    REJECTION_RANKINGS
                        .iter()
                        .map(|m| r.of(*m).map(pct).unwrap_or_else(|| "-".into())),
                );
                row.push(pct(r.manual));
                t.push(row);
            }
        }
    }
    t
}
