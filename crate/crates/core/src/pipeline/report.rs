//! Final report: one row per system and direction.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    /// `s2t` or `t2s`.
    pub direction: String,
    pub bleu: f64,
    pub detail: String,
}

/// System names in table order.
pub const SYSTEMS: [&str; 8] = ["Baseline", "mRASP", "Iterative BT", "KD", "Fine-tuned", "Average", "Ensemble", "Final"];

fn order(system: &str) -> (usize, String) {
    let rank = SYSTEMS.iter().position(|s| system.starts_with(s)).unwrap_or(SYSTEMS.len());
    (rank, system.to_string())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub pair: (String, String),
    pub signature: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn bleu(&self, system: &str, direction: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.system == system && r.direction == direction).map(|r| r.bleu)
    }

    fn systems(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.system) {
                names.push(r.system.clone());
            }
        }
        names.sort_by_key(|n| order(n));
        names
    }

    fn label(&self, dir: &str) -> String {
        let (s, t) = (&self.pair.0, &self.pair.1);
        if dir == "s2t" {
            format!("{s}→{t}")
        } else {
            format!("{t}→{s}")
        }
    }

    /// Human-readable table, systems down and directions across.
    pub fn table(&self) -> String {
        let mut out = format!("experiment {}\n{}\n\n", self.experiment, self.signature);
        let width = self.systems().iter().map(|s| s.chars().count()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", "System", self.label("s2t"), self.label("t2s"));
        for sys in self.systems() {
            let cell = |d: &str| self.bleu(&sys, d).map_or("-".to_string(), |b| format!("{b:.2}"));
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", sys, cell("s2t"), cell("t2s"));
        }
        out
    }

    /// Tab-separated rows for machines.
    pub fn tsv(&self) -> String {
        let mut out = String::from("system\tdirection\tbleu\tdetail\n");
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| order(&a.system).cmp(&order(&b.system)).then(a.direction.cmp(&b.direction)));
        for r in rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.system, r.direction, r.bleu, r.detail);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_orders_systems() {
        let row = |s: &str, d: &str, b| ReportRow { system: s.into(), direction: d.into(), bleu: b, detail: String::new() };
        let r = Report {
            experiment: "x".into(),
            pair: ("fr".into(), "de".into()),
            signature: "sig".into(),
            rows: vec![row("KD", "s2t", 3.0), row("Baseline", "t2s", 1.5), row("Baseline", "s2t", 1.0), row("Iterative BT", "s2t", 2.0)],
        };
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[3].contains("fr→de"));
        assert!(lines[4].starts_with("Baseline") && lines[4].contains("1.50"));
        assert!(lines[5].starts_with("Iterative BT") && lines[5].trim_end().ends_with('-'));
        assert!(lines[6].starts_with("KD"));
        assert_eq!(r.tsv().lines().nth(1).unwrap(), "Baseline\ts2t\t1.000000\t");
    }
}
