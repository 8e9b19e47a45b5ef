use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// Round half away from zero to two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Mean of the columns as printed (two decimals), itself printed to two.
pub fn overall(columns: &[f64]) -> f64 {
    if columns.is_empty() {
        return 0.0;
    }
    round2(columns.iter().map(|&c| round2(c)).sum::<f64>() / columns.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defender: String,
    pub attack: String,
    /// percent
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: ReportTable) {
        self.rows.extend(other.rows);
    }

    /// Defenders in first-appearance order.
    pub fn defenders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.defender.as_str()) {
                out.push(&r.defender);
            }
        }
        out
    }

    pub fn accuracy(&self, defender: &str, attack: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.defender == defender && r.attack == attack).map(|r| r.accuracy)
    }

    pub fn overall(&self, defender: &str) -> f64 {
        let cols: Vec<f64> = self.rows.iter().filter(|r| r.defender == defender).map(|r| r.accuracy).collect();
        overall(&cols)
    }

    /// Long format, one line per (defender, attack), then one Overall
    /// line per defender.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("defender,attack,accuracy,n_eval,seed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.2},{},{}", r.defender, r.attack, r.accuracy, r.n_eval, r.seed);
        }
        for d in self.defenders() {
            let n = self.rows.iter().filter(|r| r.defender == d).map(|r| r.n_eval).max().unwrap_or(0);
            let seed = self.rows.iter().find(|r| r.defender == d).map_or(0, |r| r.seed);
            let _ = writeln!(s, "{d},Overall,{:.2},{n},{seed}", self.overall(d));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let overall: Vec<_> = self
            .defenders()
            .into_iter()
            .map(|d| serde_json::json!({ "defender": d, "overall": self.overall(d) }))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "rows": self.rows, "overall": overall }))
            .expect("report serializes")
    }

    /// Parse the rows back from [`ReportTable::to_csv`], skipping Overall.
    pub fn from_csv(text: &str) -> Option<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return None;
            }
            if f[1] == "Overall" {
                continue;
            }
            rows.push(ReportRow {
                defender: f[0].into(),
                attack: f[1].into(),
                accuracy: f[2].parse().ok()?,
                n_eval: f[3].parse().ok()?,
                seed: f[4].parse().ok()?,
            });
        }
        Some(Self { rows })
    }
}
