use serde::{Deserialize, Serialize};

use crate::meta::SeedScore;

pub const CSV_HEADER: &str = "method,seed_count,mean_query_mse,sd_query_mse,examples_consumed";

/// Held-out post-adaptation loss of one method over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<u64>,
    /// Raw per-task values for every seed.
    pub per_seed: Vec<SeedScore>,
    /// Mean over seeds of each seed's mean over tasks.
    pub mean_query_mse: f64,
    /// Sample standard deviation of the per-seed means (0 for one seed).
    pub sd_query_mse: f64,
    pub examples_consumed: u64,
}

impl EvalReport {
    pub fn from_scores(method: impl Into<String>, per_seed: Vec<SeedScore>, examples_consumed: u64) -> Self {
        let means: Vec<f64> = per_seed.iter().map(|s| s.score.mean).collect();
        let (mean, sd) = mean_sd(&means);
        Self {
            method: method.into(),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
            mean_query_mse: mean,
            sd_query_mse: sd,
            examples_consumed,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: held-out query loss {:.6} +- {:.6} over {} seed(s)",
            self.method,
            self.mean_query_mse,
            self.sd_query_mse,
            self.seeds.len()
        )
    }
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub report: EvalReport,
    /// False for rows that did not train (their ledger is exempt from parity).
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub budget_parity: bool,
}

impl CompareReport {
    fn best(&self) -> Option<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.report.mean_query_mse.is_finite())
            .min_by(|a, b| a.1.report.mean_query_mse.total_cmp(&b.1.report.mean_query_mse))
            .map(|(i, _)| i)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let e = &r.report;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.method,
                e.seeds.len(),
                e.mean_query_mse,
                e.sd_query_mse,
                e.examples_consumed
            ));
        }
        out
    }

    /// Method-by-metric table; `*` marks the lowest mean query loss.
    pub fn to_table(&self) -> String {
        let best = self.best();
        let reference = self
            .rows
            .iter()
            .find(|r| r.trained)
            .map(|r| r.report.examples_consumed);
        let width = self.rows.iter().map(|r| r.report.method.len()).max().unwrap_or(6).max(6) + 2;
        let mut out = format!(
            "{:<width$} {:>5}  {:>25}  {:>9}  {}\n",
            "method", "seeds", "query loss (mean +- sd)", "examples", "budget"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let e = &r.report;
            let name = if Some(i) == best {
                format!("{} *", e.method)
            } else {
                e.method.clone()
            };
            let budget = match (r.trained, reference) {
                (false, _) => "n/a",
                (true, Some(b)) if b == e.examples_consumed => "ok",
                _ => "MISMATCH",
            };
            out.push_str(&format!(
                "{:<width$} {:>5}  {:>25}  {:>9}  {}\n",
                name,
                e.seeds.len(),
                format!("{:.6} +- {:.6}", e.mean_query_mse, e.sd_query_mse),
                e.examples_consumed,
                budget
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::HeldOutScore;

    fn score(seed: u64, vals: &[f64]) -> SeedScore {
        SeedScore {
            seed,
            score: HeldOutScore {
                task_ids: (0..vals.len() as u64).collect(),
                per_task: vals.to_vec(),
                zero_shot: vals.to_vec(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                zero_shot_mean: 0.0,
            },
        }
    }

    #[test]
    fn statistics_are_recomputable() {
        let r = EvalReport::from_scores("meta", vec![score(0, &[1.0, 3.0]), score(1, &[4.0, 4.0])], 10);
        assert_eq!(r.mean_query_mse, 3.0);
        assert!((r.sd_query_mse - 2f64.sqrt()).abs() < 1e-15);
        let single = EvalReport::from_scores("x", vec![score(0, &[1.0])], 0);
        assert_eq!(single.sd_query_mse, 0.0);
    }

    #[test]
    fn csv_and_table_layout() {
        let rows = vec![
            CompareRow {
                report: EvalReport::from_scores("meta", vec![score(0, &[1.0])], 32),
                trained: true,
            },
            CompareRow {
                report: EvalReport::from_scores("random-init", vec![score(0, &[2.0])], 0),
                trained: false,
            },
        ];
        let rep = CompareReport {
            rows,
            budget_parity: true,
        };
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "meta,1,1,0,32");
        let table = rep.to_table();
        assert!(table.contains("meta *"));
        assert!(table.contains("n/a"));
    }
}
