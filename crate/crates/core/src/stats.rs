//! Per-title metric normalization and Student t-tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("values must be finite and non-negative")]
    NegativeValue,
    #[error("cannot normalize an all-zero row")]
    ZeroRow,
    #[error("{0}")]
    SampleSize(String),
    #[error("title {title} lacks condition {condition}")]
    MissingCondition { title: String, condition: String },
    #[error("metric table has no titles")]
    EmptyTable,
}

/// Divides each value by the row sum so the row sums to 1.
pub fn normalize_per_title(values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(StatsError::NegativeValue);
    }
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0) {
        return Err(StatsError::ZeroRow);
    }
    Ok(values.iter().map(|v| v / sum).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestVariant {
    Paired,
    /// Pooled-variance two-sample test.
    TwoSample,
}

impl TestVariant {
    pub fn label(self) -> &'static str {
        match self {
            TestVariant::Paired => "paired",
            TestVariant::TwoSample => "two-sample (pooled)",
        }
    }
}

/// Two-sided Student t-test result. When the variance the statistic divides
/// by is zero the test is `degenerate` and no statistic is reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub df: f64,
    pub variant: TestVariant,
    pub degenerate: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sum of squared deviations from the mean.
fn ssd(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum()
}

/// `a - b`; a positive statistic means `a` is larger.
pub fn t_test(a: &[f64], b: &[f64], variant: TestVariant) -> Result<TestResult, StatsError> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::SampleSize("samples must be finite".into()));
    }
    let (num, var_term, df) = match variant {
        TestVariant::Paired => {
            if a.len() != b.len() || a.len() < 2 {
                return Err(StatsError::SampleSize(format!(
                    "paired test needs equal sizes >= 2, got {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let n = d.len() as f64;
            let var = ssd(&d) / (n - 1.0);
            (mean(&d), var / n, n - 1.0)
        }
        TestVariant::TwoSample => {
            if a.len() < 2 || b.len() < 2 {
                return Err(StatsError::SampleSize(format!(
                    "two-sample test needs sizes >= 2, got {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let df = na + nb - 2.0;
            let pooled = (ssd(a) + ssd(b)) / df;
            (mean(a) - mean(b), pooled * (1.0 / na + 1.0 / nb), df)
        }
    };
    if !(var_term > 0.0) {
        return Ok(TestResult {
            t_statistic: None,
            p_value: None,
            df,
            variant,
            degenerate: true,
        });
    }
    let t = num / var_term.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TestResult {
        t_statistic: Some(t),
        p_value: Some(p),
        df,
        variant,
        degenerate: false,
    })
}

/// `title -> condition -> value` for one metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric_name: String,
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricTable {
    pub fn new(metric_name: impl Into<String>) -> Self {
        Self {
            metric_name: metric_name.into(),
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, title: &str, condition: &str, value: f64) {
        self.rows.entry(title.to_string()).or_default().insert(condition.to_string(), value);
    }

    /// Checks every title has every condition.
    pub fn validate(&self, conditions: &[&str]) -> Result<(), StatsError> {
        if self.rows.is_empty() {
            return Err(StatsError::EmptyTable);
        }
        for (title, row) in &self.rows {
            for c in conditions {
                if !row.contains_key(*c) {
                    return Err(StatsError::MissingCondition {
                        title: title.clone(),
                        condition: c.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Each title row restricted to `conditions` and normalized.
    pub fn normalized(&self, conditions: &[&str]) -> Result<MetricTable, StatsError> {
        self.validate(conditions)?;
        let mut out = MetricTable::new(format!("normalized {}", self.metric_name));
        for (title, row) in &self.rows {
            let values: Vec<f64> = conditions.iter().map(|c| row[*c]).collect();
            for (c, v) in conditions.iter().zip(normalize_per_title(&values)?) {
                out.insert(title, c, v);
            }
        }
        Ok(out)
    }

    /// Values of `condition` in title order.
    pub fn column(&self, condition: &str) -> Result<Vec<f64>, StatsError> {
        self.validate(&[condition])?;
        Ok(self.rows.values().map(|r| r[condition]).collect())
    }
}

/// One line per variant: metric, comparison, t, df and p.
pub fn significance_lines(table: &MetricTable, a: &str, b: &str) -> Result<Vec<String>, StatsError> {
    let (xa, xb) = (table.column(a)?, table.column(b)?);
    let mut out = Vec::new();
    for variant in [TestVariant::Paired, TestVariant::TwoSample] {
        let r = t_test(&xa, &xb, variant)?;
        let stat = match (r.t_statistic, r.p_value) {
            (Some(t), Some(p)) => format!("t = {t:.4}  df = {:.0}  p = {p:.4}", r.df),
            _ => format!("degenerate (zero variance)  df = {:.0}", r.df),
        };
        out.push(format!("{:<22} {a} vs {b:<16} {:<20} {stat}", table.metric_name, variant.label()));
    }
    Ok(out)
}
