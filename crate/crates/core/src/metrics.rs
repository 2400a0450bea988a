//! Confusion matrices, accuracy, macro-F1 and Cohen's kappa.
//!
//! Entry `[i][j]` counts samples of true class `i` predicted as `j`. Any
//! precision or recall with a zero denominator counts as 0.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", &[k, r.len()], &[k, k]));
        }
        Ok(Self {
            classes: k,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("predictions", &[predicted.len()], &[truth.len()]));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for c in [truth, predicted] {
            if c >= self.classes {
                return Err(Error::ClassIndex {
                    index: c,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Actual instances of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    /// Predicted instances of class `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Undefined("metrics of an empty confusion matrix")),
            n => Ok(n as f64),
        }
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|j| self.get(i, j).to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty()?)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let sum: f64 = (0..cm.classes())
        .map(|c| {
            let p = ratio(cm.get(c, c), cm.col_sum(c));
            let r = ratio(cm.get(c, c), cm.row_sum(c));
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    Ok(sum / cm.classes() as f64)
}

/// `(p_o − p_e)/(1 − p_e)`; undefined when `p_e = 1`.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let p_o = cm.trace() as f64 / n;
    // integer numerator keeps p_e = 1 detection exact
    let expected: u128 = (0..cm.classes())
        .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
        .sum();
    let total = cm.total() as u128;
    if expected == total * total {
        return Err(Error::Undefined("kappa with expected agreement 1"));
    }
    let p_e = expected as f64 / (n * n);
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// The three reported metrics; `kappa` is `None` where it is undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: Option<f64>,
    pub samples: u64,
}

impl MetricsRecord {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_f1: macro_f1(cm)?,
            kappa: cohens_kappa(cm).ok(),
            samples: cm.total(),
        })
    }

    /// `key=value` lines.
    pub fn report(&self) -> String {
        let kappa = self.kappa.map_or("undefined".to_string(), |k| format!("{k}"));
        format!(
            "samples={}\naccuracy={}\nmacro_f1={}\nkappa={}\n",
            self.samples, self.accuracy, self.macro_f1, kappa
        )
    }

    pub const CSV_HEADER: &'static str = "samples,accuracy,macro_f1,kappa";

    pub fn csv_row(&self) -> String {
        let kappa = self.kappa.map_or(String::new(), |k| format!("{k}"));
        format!("{},{},{},{}", self.samples, self.accuracy, self.macro_f1, kappa)
    }
}
