//! Average accuracy and average forgetting over a lower-triangular accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[k][j]`: accuracy on task `j`'s test set after training through task `k`
/// (both zero-based, `j <= k`). Rows are only ever appended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Append row `k`, which must hold exactly `k + 1` fractions in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let want = self.rows.len() + 1;
        if row.len() != want {
            return Err(Error::Contract(format!("row {} needs {want} entries, got {}", self.rows.len(), row.len())));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied()
    }

    fn nonempty(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Contract("accuracy matrix has no rows".into()));
        }
        Ok(())
    }

    /// `A_k` for every row.
    pub fn step_accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
    }

    /// `A`, the mean of the `A_k`.
    pub fn avg_accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let a = self.step_accuracies();
        Ok(a.iter().sum::<f64>() / a.len() as f64)
    }

    /// `F_k` for every row; the first row has no earlier tasks and gets 0.
    pub fn step_forgetting(&self) -> Vec<f64> {
        (0..self.rows.len())
            .map(|k| {
                if k == 0 {
                    return 0.0;
                }
                let total: f64 = (0..k)
                    .map(|j| {
                        (0..k)
                            .filter(|&l| l >= j)
                            .map(|l| self.rows[l][j] - self.rows[k][j])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum();
                total / k as f64
            })
            .collect()
    }

    /// `F`, the mean of `F_k` over rows 2..K; 0 for a single row.
    pub fn avg_forgetting(&self) -> Result<f64> {
        self.nonempty()?;
        let f = self.step_forgetting();
        if f.len() == 1 {
            return Ok(0.0);
        }
        Ok(f[1..].iter().sum::<f64>() / (f.len() - 1) as f64)
    }

    /// Parse rows of comma-separated values; row `k` must have `k + 1` entries.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("line {}: {v:?} is not a number", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        }
        Ok(m)
    }
}
