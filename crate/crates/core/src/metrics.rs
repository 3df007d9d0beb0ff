//! The stage-by-task accuracy matrix and the continual-learning metrics
//! derived from it.
//!
//! Row `i` holds the accuracy (in percent) on every task seen through stage
//! `i`, evaluated on that task's held-out test set, so the matrix fills up
//! lower-triangularly as stages complete. `last` is the unweighted mean of
//! the final row; `avg` averages the per-row means across stages; the
//! forgetting drop of a task is its running maximum minus its final value.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsMatrix {
    task_ids: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Default for ResultsMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ResultsMatrix {
    pub fn new() -> Self {
        Self { task_ids: Vec::new(), rows: Vec::new() }
    }

    /// Builds a matrix from pre-computed rows; row `i` must cover a prefix of
    /// `task_ids` no shorter than row `i - 1`.
    pub fn from_rows(task_ids: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut matrix = Self::new();
        for row in rows {
            let seen = &task_ids[..row.len().min(task_ids.len())];
            matrix.push_stage(seen, &row)?;
        }
        if matrix.task_ids != task_ids {
            return Err(Error::ShapeMismatch(
                "rows never cover the full task list".into(),
            ));
        }
        Ok(matrix)
    }

    /// Appends one completed stage: the tasks seen so far (first-seen order)
    /// and their accuracies in percent.
    pub fn push_stage(&mut self, seen_tasks: &[usize], accuracies: &[f64]) -> Result<()> {
        if seen_tasks.len() != accuracies.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tasks but {} accuracies",
                seen_tasks.len(),
                accuracies.len()
            )));
        }
        if seen_tasks.is_empty() {
            return Err(Error::DegenerateInput("a stage must evaluate at least one task".into()));
        }
        if seen_tasks.len() < self.task_ids.len()
            || seen_tasks[..self.task_ids.len()] != self.task_ids[..]
        {
            return Err(Error::ShapeMismatch(
                "seen tasks must extend the previous stage's task list".into(),
            ));
        }
        if let Some(bad) = accuracies.iter().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(Error::InvalidConfig(format!(
                "accuracy {bad} outside [0, 100]"
            )));
        }
        self.task_ids = seen_tasks.to_vec();
        self.rows.push(accuracies.to_vec());
        Ok(())
    }

    pub fn task_ids(&self) -> &[usize] {
        &self.task_ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    /// Unweighted mean of the final row.
    pub fn last(&self) -> Result<f64> {
        let row = self
            .rows
            .last()
            .ok_or_else(|| Error::DegenerateInput("metrics of an empty matrix".into()))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean over stages of each stage's row mean.
    pub fn avg(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::DegenerateInput("metrics of an empty matrix".into()));
        }
        let total: f64 = self
            .rows
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .sum();
        Ok(total / self.rows.len() as f64)
    }

    /// Per-task forgetting: the maximum accuracy a task ever reached minus
    /// its final accuracy. Needs at least two stages.
    pub fn forgetting(&self) -> Result<BTreeMap<usize, f64>> {
        if self.rows.len() < 2 {
            return Err(Error::DegenerateInput(
                "forgetting needs at least two stages".into(),
            ));
        }
        let final_row = &self.rows[self.rows.len() - 1];
        let mut drops = BTreeMap::new();
        for (col, &task) in self.task_ids.iter().enumerate() {
            let peak = self
                .rows
                .iter()
                .filter_map(|row| row.get(col))
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            drops.insert(task, peak - final_row[col]);
        }
        Ok(drops)
    }

    /// CSV rendering: `stage` column plus one column per task id; cells a
    /// stage has not reached yet stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for task in &self.task_ids {
            out.push_str(&format!(",task_{task}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for col in 0..self.task_ids.len() {
                out.push(',');
                if let Some(value) = row.get(col) {
                    out.push_str(&value.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}
