//! Shared training-loop plumbing: loss curves, schedules, finiteness guards.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, MesaError, Result};

/// Per-step loss log with named columns after `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossCurve {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", self.columns.join(","));
        for (step, vals) in &self.rows {
            let _ = write!(out, "{step}");
            for v in vals {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, self.to_csv()).at(path)
    }
}

/// Step count, learning rate, and minibatch size shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    2
}

impl Schedule {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MesaError::Config(format!("{stage}: lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(MesaError::Config(format!("{stage}: batch_size must be at least 1")));
        }
        Ok(())
    }
}

/// Polynomial decay from `max_lr` at step 0 to `min_lr` at the final step.
pub fn poly_lr(step: usize, total: usize, max_lr: f64, min_lr: f64, power: f64) -> f64 {
    if total <= 1 {
        return max_lr;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    min_lr + (max_lr - min_lr) * (1.0 - frac).powf(power)
}

pub fn ensure_finite(stage: &str, step: usize, terms: &[(&str, f64)]) -> Result<()> {
    if terms.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail = terms.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    Err(MesaError::NonFiniteLoss { stage: stage.to_string(), step, detail })
}

/// Deterministic minibatch indices for `step`, cycling a seeded permutation.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let per_epoch = n.div_ceil(batch.min(n)).max(1);
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) * batch.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    perm.shuffle(&mut rng);
    (0..batch.min(n)).map(|i| perm[(offset + i) % n]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints_and_monotone() {
        let lrs: Vec<f64> = (0..50).map(|s| poly_lr(s, 50, 1e-3, 1e-5, 0.9)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert!((lrs[49] - 1e-5).abs() < 1e-18);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut c = LossCurve::new(&["loss"]);
        c.push(0, vec![0.5]);
        c.push(1, vec![0.25]);
        let text = c.to_csv();
        assert!(text.starts_with("step,loss\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, s, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 2, 7, 3), batch_indices(10, 2, 7, 3));
    }

    #[test]
    fn non_finite_is_reported() {
        assert!(ensure_finite("mp", 3, &[("loss", 1.0)]).is_ok());
        let e = ensure_finite("mp", 3, &[("loss", f64::NAN)]).unwrap_err();
        assert!(e.to_string().contains("step 3"));
    }
}
