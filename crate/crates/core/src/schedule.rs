//! Per-timestep token-budget schedules.
//!
//! Budgets live on the tenths grid {0.0, 0.1, ..., 1.0} and are stored as
//! integers 0..=10 so grid membership is exact.  Index 0 is the first
//! executed denoising timestep (t = T); it is always run at full budget,
//! so budget sums cover indices 1..T only.

use serde::{Deserialize, Serialize};

use crate::error::{AstraeaError, Result};

pub const GRID_STEPS: u8 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    tenths: Vec<u8>,
}

impl Schedule {
    pub fn new(tenths: Vec<u8>) -> Result<Self> {
        if tenths.is_empty() {
            return Err(AstraeaError::config("schedule cannot be empty"));
        }
        if let Some(&bad) = tenths.iter().find(|&&v| v > GRID_STEPS) {
            return Err(AstraeaError::config(format!(
                "schedule entry {bad}/10 outside grid 0..=10"
            )));
        }
        Ok(Schedule { tenths })
    }

    /// All timesteps at the same grid fraction.
    pub fn uniform(len: usize, tenths: u8) -> Result<Self> {
        Schedule::new(vec![tenths; len])
    }

    pub fn len(&self) -> usize {
        self.tenths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tenths.is_empty()
    }

    pub fn tenths(&self) -> &[u8] {
        &self.tenths
    }

    pub fn tenths_mut(&mut self) -> &mut [u8] {
        &mut self.tenths
    }

    /// Budget fraction at step index (0 = first executed timestep).
    pub fn theta(&self, step: usize) -> f64 {
        self.tenths[step] as f64 / GRID_STEPS as f64
    }

    /// Sum of fractions over the searchable steps (index 0 excluded:
    /// the first timestep is forced full and outside the budget).
    pub fn searchable_sum(&self) -> f64 {
        self.tenths[1..].iter().map(|&v| v as f64 / 10.0).sum()
    }

    /// Schedule file text: `T=<len>` then one `t=<i> theta=<n>/10` per step.
    pub fn render(&self) -> String {
        let mut s = format!("T={}\n", self.tenths.len());
        for (i, &v) in self.tenths.iter().enumerate() {
            s.push_str(&format!("t={i} theta={v}/10\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| AstraeaError::parse("empty schedule file"))?;
        let t: usize = header
            .strip_prefix("T=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| AstraeaError::parse(format!("bad schedule header: {header:?}")))?;
        let mut tenths = vec![0u8; t];
        let mut seen = vec![false; t];
        for line in lines {
            let line = line.trim();
            let (tpart, thpart) = line
                .split_once(' ')
                .ok_or_else(|| AstraeaError::parse(format!("bad schedule line: {line:?}")))?;
            let idx: usize = tpart
                .strip_prefix("t=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AstraeaError::parse(format!("bad step index: {line:?}")))?;
            let val: u8 = thpart
                .strip_prefix("theta=")
                .and_then(|v| v.strip_suffix("/10"))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AstraeaError::parse(format!("bad theta value: {line:?}")))?;
            if idx >= t {
                return Err(AstraeaError::parse(format!(
                    "step index {idx} outside T={t}"
                )));
            }
            if seen[idx] {
                return Err(AstraeaError::parse(format!("duplicate step index {idx}")));
            }
            if val > GRID_STEPS {
                return Err(AstraeaError::parse(format!(
                    "theta {val}/10 outside grid at step {idx}"
                )));
            }
            seen[idx] = true;
            tenths[idx] = val;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(AstraeaError::parse(format!("missing step index {missing}")));
        }
        Schedule::new(tenths)
    }
}
