//! Timestep grid and the linear visual-strength decay `lambda(t) = base * t`.

use crate::error::{DviError, Result};

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_LAMBDA_BASE: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Uniform descending grid `t_i = (T - i) / T`, `i = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleGrid {
    steps: usize,
    t_values: Vec<f64>,
    lambda_base: f64,
    alpha_per_layer: Vec<f64>,
}

fn check_alpha(a: f64) -> Result<()> {
    if (0.0..=2.0).contains(&a) {
        Ok(())
    } else {
        Err(DviError::InvalidArgument(format!(
            "alpha {a} outside [0, 2]"
        )))
    }
}

pub fn build_grid(
    steps: usize,
    lambda_base: f64,
    layers: usize,
    alpha: f64,
) -> Result<ScheduleGrid> {
    if layers == 0 {
        return Err(DviError::InvalidArgument("layer count must be >= 1".into()));
    }
    build_grid_with_alphas(steps, lambda_base, vec![alpha; layers])
}

/// Same grid with an explicit per-layer injection strength.
pub fn build_grid_with_alphas(
    steps: usize,
    lambda_base: f64,
    alpha_per_layer: Vec<f64>,
) -> Result<ScheduleGrid> {
    if steps == 0 {
        return Err(DviError::InvalidArgument("steps must be >= 1".into()));
    }
    if !(lambda_base >= 0.0 && lambda_base.is_finite()) {
        return Err(DviError::InvalidArgument(format!(
            "lambda_base must be >= 0, got {lambda_base}"
        )));
    }
    if alpha_per_layer.is_empty() {
        return Err(DviError::InvalidArgument("layer count must be >= 1".into()));
    }
    alpha_per_layer.iter().try_for_each(|&a| check_alpha(a))?;
    let t_values = (0..=steps)
        .map(|i| (steps - i) as f64 / steps as f64)
        .collect();
    Ok(ScheduleGrid {
        steps,
        t_values,
        lambda_base,
        alpha_per_layer,
    })
}

impl ScheduleGrid {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn t(&self, i: usize) -> Result<f64> {
        self.t_values.get(i).copied().ok_or_else(|| {
            DviError::InvalidArgument(format!("step index {i} out of range 0..={}", self.steps))
        })
    }

    pub fn lambda_base(&self) -> f64 {
        self.lambda_base
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha_per_layer
    }

    /// `lambda_base * t_i`; `i = T` gives exactly 0.
    pub fn lambda_at(&self, i: usize) -> Result<f64> {
        Ok(self.lambda_base * self.t(i)?)
    }

    /// CSV rows `step,t,lambda` for every grid point, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,lambda\n");
        for (i, &t) in self.t_values.iter().enumerate() {
            out.push_str(&format!("{i},{t:?},{:?}\n", self.lambda_base * t));
        }
        out
    }
}
