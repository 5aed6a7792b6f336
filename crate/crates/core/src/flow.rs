//! Rectified-flow time grids, Euler integration and the controlled
//! forward/reverse ODEs used for inversion.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise). Sampling walks a
//! descending grid; inversion walks an ascending one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Anything that maps `(x, t)` to a velocity of the same shape.
pub trait VelocityField {
    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix>;
}

impl<F> VelocityField for F
where
    F: Fn(&Matrix, f64) -> Result<Matrix>,
{
    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self(x, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub latent: Matrix,
    pub t: f64,
}

/// Strictly monotone knots `t_0, …, t_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("a time grid needs at least two knots".into()));
        }
        if knots.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("time knots must lie in [0, 1]".into()));
        }
        let ascending = knots[1] > knots[0];
        let monotone = knots
            .windows(2)
            .all(|w| if ascending { w[1] > w[0] } else { w[1] < w[0] });
        if !monotone {
            return Err(Error::Config("time knots must be strictly monotone".into()));
        }
        Ok(Self { knots })
    }

    /// `1 = t_0 > … > t_T = 0`, uniform.
    pub fn sampling(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        let mut knots: Vec<f64> = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect();
        knots[steps] = 0.0;
        Self::new(knots)
    }

    /// `0 = t_0 < … < t_T = 1 - δ`, uniform, with `δ = 1/(2T)`.
    pub fn inversion(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        let end = 1.0 - singularity_guard(steps);
        let mut knots: Vec<f64> = (0..=steps).map(|k| end * k as f64 / steps as f64).collect();
        knots[steps] = end;
        Self::new(knots)
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn is_ascending(&self) -> bool {
        self.knots[1] > self.knots[0]
    }

    pub fn first(&self) -> f64 {
        self.knots[0]
    }

    pub fn last(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Knots at which the field is evaluated (all but the last).
    pub fn evaluation_knots(&self) -> &[f64] {
        &self.knots[..self.knots.len() - 1]
    }
}

/// Minimum distance kept between evaluation times and a singular endpoint.
pub fn singularity_guard(steps: usize) -> f64 {
    1.0 / (2.0 * steps as f64)
}

/// Point on the straight path: `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &Matrix, x1: &Matrix, t: f64) -> Result<Matrix> {
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "interpolate {:?} with {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(Matrix::from_fn(x0.rows(), x0.cols(), |r, c| {
        (1.0 - t) * x0.get(r, c) + t * x1.get(r, c)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(anchor - x) / (1 - t)`: straight line to a noise sample.
    TowardNoise,
    /// `(x - anchor) / t`: straight line from a data sample.
    TowardData,
}

/// Velocity of the straight conditional path through `anchor`.
pub fn conditional_velocity(x: &Matrix, t: f64, anchor: &Matrix, direction: Direction) -> Result<Matrix> {
    if x.shape() != anchor.shape() {
        return Err(Error::Shape("conditional velocity anchor shape mismatch".into()));
    }
    match direction {
        Direction::TowardNoise => {
            if t >= 1.0 {
                return Err(Error::Domain(format!("toward-noise velocity singular at t = {t}")));
            }
            let inv = 1.0 / (1.0 - t);
            Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                (anchor.get(r, c) - x.get(r, c)) * inv
            }))
        }
        Direction::TowardData => {
            if t <= 0.0 {
                return Err(Error::Domain(format!("toward-data velocity singular at t = {t}")));
            }
            let inv = 1.0 / t;
            Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                (x.get(r, c) - anchor.get(r, c)) * inv
            }))
        }
    }
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Step {
        step,
        source: Box::new(e),
    })
}

/// Explicit Euler over `grid`; returns all `T + 1` states.
pub fn euler_sample(start: &FlowState, grid: &TimeGrid, field: &dyn VelocityField) -> Result<Vec<FlowState>> {
    if start.t != grid.first() {
        return Err(Error::Domain(format!(
            "start time {} does not match first knot {}",
            start.t,
            grid.first()
        )));
    }
    let mut trajectory = Vec::with_capacity(grid.knots.len());
    trajectory.push(start.clone());
    let mut x = start.latent.clone();
    for (k, w) in grid.knots.windows(2).enumerate() {
        let v = at_step(k, field.velocity(&x, w[0]))?;
        x = at_step(k, x.axpy(w[1] - w[0], &v))?;
        trajectory.push(FlowState {
            latent: x.clone(),
            t: w[1],
        });
    }
    Ok(trajectory)
}

/// `(1 - w) · model + w · conditional`. At `w = 1` the model is skipped, so
/// the result is exactly the conditional field; at `w = 0` it is exactly
/// the model.
struct Controlled<'a> {
    model: &'a dyn VelocityField,
    anchor: &'a Matrix,
    direction: Direction,
    weight: f64,
}

impl VelocityField for Controlled<'_> {
    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        if self.weight == 0.0 {
            return self.model.velocity(x, t);
        }
        let cond = conditional_velocity(x, t, self.anchor, self.direction)?;
        if self.weight == 1.0 {
            return Ok(cond);
        }
        let model = self.model.velocity(x, t)?;
        model.scale(1.0 - self.weight).axpy(self.weight, &cond)
    }
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
    }
    Ok(())
}

/// Controlled forward ODE from data `x0` toward the regulator `x1`.
///
/// `null_field` is the model under the empty prompt. The grid must ascend
/// from 0 and keep every evaluation knot at least `1/(2T)` below 1.
pub fn invert(
    x0: &Matrix,
    x1: &Matrix,
    gamma: f64,
    grid: &TimeGrid,
    null_field: &dyn VelocityField,
) -> Result<Vec<FlowState>> {
    check_weight("gamma", gamma)?;
    if !grid.is_ascending() || grid.first() != 0.0 {
        return Err(Error::Config("inversion grid must ascend from t = 0".into()));
    }
    let delta = singularity_guard(grid.steps());
    if let Some(t) = grid.evaluation_knots().iter().find(|&&t| 1.0 - t < delta) {
        return Err(Error::Domain(format!(
            "inversion knot t = {t} is within {delta} of the singular endpoint t = 1"
        )));
    }
    let field = Controlled {
        model: null_field,
        anchor: x1,
        direction: Direction::TowardNoise,
        weight: gamma,
    };
    let start = FlowState {
        latent: x0.clone(),
        t: 0.0,
    };
    euler_sample(&start, grid, &field)
}

/// Controlled reverse ODE from `x_start` back toward the reference `x0`.
///
/// `prompt_field` is the model under the target prompt. The grid must
/// descend from 1 and keep every evaluation knot at least `1/(2T)` above 0.
pub fn guided_sample(
    x_start: &Matrix,
    x0: &Matrix,
    eta_rev: f64,
    grid: &TimeGrid,
    prompt_field: &dyn VelocityField,
) -> Result<Vec<FlowState>> {
    check_weight("eta_rev", eta_rev)?;
    if grid.is_ascending() || grid.first() != 1.0 {
        return Err(Error::Config("reverse grid must descend from t = 1".into()));
    }
    check_reverse_guard(grid)?;
    let field = Controlled {
        model: prompt_field,
        anchor: x0,
        direction: Direction::TowardData,
        weight: eta_rev,
    };
    let start = FlowState {
        latent: x_start.clone(),
        t: 1.0,
    };
    euler_sample(&start, grid, &field)
}

pub(crate) fn check_reverse_guard(grid: &TimeGrid) -> Result<()> {
    let delta = singularity_guard(grid.steps());
    if let Some(t) = grid.evaluation_knots().iter().find(|&&t| t < delta) {
        return Err(Error::Domain(format!(
            "reverse knot t = {t} is within {delta} of the singular endpoint t = 0"
        )));
    }
    Ok(())
}

/// One-sample conditional flow-matching residual
/// `‖(x1 - X_t)/(1 - t) - v(X_t, t)‖²` with `X_t` on the straight path.
pub fn cfm_residual(field: &dyn VelocityField, x0: &Matrix, x1: &Matrix, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("t = {t} must lie in (0, 1)")));
    }
    let xt = interpolate(x0, x1, t)?;
    let target = conditional_velocity(&xt, t, x1, Direction::TowardNoise)?;
    Ok(target.sub(&field.velocity(&xt, t)?)?.frobenius_sq())
}
