//! Periodic 2-D viscous Burgers solver used to produce training and test
//! trajectories.
//!
//! The grid stores `n_x · n_y` distinct nodes spaced `Δx = (x_max − x_min)/(n_x − 1)`
//! with the neighbor of the last node in each direction being the first.
//! Advection uses the conservative central flux form and diffusion the
//! 5-point Laplacian; time integration is classical RK4 with substeps that
//! land exactly on every requested output time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_x: usize,
    pub n_y: usize,
}

impl Default for Grid2D {
    fn default() -> Self {
        Self {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
            n_x: 51,
            n_y: 51,
        }
    }
}

impl Grid2D {
    pub fn square(n: usize) -> Self {
        Self {
            n_x: n,
            n_y: n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 3 || self.n_y < 3 {
            return Err(Error::Config(format!(
                "grid needs at least 3 nodes per direction, got {}x{}",
                self.n_x, self.n_y
            )));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::Config("grid extents must be increasing".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / (self.n_y - 1) as f64
    }

    pub fn n_u(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Node coordinates in storage order (x fastest).
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (dx, dy) = (self.dx(), self.dy());
        (0..self.n_y).flat_map(move |j| {
            (0..self.n_x).map(move |i| (self.x_min + i as f64 * dx, self.y_min + j as f64 * dy))
        })
    }
}

/// A point `(ν, ω)` of the parameter domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub nu: f64,
    pub omega: f64,
}

impl ParameterPoint {
    pub fn new(nu: f64, omega: f64) -> Result<Self> {
        let p = Self { nu, omega };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() || !self.omega.is_finite() {
            return Err(Error::Domain(format!(
                "viscosity must be positive and parameters finite, got nu = {}, omega = {}",
                self.nu, self.omega
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.nu, self.omega]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    #[default]
    Fixed,
    Variable,
}

impl std::str::FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "variable" => Ok(Self::Variable),
            other => Err(Error::Usage(format!(
                "time mode must be `fixed` or `variable`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for TimeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Variable => "variable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomConfig {
    #[serde(default)]
    pub grid: Grid2D,
    #[serde(default = "FomConfig::default_t_final")]
    pub t_final: f64,
    /// Number of output steps; trajectories hold `n_t + 1` frames.
    #[serde(default = "FomConfig::default_n_t")]
    pub n_t: usize,
    /// Decay rate of the Gaussian envelope in the initial condition.
    #[serde(default = "FomConfig::default_k")]
    pub k: f64,
    #[serde(default = "FomConfig::default_cfl")]
    pub cfl_safety: f64,
    #[serde(default)]
    pub time_mode: TimeMode,
    #[serde(default = "FomConfig::default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self {
            grid: Grid2D::default(),
            t_final: Self::default_t_final(),
            n_t: Self::default_n_t(),
            k: Self::default_k(),
            cfl_safety: Self::default_cfl(),
            time_mode: TimeMode::Fixed,
            jitter: Self::default_jitter(),
            seed: 0,
        }
    }
}

impl FomConfig {
    fn default_t_final() -> f64 {
        2.0
    }
    fn default_n_t() -> usize {
        500
    }
    fn default_k() -> f64 {
        1.0
    }
    fn default_cfl() -> f64 {
        0.5
    }
    fn default_jitter() -> f64 {
        0.3
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_t < 3 {
            return Err(Error::Config(format!("n_t must be at least 3, got {}", self.n_t)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Config(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Config(format!("t_final must be positive, got {}", self.t_final)));
        }
        if !self.k.is_finite() || self.k < 0.0 {
            return Err(Error::Config(format!("k must be nonnegative, got {}", self.k)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        Ok(())
    }

    /// Output times for a trajectory, with the variable-mode jitter seeded
    /// by `self.seed` mixed with `stream`.
    pub fn time_grid(&self, stream: u64) -> Result<Vec<f64>> {
        make_time_grid(
            self.n_t,
            self.t_final,
            self.time_mode,
            self.jitter,
            self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )
    }
}

/// Sampled solution for one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: ParameterPoint,
    pub times: Vec<f64>,
    /// `times.len() × n_u` row-major, x-fastest node order.
    pub states: Vec<f64>,
    pub n_u: usize,
}

impl Trajectory {
    pub fn new(theta: ParameterPoint, times: Vec<f64>, states: Vec<f64>, n_u: usize) -> Result<Self> {
        if times.is_empty() || n_u == 0 || states.len() != times.len() * n_u {
            return Err(Error::Dimension(format!(
                "{} frames of {n_u} nodes need {} values, got {}",
                times.len(),
                times.len() * n_u,
                states.len()
            )));
        }
        Ok(Self {
            theta,
            times,
            states,
            n_u,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.times.len()
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        &self.states[j * self.n_u..(j + 1) * self.n_u]
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Mean output step `(t_last − t_0)/(frames − 1)`.
    pub fn mean_step(&self) -> f64 {
        (self.final_time() - self.times[0]) / (self.n_frames() - 1).max(1) as f64
    }
}

/// Gaussian-windowed product of sines, evaluated at every node.
pub fn initial_condition(theta: &ParameterPoint, grid: &Grid2D, k: f64) -> Vec<f64> {
    let w = std::f64::consts::FRAC_PI_2 * theta.omega;
    grid.nodes()
        .map(|(x, y)| (-k * (x * x + y * y)).exp() * (w * x).sin() * (w * y).sin())
        .collect()
}

/// Semi-discrete right-hand side `−½∂x(u²) − ½∂y(u²) + ν Δu`.
pub fn burgers_rhs(u: &[f64], theta: &ParameterPoint, grid: &Grid2D) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    rhs_into(u, theta.nu, grid, true, &mut out);
    out
}

/// Right-hand side with the advective term optionally disabled.
pub(crate) fn rhs_into(u: &[f64], nu: f64, grid: &Grid2D, advect: bool, out: &mut [f64]) {
    let (nx, ny) = (grid.n_x, grid.n_y);
    let (dx, dy) = (grid.dx(), grid.dy());
    let (ax, ay) = (0.25 / dx, 0.25 / dy);
    let (lx, ly) = (nu / (dx * dx), nu / (dy * dy));
    for j in 0..ny {
        let jm = if j == 0 { ny - 1 } else { j - 1 };
        let jp = if j + 1 == ny { 0 } else { j + 1 };
        for i in 0..nx {
            let im = if i == 0 { nx - 1 } else { i - 1 };
            let ip = if i + 1 == nx { 0 } else { i + 1 };
            let c = u[j * nx + i];
            let (e, w) = (u[j * nx + ip], u[j * nx + im]);
            let (n, s) = (u[jp * nx + i], u[jm * nx + i]);
            let mut r = lx * (e - 2.0 * c + w) + ly * (n - 2.0 * c + s);
            if advect {
                r -= ax * (e * e - w * w) + ay * (n * n - s * s);
            }
            out[j * nx + i] = r;
        }
    }
}

/// Output time grid with `n_t + 1` samples from 0 to `t_final`.
///
/// Variable mode draws each step uniformly from `[(1 − jitter)δ, (1 + jitter)δ]`
/// with `δ = t_final / n_t`, then rescales so the last sample is `t_final`.
pub fn make_time_grid(
    n_t: usize,
    t_final: f64,
    mode: TimeMode,
    jitter: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_t < 3 {
        return Err(Error::Domain(format!("n_t must be at least 3, got {n_t}")));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::Domain(format!("jitter must lie in [0, 1), got {jitter}")));
    }
    if !(t_final > 0.0) {
        return Err(Error::Domain(format!("final time must be positive, got {t_final}")));
    }
    let mut times = Vec::with_capacity(n_t + 1);
    match mode {
        TimeMode::Fixed => {
            let dt = t_final / n_t as f64;
            times.extend((0..=n_t).map(|i| i as f64 * dt));
        }
        TimeMode::Variable => {
            let mean = t_final / n_t as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let steps: Vec<f64> = (0..n_t)
                .map(|_| mean * (1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0)))
                .collect();
            let scale = t_final / steps.iter().sum::<f64>();
            let mut t = 0.0;
            times.push(0.0);
            for s in steps {
                t += s * scale;
                times.push(t);
            }
        }
    }
    times[n_t] = t_final;
    Ok(times)
}

fn max_stable_step(u: &[f64], nu: f64, grid: &Grid2D, cfl: f64) -> f64 {
    let h = grid.dx().min(grid.dy());
    let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diffusive = h * h / (4.0 * nu);
    let advective = if umax > 0.0 { h / umax } else { f64::INFINITY };
    cfl * diffusive.min(advective)
}

struct Rk4Work {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
        }
    }

    fn step(&mut self, u: &mut [f64], h: f64, f: impl Fn(&[f64], &mut [f64])) {
        let Self { k, stage } = self;
        f(u, &mut k[0]);
        for (s, (x, d)) in stage.iter_mut().zip(u.iter().zip(&k[0])) {
            *s = x + 0.5 * h * d;
        }
        f(stage, &mut k[1]);
        for (s, (x, d)) in stage.iter_mut().zip(u.iter().zip(&k[1])) {
            *s = x + 0.5 * h * d;
        }
        f(stage, &mut k[2]);
        for (s, (x, d)) in stage.iter_mut().zip(u.iter().zip(&k[2])) {
            *s = x + h * d;
        }
        f(stage, &mut k[3]);
        for i in 0..u.len() {
            u[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
}

/// Integrates from the initial condition and records every frame of `times`.
pub fn solve_on_times(
    config: &FomConfig,
    theta: &ParameterPoint,
    times: &[f64],
) -> Result<Trajectory> {
    config.validate()?;
    theta.validate()?;
    if times.first() != Some(&0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain(
            "output times must start at 0 and increase strictly".into(),
        ));
    }
    let grid = &config.grid;
    let n_u = grid.n_u();
    let mut u = initial_condition(theta, grid, config.k);
    let mut states = Vec::with_capacity(times.len() * n_u);
    states.extend_from_slice(&u);
    let mut work = Rk4Work::new(n_u);
    let mut step = 0usize;
    let rhs = |x: &[f64], out: &mut [f64]| rhs_into(x, theta.nu, grid, true, out);

    for w in times.windows(2) {
        let span = w[1] - w[0];
        let limit = max_stable_step(&u, theta.nu, grid, config.cfl_safety);
        let n_sub = (span / limit).ceil().max(1.0) as usize;
        let h = span / n_sub as f64;
        for s in 0..n_sub {
            work.step(&mut u, h, rhs);
            step += 1;
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::Instability {
                    step,
                    time: w[0] + (s + 1) as f64 * h,
                    detail: format!("non-finite state after RK4 substep of size {h:.3e}"),
                });
            }
        }
        states.extend_from_slice(&u);
    }
    Trajectory::new(*theta, times.to_vec(), states, n_u)
}

/// Solves on the configured output grid (`stream` selects the jitter draw
/// in variable mode).
pub fn solve_fom(config: &FomConfig, theta: &ParameterPoint, stream: u64) -> Result<Trajectory> {
    let times = config.time_grid(stream)?;
    solve_on_times(config, theta, &times)
}
