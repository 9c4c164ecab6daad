//! The experiment subcommands: generate, train, infer, evaluate, heatmap.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lasdi::fom::{initial_condition, make_time_grid, solve_fom, FomConfig, ParameterPoint, TimeMode, Trajectory};
use lasdi::formats::{read_model, read_trajectory, write_model, write_trajectory};
use lasdi::gp::{decode_surrogate, encode_surrogate, GpSurrogate};
use lasdi::metrics::relative_error;
use lasdi::rom::{predict_trajectory, AutoencoderModel, LatentCoefficients};
use lasdi::train::{train_loop, FomSource, HistoryRow, Origin, TrainEvent, TrainOutcome};

use crate::config::{ExperimentConfig, ParameterGrid};
use crate::error::{CliError, CliResult};

/// File locations under one experiment output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn trajectory(&self, index: usize) -> PathBuf {
        self.data_dir().join(format!("traj_{index}.lsdt"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn model(&self) -> PathBuf {
        self.model_dir().join("model.lsdm")
    }

    pub fn surrogate(&self) -> PathBuf {
        self.model_dir().join("surrogate.lsdg")
    }

    pub fn training_set(&self) -> PathBuf {
        self.model_dir().join("training_set.json")
    }

    pub fn history(&self) -> PathBuf {
        self.model_dir().join("history.csv")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.model_dir().join("resolved_config.json")
    }

    pub fn errors(&self) -> PathBuf {
        self.root.join("errors.csv")
    }

    pub fn heatmap(&self) -> PathBuf {
        self.root.join("heatmap.csv")
    }

    pub fn heatmap_legend(&self) -> PathBuf {
        self.root.join("heatmap_legend.csv")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub nu: f64,
    pub omega: f64,
    pub file: String,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fom: FomConfig,
    pub grid: ParameterGrid,
    pub entries: Vec<ManifestEntry>,
}

/// Solves the full-order model at every grid point and writes one trajectory
/// file per point plus a manifest.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    config.validate()?;
    let cfg = config.resolved();
    let layout = Layout::new(out);
    fs::create_dir_all(layout.data_dir())?;
    let points = cfg.grid.points();
    let trajectories = points
        .par_iter()
        .enumerate()
        .map(|(i, th)| solve_fom(&cfg.fom, th, i as u64))
        .collect::<lasdi::Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(points.len());
    for (i, traj) in trajectories.iter().enumerate() {
        let path = layout.trajectory(i);
        write_trajectory(&path, traj)?;
        entries.push(ManifestEntry {
            index: i,
            nu: traj.theta.nu,
            omega: traj.theta.omega,
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            n_frames: traj.n_frames(),
        });
    }
    let manifest = Manifest {
        fom: cfg.fom.clone(),
        grid: cfg.grid,
        entries,
    };
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

/// Reads generated trajectories; acquisition "solves" by loading the file
/// the generator wrote for that grid point, which is the same computation.
struct DataSource<'a> {
    layout: &'a Layout,
    fom: &'a FomConfig,
    points: Vec<ParameterPoint>,
}

impl FomSource for DataSource<'_> {
    fn candidates(&self) -> &[ParameterPoint] {
        &self.points
    }

    fn setup(&self, index: usize) -> lasdi::Result<(Vec<f64>, Vec<f64>)> {
        let th = &self.points[index];
        let u0 = initial_condition(th, &self.fom.grid, self.fom.k);
        let times = self.fom.time_grid(index as u64)?;
        Ok((u0, times))
    }

    fn solve(&self, index: usize) -> lasdi::Result<Trajectory> {
        let path = self.layout.trajectory(index);
        if path.exists() {
            read_trajectory(&path)
        } else {
            solve_fom(self.fom, &self.points[index], index as u64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Initial,
    Acquired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingEntry {
    pub grid_index: usize,
    pub nu: f64,
    pub omega: f64,
    pub membership: Membership,
    /// Epochs completed when the point joined.
    pub joined_at: usize,
    pub coefficients: LatentCoefficients,
}

fn load_manifest(layout: &Layout, cfg: &ExperimentConfig) -> CliResult<Manifest> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(CliError::Config(format!(
            "no generated data at {}; run `generate` first",
            layout.data_dir().display()
        )));
    }
    let m: Manifest = read_json(&path)?;
    if m.fom != cfg.fom || m.grid != cfg.grid {
        return Err(CliError::Config(
            "data was generated with a different FOM configuration or parameter grid".into(),
        ));
    }
    Ok(m)
}

fn load_data(layout: &Layout, index: usize) -> CliResult<Trajectory> {
    let path = layout.trajectory(index);
    if !path.exists() {
        return Err(CliError::Config(format!("missing trajectory {}", path.display())));
    }
    Ok(read_trajectory(&path)?)
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "L_Recon",
        "L_LD",
        "L_Rollout",
        "regularizer",
        "total",
        "wall_seconds",
        "n_train_params",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.recon.to_string(),
            r.ld.to_string(),
            r.rollout.map_or_else(|| "n/a".to_string(), |v| v.to_string()),
            r.reg.to_string(),
            r.total.to_string(),
            format!("{:.3}", r.wall_seconds),
            r.n_train_params.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on generated data and writes model, surrogate, training set and
/// history under `out/model`.
pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    events: &mut dyn FnMut(TrainEvent),
) -> CliResult<TrainOutcome> {
    config.validate()?;
    let cfg = config.resolved();
    let layout = Layout::new(out);
    load_manifest(&layout, &cfg)?;
    let initial = cfg
        .initial()
        .into_iter()
        .map(|i| Ok((Some(i), load_data(&layout, i)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let n_u = cfg.fom.grid.n_u();
    let model = AutoencoderModel::with_frequency(
        &cfg.network.encoder_widths(n_u),
        cfg.seed,
        cfg.network.init_frequency,
    )?;
    let source = DataSource {
        layout: &layout,
        fom: &cfg.fom,
        points: cfg.grid.points(),
    };
    let outcome = train_loop(cfg.train.clone(), model, initial, Some(&source), events)?;

    fs::create_dir_all(layout.model_dir())?;
    write_json(&layout.resolved_config(), &cfg)?;
    write_model(&layout.model(), &outcome.state.model)?;
    fs::write(layout.surrogate(), encode_surrogate(&outcome.surrogate)?)?;
    // a point acquired after the last epoch was never trained; it is not
    // part of the model any more than of the surrogate
    let entries: Vec<TrainingEntry> = outcome
        .items
        .iter()
        .zip(&outcome.state.coeffs)
        .filter(|(it, _)| it.origin == Origin::Initial || it.joined_at < cfg.train.epochs)
        .map(|(it, c)| TrainingEntry {
            grid_index: it.grid_index.expect("training data comes from the grid"),
            nu: it.theta().nu,
            omega: it.theta().omega,
            membership: match it.origin {
                Origin::Initial => Membership::Initial,
                Origin::Acquired => Membership::Acquired,
            },
            joined_at: it.joined_at,
            coefficients: c.clone(),
        })
        .collect();
    write_json(&layout.training_set(), &entries)?;
    write_history(&layout.history(), &outcome.history)?;
    Ok(outcome)
}

/// Trained artifacts loaded back from disk.
pub struct Artifacts {
    pub config: ExperimentConfig,
    pub model: AutoencoderModel,
    pub surrogate: GpSurrogate,
    pub training_set: Vec<TrainingEntry>,
}

pub fn load_artifacts(out: &Path) -> CliResult<Artifacts> {
    let layout = Layout::new(out);
    let config: ExperimentConfig = read_json(&layout.resolved_config())?;
    let model = read_model(&layout.model())?;
    let surrogate = decode_surrogate(&fs::read(layout.surrogate())?)?;
    let training_set = read_json(&layout.training_set())?;
    Ok(Artifacts {
        config,
        model,
        surrogate,
        training_set,
    })
}

impl Artifacts {
    fn substep(&self, times: &[f64]) -> f64 {
        let mean = (times[times.len() - 1] - times[0]) / (times.len() - 1).max(1) as f64;
        self.config.train.substep_for(mean)
    }

    /// Encode `u0`, integrate with the posterior-mean coefficients at
    /// `theta`, decode at every time.
    pub fn predict(&self, theta: &ParameterPoint, u0: &[f64], times: &[f64]) -> CliResult<Trajectory> {
        let coeffs = self.surrogate.posterior_mean_coefficients(theta)?;
        let states = predict_trajectory(&self.model, &coeffs, u0, times, self.substep(times))?;
        Ok(Trajectory::new(*theta, times.to_vec(), states, self.model.n_u())?)
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub trajectory: Trajectory,
    /// Set when `theta` lies outside the configured parameter box.
    pub extrapolating: bool,
    pub path: PathBuf,
}

/// Predicts a trajectory from the analytic initial condition. Grid points
/// use the time grid of their generated data; other points use the
/// uniform grid unless `times` is given.
pub fn cmd_infer(out: &Path, theta: ParameterPoint, times: Option<Vec<f64>>) -> CliResult<Inference> {
    theta.validate()?;
    let art = load_artifacts(out)?;
    let fom = &art.config.fom;
    let times = match times {
        Some(t) => t,
        None => match art.config.grid.index_of(&theta) {
            Some(i) => fom.time_grid(i as u64)?,
            None => make_time_grid(fom.n_t, fom.t_final, TimeMode::Fixed, 0.0, 0)?,
        },
    };
    let u0 = initial_condition(&theta, &fom.grid, fom.k);
    let trajectory = art.predict(&theta, &u0, &times)?;
    let layout = Layout::new(out);
    fs::create_dir_all(layout.predictions_dir())?;
    let path = layout
        .predictions_dir()
        .join(format!("pred_{}_{}.lsdt", theta.nu, theta.omega));
    write_trajectory(&path, &trajectory)?;
    Ok(Inference {
        extrapolating: !art.config.grid.contains(&theta),
        trajectory,
        path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub theta_index: usize,
    pub nu: f64,
    pub omega: f64,
    pub error: f64,
    /// 0 test, 1 initial training point, 2 acquired.
    pub in_training_set: u8,
}

pub fn write_errors(path: &Path, rows: &[ErrorRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_errors<R: std::io::Read>(reader: R) -> CliResult<Vec<ErrorRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<Vec<ErrorRow>, _>>()?)
}

pub fn read_errors(path: &Path) -> CliResult<Vec<ErrorRow>> {
    parse_errors(fs::File::open(path)?)
}

/// Relative error of the prediction at every grid point against the
/// generated data, written to `out/errors.csv`.
pub fn cmd_evaluate(out: &Path) -> CliResult<Vec<ErrorRow>> {
    let layout = Layout::new(out);
    let art = load_artifacts(out)?;
    let manifest = load_manifest(&layout, &art.config)?;
    let rows = manifest
        .entries
        .par_iter()
        .map(|e| {
            let fom = load_data(&layout, e.index)?;
            let pred = art.predict(&fom.theta, fom.frame(0), &fom.times)?;
            let report = relative_error(&fom, &pred)?;
            let flag = art
                .training_set
                .iter()
                .find(|t| t.grid_index == e.index)
                .map_or(0, |t| match t.membership {
                    Membership::Initial => 1,
                    Membership::Acquired => 2,
                });
            Ok(ErrorRow {
                theta_index: e.index,
                nu: e.nu,
                omega: e.omega,
                error: report.error,
                in_training_set: flag,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_errors(&layout.errors(), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub nu: Vec<f64>,
    pub omega: Vec<f64>,
    /// `errors[i][j]` at `(nu[i], omega[j])`.
    pub errors: Vec<Vec<f64>>,
    pub flags: Vec<Vec<u8>>,
}

/// Dense `ν × ω` error matrix from an errors table. Every combination of the
/// distinct `ν` and `ω` values must be present.
pub fn build_heatmap(rows: &[ErrorRow]) -> CliResult<Heatmap> {
    if rows.is_empty() {
        return Err(CliError::Config("errors table is empty".into()));
    }
    if let Some(r) = rows.iter().find(|r| !(r.nu.is_finite() && r.omega.is_finite())) {
        return Err(CliError::Config(format!(
            "row {} has non-finite parameters ({}, {})",
            r.theta_index, r.nu, r.omega
        )));
    }
    let distinct = |f: fn(&ErrorRow) -> f64| -> Vec<f64> {
        let set: BTreeSet<u64> = rows.iter().map(|r| f(r).to_bits()).collect();
        let mut v: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let nu = distinct(|r| r.nu);
    let omega = distinct(|r| r.omega);
    let mut errors = vec![vec![f64::NAN; omega.len()]; nu.len()];
    let mut flags = vec![vec![0u8; omega.len()]; nu.len()];
    let mut seen = vec![vec![false; omega.len()]; nu.len()];
    for r in rows {
        let i = nu.iter().position(|v| *v == r.nu).unwrap();
        let j = omega.iter().position(|v| *v == r.omega).unwrap();
        if seen[i][j] {
            return Err(CliError::Config(format!(
                "duplicate row for nu = {}, omega = {}",
                r.nu, r.omega
            )));
        }
        seen[i][j] = true;
        errors[i][j] = r.error;
        flags[i][j] = r.in_training_set;
    }
    let missing: Vec<String> = nu
        .iter()
        .enumerate()
        .flat_map(|(i, a)| omega.iter().enumerate().map(move |(j, b)| (i, j, a, b)))
        .filter(|(i, j, _, _)| !seen[*i][*j])
        .map(|(_, _, a, b)| format!("({a}, {b})"))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "incomplete parameter grid, missing {}",
            missing.join(", ")
        )));
    }
    Ok(Heatmap {
        nu,
        omega,
        errors,
        flags,
    })
}

fn write_matrix<T: ToString>(path: &Path, nu: &[f64], omega: &[f64], cells: &[Vec<T>]) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    let header: Vec<String> = std::iter::once("nu\\omega".to_string())
        .chain(omega.iter().map(f64::to_string))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (v, row) in nu.iter().zip(cells) {
        let line: Vec<String> = std::iter::once(v.to_string())
            .chain(row.iter().map(ToString::to_string))
            .collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes `heatmap.csv` (rows ν, columns ω) and `heatmap_legend.csv` with
/// the training-set flags of every cell, next to `errors_csv`.
pub fn cmd_heatmap(errors_csv: &Path) -> CliResult<Heatmap> {
    let rows = read_errors(errors_csv)?;
    let map = build_heatmap(&rows)?;
    let dir = errors_csv.parent().unwrap_or(Path::new("."));
    write_matrix(&dir.join("heatmap.csv"), &map.nu, &map.omega, &map.errors)?;
    write_matrix(&dir.join("heatmap_legend.csv"), &map.nu, &map.omega, &map.flags)?;
    Ok(map)
}

/// Maximum and median over a set of errors.
pub fn summarize(errors: &[f64]) -> (f64, f64) {
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    (v[n - 1], median)
}
