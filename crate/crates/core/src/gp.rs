//! Gaussian-process interpolation of latent coefficients over parameter
//! space, and greedy acquisition of new training parameters.
//!
//! Each flattened coefficient entry gets an independent zero-mean GP on
//! centered targets with a squared-exponential kernel and one lengthscale
//! per (standardized) input dimension.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::ParameterPoint;
use crate::formats::{decode_container, encode_container, SURROGATE_MAGIC};
use crate::rom::{integrate_latent, transpose, AutoencoderModel, LatentCoefficients};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
// The data spans about ±1.2 standardized units; longer lengthscales only make
// K near-singular and inflate the jitter bias at the training inputs.
const LOG_LS_BOUNDS: (f64, f64) = (-3.0, 2.0);
const LOG_SF2_FLOOR: f64 = -30.0;

/// Optimizer settings for the marginal-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            iterations: 200,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub signal_variance: f64,
    pub lengthscales: [f64; 2],
    pub jitter: f64,
}

/// Fitted GP for one output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGp {
    pub mean: f64,
    pub hyper: Hyperparameters,
    /// `K⁻¹ (y − mean)`
    pub alpha: Vec<f64>,
    /// Lower Cholesky factor of `K + jitter·I`, row-major `n × n`.
    pub chol: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpSurrogate {
    pub latent_dim: usize,
    pub thetas: Vec<ParameterPoint>,
    pub input_mean: [f64; 2],
    pub input_std: [f64; 2],
    /// Standardized training inputs.
    pub inputs: Vec<[f64; 2]>,
    /// Training targets, one flattened coefficient set per parameter.
    pub targets: Vec<Vec<f64>>,
    pub outputs: Vec<OutputGp>,
}

fn kernel(x: &[f64; 2], y: &[f64; 2], sf2: f64, ls: &[f64; 2]) -> f64 {
    let d0 = (x[0] - y[0]) / ls[0];
    let d1 = (x[1] - y[1]) / ls[1];
    sf2 * (-0.5 * (d0 * d0 + d1 * d1)).exp()
}

fn kernel_matrix(xs: &[[f64; 2]], sf2: f64, ls: &[f64; 2]) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| kernel(&xs[i], &xs[j], sf2, ls))
}

/// Cholesky of `K + jitter·I`, escalating the jitter tenfold on failure.
fn factor(k: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = JITTER_START;
    loop {
        let kj = k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = kj.cholesky() {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numerical(
                "kernel matrix is not positive definite even with maximal jitter".into(),
            ));
        }
    }
}

/// Log marginal likelihood and its gradient in `(log sf², log ℓ₀, log ℓ₁)`.
fn lml_and_grad(xs: &[[f64; 2]], y: &DVector<f64>, logp: &[f64; 3]) -> Result<(f64, [f64; 3])> {
    let n = xs.len();
    let sf2 = logp[0].exp();
    let ls = [logp[1].exp(), logp[2].exp()];
    let kf = kernel_matrix(xs, sf2, &ls);
    let (chol, _) = factor(&kf)?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let kij = kf[(i, j)];
            let wij = w[(i, j)];
            grad[0] += 0.5 * wij * kij;
            for d in 0..2 {
                let r = (xs[i][d] - xs[j][d]) / ls[d];
                grad[1 + d] += 0.5 * wij * kij * r * r;
            }
        }
    }
    Ok((lml, grad))
}

fn clamp_logp(p: &mut [f64; 3], sf2_cap: f64) {
    p[0] = p[0].clamp(LOG_SF2_FLOOR, sf2_cap);
    p[1] = p[1].clamp(LOG_LS_BOUNDS.0, LOG_LS_BOUNDS.1);
    p[2] = p[2].clamp(LOG_LS_BOUNDS.0, LOG_LS_BOUNDS.1);
}

/// Gradient ascent (Adam) on the log-hyperparameters from several starts.
fn optimize_hyper(
    xs: &[[f64; 2]],
    y: &DVector<f64>,
    opts: &GpFitOptions,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    let base_sf2 = var.max(1e-12).ln();
    let sf2_cap = (var.max(1e-12) * 1e4).ln();
    let mut best: Option<(f64, [f64; 3])> = None;
    for r in 0..opts.restarts.max(1) {
        let mut p = if r == 0 {
            [base_sf2, 0.0, 0.0]
        } else {
            [
                base_sf2 + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.5),
                rng.random_range(-1.0..1.5),
            ]
        };
        clamp_logp(&mut p, sf2_cap);
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        let mut local_best = None::<(f64, [f64; 3])>;
        for t in 1..=opts.iterations {
            let (lml, g) = match lml_and_grad(xs, y, &p) {
                Ok(x) => x,
                Err(_) => break,
            };
            if local_best.is_none_or(|(b, _)| lml > b) {
                local_best = Some((lml, p));
            }
            for k in 0..3 {
                m[k] = 0.9 * m[k] + 0.1 * g[k];
                v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
                let mh = m[k] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[k] / (1.0 - 0.999f64.powi(t as i32));
                p[k] += opts.learning_rate * mh / (vh.sqrt() + 1e-8);
            }
            clamp_logp(&mut p, sf2_cap);
        }
        if let Ok((lml, _)) = lml_and_grad(xs, y, &p) {
            if local_best.is_none_or(|(b, _)| lml > b) {
                local_best = Some((lml, p));
            }
        }
        if let Some((lml, p)) = local_best {
            if best.is_none_or(|(b, _)| lml > b) {
                best = Some((lml, p));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Numerical("no hyperparameter start produced a valid kernel".into()))
}

/// Fits one GP per flattened coefficient entry.
pub fn fit_gp(
    thetas: &[ParameterPoint],
    coeff_sets: &[LatentCoefficients],
    opts: &GpFitOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GpSurrogate> {
    let n = thetas.len();
    if n == 0 || coeff_sets.len() != n {
        return Err(Error::Dimension(format!(
            "{n} parameter points for {} coefficient sets",
            coeff_sets.len()
        )));
    }
    for i in 0..n {
        for j in 0..i {
            if thetas[i] == thetas[j] {
                return Err(Error::Domain(format!(
                    "duplicate training parameter ({}, {})",
                    thetas[i].nu, thetas[i].omega
                )));
            }
        }
    }
    let latent_dim = coeff_sets[0].dim;
    if coeff_sets.iter().any(|c| c.dim != latent_dim) {
        return Err(Error::Dimension("coefficient sets of mixed latent dimension".into()));
    }

    let raw: Vec<[f64; 2]> = thetas.iter().map(|t| t.as_array()).collect();
    let mut input_mean = [0.0; 2];
    let mut input_std = [0.0; 2];
    for d in 0..2 {
        input_mean[d] = raw.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|x| (x[d] - input_mean[d]).powi(2)).sum::<f64>() / n as f64;
        input_std[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let inputs: Vec<[f64; 2]> = raw
        .iter()
        .map(|x| {
            [
                (x[0] - input_mean[0]) / input_std[0],
                (x[1] - input_mean[1]) / input_std[1],
            ]
        })
        .collect();
    let targets: Vec<Vec<f64>> = coeff_sets.iter().map(|c| c.flatten()).collect();
    let n_out = latent_dim * latent_dim + latent_dim;

    let mut outputs = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let mean = targets.iter().map(|t| t[k]).sum::<f64>() / n as f64;
        let y = DVector::from_iterator(n, targets.iter().map(|t| t[k] - mean));
        let logp = optimize_hyper(&inputs, &y, opts, rng)?;
        let hyper_ls = [logp[1].exp(), logp[2].exp()];
        let sf2 = logp[0].exp();
        let (chol, jitter) = factor(&kernel_matrix(&inputs, sf2, &hyper_ls))?;
        let alpha = chol.solve(&y);
        let l = chol.l();
        let chol_rm: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        outputs.push(OutputGp {
            mean,
            hyper: Hyperparameters {
                signal_variance: sf2,
                lengthscales: hyper_ls,
                jitter,
            },
            alpha: alpha.iter().copied().collect(),
            chol: chol_rm,
        });
    }
    Ok(GpSurrogate {
        latent_dim,
        thetas: thetas.to_vec(),
        input_mean,
        input_std,
        inputs,
        targets,
        outputs,
    })
}

/// Predictive mean and variance of every flattened coefficient entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GpSurrogate {
    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    fn standardize(&self, theta: &ParameterPoint) -> [f64; 2] {
        [
            (theta.nu - self.input_mean[0]) / self.input_std[0],
            (theta.omega - self.input_mean[1]) / self.input_std[1],
        ]
    }

    pub fn posterior(&self, theta: &ParameterPoint) -> Posterior {
        let x = self.standardize(theta);
        let n = self.n_train();
        let mut mean = Vec::with_capacity(self.outputs.len());
        let mut variance = Vec::with_capacity(self.outputs.len());
        let mut kstar = vec![0.0; n];
        let mut v = vec![0.0; n];
        for out in &self.outputs {
            let h = &out.hyper;
            for (ks, xi) in kstar.iter_mut().zip(&self.inputs) {
                *ks = kernel(&x, xi, h.signal_variance, &h.lengthscales);
            }
            mean.push(out.mean + kstar.iter().zip(&out.alpha).map(|(a, b)| a * b).sum::<f64>());
            // forward substitution L v = k*
            for i in 0..n {
                let row = &out.chol[i * n..(i + 1) * n];
                let s: f64 = (0..i).map(|j| row[j] * v[j]).sum();
                v[i] = (kstar[i] - s) / row[i];
            }
            let var = h.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
            variance.push(var.max(0.0));
        }
        Posterior { mean, variance }
    }

    pub fn posterior_mean_coefficients(&self, theta: &ParameterPoint) -> Result<LatentCoefficients> {
        LatentCoefficients::from_flat(self.latent_dim, &self.posterior(theta).mean)
    }

    /// Independent normal draws per output from the posterior at `theta`.
    pub fn sample_posterior(
        &self,
        theta: &ParameterPoint,
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LatentCoefficients>> {
        let post = self.posterior(theta);
        (0..n_samples)
            .map(|_| {
                let flat: Vec<f64> = post
                    .mean
                    .iter()
                    .zip(&post.variance)
                    .map(|(m, v)| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + v.sqrt() * e
                    })
                    .collect();
                LatentCoefficients::from_flat(self.latent_dim, &flat)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurrogateHeader {
    format_version: u32,
    latent_dim: usize,
    thetas: Vec<ParameterPoint>,
    input_mean: [f64; 2],
    input_std: [f64; 2],
    outputs: Vec<OutputHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputHeader {
    mean: f64,
    hyper: Hyperparameters,
}

/// Serializes a surrogate: JSON header with hyperparameters and
/// standardization, then targets (`n × outputs`), then per output `alpha`
/// and the Cholesky factor.
pub fn encode_surrogate(s: &GpSurrogate) -> Result<Vec<u8>> {
    let header = SurrogateHeader {
        format_version: crate::formats::FORMAT_VERSION,
        latent_dim: s.latent_dim,
        thetas: s.thetas.clone(),
        input_mean: s.input_mean,
        input_std: s.input_std,
        outputs: s
            .outputs
            .iter()
            .map(|o| OutputHeader {
                mean: o.mean,
                hyper: o.hyper,
            })
            .collect(),
    };
    let mut values: Vec<f64> = s.targets.iter().flatten().copied().collect();
    for o in &s.outputs {
        values.extend_from_slice(&o.alpha);
        values.extend_from_slice(&o.chol);
    }
    encode_container(SURROGATE_MAGIC, &header, &values)
}

pub fn decode_surrogate(bytes: &[u8]) -> Result<GpSurrogate> {
    let (h, values): (SurrogateHeader, Vec<f64>) = decode_container(SURROGATE_MAGIC, bytes)?;
    let n = h.thetas.len();
    let l = h.latent_dim;
    let n_out = l
        .checked_mul(l)
        .and_then(|x| x.checked_add(l))
        .ok_or_else(|| Error::Format("latent dimension overflows".into()))?;
    if n == 0 || l == 0 || h.outputs.len() != n_out {
        return Err(Error::Format(format!(
            "surrogate with {n} points and {} outputs for latent dimension {l}",
            h.outputs.len()
        )));
    }
    let expected = n
        .checked_add(1)
        .and_then(|np1| np1.checked_mul(n))
        .and_then(|per| per.checked_add(n))
        .and_then(|per| per.checked_mul(n_out));
    if expected != Some(values.len()) {
        return Err(Error::Format(format!(
            "payload has {} values, header implies {expected:?}",
            values.len()
        )));
    }
    if h.input_std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Format("input standard deviations must be positive".into()));
    }
    let (targets_flat, mut rest) = values.split_at(n * n_out);
    let targets: Vec<Vec<f64>> = targets_flat.chunks_exact(n_out).map(|c| c.to_vec()).collect();
    let mut outputs = Vec::with_capacity(n_out);
    for oh in &h.outputs {
        let (alpha, r) = rest.split_at(n);
        let (chol, r) = r.split_at(n * n);
        rest = r;
        outputs.push(OutputGp {
            mean: oh.mean,
            hyper: oh.hyper,
            alpha: alpha.to_vec(),
            chol: chol.to_vec(),
        });
    }
    let inputs = h
        .thetas
        .iter()
        .map(|t| {
            [
                (t.nu - h.input_mean[0]) / h.input_std[0],
                (t.omega - h.input_mean[1]) / h.input_std[1],
            ]
        })
        .collect();
    Ok(GpSurrogate {
        latent_dim: l,
        thetas: h.thetas,
        input_mean: h.input_mean,
        input_std: h.input_std,
        inputs,
        targets,
        outputs,
    })
}

/// What greedy selection needs to know about one candidate parameter.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub theta: ParameterPoint,
    /// Initial FOM frame.
    pub initial_state: Vec<f64>,
    /// Output times on which the prediction is decoded.
    pub times: Vec<f64>,
    /// Latent integration substep.
    pub substep: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyChoice {
    /// Index into the candidate list.
    pub index: usize,
    /// FOM-space variance statistic of every candidate.
    pub scores: Vec<f64>,
}

impl GreedyChoice {
    /// Candidate indices by decreasing score, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

/// Mean over all decoded space-time entries of the per-entry variance across
/// `n_samples` posterior coefficient draws. Diverging draws score `+∞`.
pub fn fom_variance(
    surrogate: &GpSurrogate,
    model: &AutoencoderModel,
    candidate: &Candidate,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let z0 = model.encode(&candidate.initial_state, 1)?;
    let samples = surrogate.sample_posterior(&candidate.theta, n_samples, rng)?;
    let m = candidate.times.len();
    let l = model.latent_dim();
    let mut mean = vec![0.0; m * model.n_u()];
    let mut m2 = vec![0.0; m * model.n_u()];
    for (s, coeffs) in samples.iter().enumerate() {
        let zs = match integrate_latent(&z0, &candidate.times, coeffs, candidate.substep) {
            Ok(zs) => zs,
            Err(Error::Numerical(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let decoded = model.decode(&transpose(&zs, m, l), m)?;
        // Welford update over samples
        let count = (s + 1) as f64;
        for ((mu, q), x) in mean.iter_mut().zip(m2.iter_mut()).zip(&decoded) {
            let d = x - *mu;
            *mu += d / count;
            *q += d * (x - *mu);
        }
    }
    let stat = m2.iter().sum::<f64>() / (n_samples as f64 * m2.len() as f64);
    Ok(if stat.is_finite() { stat } else { f64::INFINITY })
}

/// Picks the candidate whose sampled coefficients induce the largest decoded
/// variance.
pub fn greedy_select(
    surrogate: &GpSurrogate,
    model: &AutoencoderModel,
    candidates: &[Candidate],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GreedyChoice> {
    if candidates.is_empty() {
        return Err(Error::Exhausted);
    }
    let scores = candidates
        .iter()
        .map(|c| fom_variance(surrogate, model, c, n_samples.max(1), rng))
        .collect::<Result<Vec<f64>>>()?;
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    Ok(GreedyChoice { index, scores })
}
