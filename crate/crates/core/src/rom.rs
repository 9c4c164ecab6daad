//! Autoencoder, linear latent dynamics and the rollout pipeline.
//!
//! Batches are stored feature-major: a batch of `m` samples of width `w` is a
//! `w × m` matrix whose columns are samples.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{gemm_nn, Tape, Tensor, Var};

/// Default frequency factor of the sinusoidal-network initialization.
pub const DEFAULT_FREQUENCY: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

/// Fully connected network with `sin` on hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Sinusoidal-network initialization with the default frequency factor.
pub fn init_mlp(widths: &[usize], seed: u64) -> Result<Mlp> {
    init_mlp_with_frequency(widths, seed, DEFAULT_FREQUENCY)
}

/// First layer `U(±ω/fan_in)`, deeper layers `U(±√(6/fan_in))` (the hidden
/// frequency folded into the weights), zero biases.
pub fn init_mlp_with_frequency(widths: &[usize], seed: u64, frequency: f64) -> Result<Mlp> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Domain(format!(
            "an MLP needs at least two positive widths, got {widths:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = if l == 0 {
                frequency / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                weight: Tensor::matrix(fan_out, fan_in, data).unwrap(),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(Mlp {
        widths: widths.to_vec(),
        layers,
    })
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Domain("an MLP needs at least one layer".into()))?;
        let mut widths = vec![first.weight.dims2()?.1];
        for layer in &layers {
            let (out, inp) = layer.weight.dims2()?;
            if inp != *widths.last().unwrap() || layer.bias.len() != out {
                return Err(Error::Dimension(format!(
                    "layer {} has weight {out}x{inp} and bias {} after width {}",
                    widths.len() - 1,
                    layer.bias.len(),
                    widths.last().unwrap()
                )));
            }
            widths.push(out);
        }
        Ok(Self { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass without recording, on a `in × m` batch.
    pub fn forward(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_width() * m {
            return Err(Error::Dimension(format!(
                "expected {}x{m} input, got {} values",
                self.input_width(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, inp) = layer.weight.dims2()?;
            let mut y = vec![0.0; out * m];
            for (row, b) in y.chunks_exact_mut(m).zip(layer.bias.data()) {
                row.fill(*b);
            }
            gemm_nn(layer.weight.data(), &h, out, inp, m, &mut y);
            if l != last {
                y.iter_mut().for_each(|v| *v = v.sin());
            }
            h = y;
        }
        Ok(h)
    }

    /// Registers every weight and bias on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (out, _) = l.weight.dims2().unwrap();
                let bias = Tensor::matrix(out, 1, l.bias.data().to_vec()).unwrap();
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(bias, trainable),
                )
            })
            .collect();
        MlpVars {
            layers,
            input_width: self.input_width(),
        }
    }

    /// Flat parameter views in checkpoint order (per layer: weight then bias).
    pub fn params(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
    }
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    /// `(weight, bias)` per layer; biases are `out × 1`.
    pub layers: Vec<(Var, Var)>,
    input_width: usize,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, m) = tape.value(x).dims2()?;
        if w != self.input_width {
            return Err(Error::Dimension(format!(
                "network expects width {}, got {w}",
                self.input_width
            )));
        }
        let ones = tape.constant(Tensor::matrix(1, m, vec![1.0; m])?);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(weight, bias)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(weight, h)?;
            let shift = tape.matmul(bias, ones)?;
            h = tape.add(lin, shift)?;
            if l != last {
                h = tape.sin(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Encoder/decoder pair with mirrored widths.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub seed: u64,
}

impl AutoencoderModel {
    /// `encoder_widths` runs from `N_u` to `L`; the decoder uses the reversed
    /// widths and independent weights.
    pub fn new(encoder_widths: &[usize], seed: u64) -> Result<Self> {
        Self::with_frequency(encoder_widths, seed, DEFAULT_FREQUENCY)
    }

    pub fn with_frequency(encoder_widths: &[usize], seed: u64, frequency: f64) -> Result<Self> {
        let mut rev = encoder_widths.to_vec();
        rev.reverse();
        Ok(Self {
            encoder: init_mlp_with_frequency(encoder_widths, seed, frequency)?,
            decoder: init_mlp_with_frequency(&rev, seed.wrapping_add(1), frequency)?,
            seed,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, seed: u64) -> Result<Self> {
        if encoder.output_width() != decoder.input_width()
            || encoder.input_width() != decoder.output_width()
        {
            return Err(Error::Dimension(format!(
                "encoder {:?} and decoder {:?} do not compose",
                encoder.widths(),
                decoder.widths()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            seed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn n_u(&self) -> usize {
        self.encoder.input_width()
    }

    /// Encodes `m` frames given feature-major (`N_u × m`).
    pub fn encode(&self, u: &[f64], m: usize) -> Result<Vec<f64>> {
        self.encoder.forward(u, m)
    }

    /// Decodes `m` latent vectors given feature-major (`L × m`).
    pub fn decode(&self, z: &[f64], m: usize) -> Result<Vec<f64>> {
        self.decoder.forward(z, m)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AutoencoderVars {
        AutoencoderVars {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
}

impl AutoencoderVars {
    pub fn encode(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        self.encoder.forward(tape, u)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward(tape, z)
    }
}

/// `A` (`L × L`, row-major) and `b` (`L`) of `ż = A z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCoefficients {
    pub dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LatentCoefficients {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            a: vec![0.0; dim * dim],
            b: vec![0.0; dim],
        }
    }

    pub fn new(dim: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim || b.len() != dim {
            return Err(Error::Dimension(format!(
                "latent dimension {dim} needs {} + {dim} coefficients, got {} + {}",
                dim * dim,
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite latent coefficient".into()));
        }
        Ok(Self { dim, a, b })
    }

    /// `[vec(A) row-major, b]`, length `L² + L`.
    pub fn flatten(&self) -> Vec<f64> {
        self.a.iter().chain(&self.b).copied().collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != dim * dim + dim {
            return Err(Error::Dimension(format!(
                "expected {} flattened coefficients, got {}",
                dim * dim + dim,
                flat.len()
            )));
        }
        Self::new(dim, flat[..dim * dim].to_vec(), flat[dim * dim..].to_vec())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CoeffVars {
        CoeffVars {
            a: tape.leaf(
                Tensor::matrix(self.dim, self.dim, self.a.clone()).unwrap(),
                trainable,
            ),
            b: tape.leaf(Tensor::matrix(self.dim, 1, self.b.clone()).unwrap(), trainable),
            dim: self.dim,
        }
    }

    /// `A z + b` without recording.
    pub fn rhs(&self, z: &[f64], out: &mut [f64]) {
        let l = self.dim;
        for ((o, row), b) in out.iter_mut().zip(self.a.chunks_exact(l)).zip(&self.b) {
            *o = b + row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoeffVars {
    pub a: Var,
    pub b: Var,
    pub dim: usize,
}

/// `A z + b` for a `L × m` batch of latent states.
pub fn latent_rhs(tape: &mut Tape, z: Var, coeffs: &CoeffVars) -> Result<Var> {
    let (l, m) = tape.value(z).dims2()?;
    if l != coeffs.dim {
        return Err(Error::Dimension(format!(
            "latent state has {l} rows, coefficients expect {}",
            coeffs.dim
        )));
    }
    let az = tape.matmul(coeffs.a, z)?;
    let ones = tape.constant(Tensor::matrix(1, m, vec![1.0; m])?);
    let b = tape.matmul(coeffs.b, ones)?;
    tape.add(az, b)
}

/// Step sizes for an RK4 step: one for all columns or one per column.
#[derive(Debug, Clone)]
pub enum StepSize {
    Uniform(f64),
    PerColumn(Arc<[f64]>),
}

impl StepSize {
    fn apply(&self, tape: &mut Tape, x: Var, factor: f64) -> Result<Var> {
        match self {
            StepSize::Uniform(h) => Ok(tape.scale(x, factor * h)),
            StepSize::PerColumn(h) => {
                let f: Arc<[f64]> = h.iter().map(|h| factor * h).collect();
                tape.scale_columns(x, f)
            }
        }
    }
}

/// One classical RK4 step of `ż = A z + b`, recorded on the tape.
pub fn rk4_step(tape: &mut Tape, z: Var, h: &StepSize, coeffs: &CoeffVars) -> Result<Var> {
    if let StepSize::Uniform(h) = h {
        if !(*h > 0.0) {
            return Err(Error::Domain(format!("RK4 step must be positive, got {h}")));
        }
    }
    let k1 = latent_rhs(tape, z, coeffs)?;
    let d1 = h.apply(tape, k1, 0.5)?;
    let z2 = tape.add(z, d1)?;
    let k2 = latent_rhs(tape, z2, coeffs)?;
    let d2 = h.apply(tape, k2, 0.5)?;
    let z3 = tape.add(z, d2)?;
    let k3 = latent_rhs(tape, z3, coeffs)?;
    let d3 = h.apply(tape, k3, 1.0)?;
    let z4 = tape.add(z, d3)?;
    let k4 = latent_rhs(tape, z4, coeffs)?;
    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let s = tape.add_all(&[k1, k23, k4])?;
    let incr = h.apply(tape, s, 1.0 / 6.0)?;
    tape.add(z, incr)
}

/// Number of equal substeps covering `span` with steps no longer than `substep`.
pub fn substep_count(span: f64, substep: f64) -> usize {
    if span <= 0.0 {
        return 0;
    }
    // tolerate round-off in spans that are whole multiples of the substep
    ((span / substep) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Integrates a latent state (or batch) from `t0` to `t1` with
/// `⌈(t1 − t0)/substep⌉` equal RK4 steps.
pub fn rollout_latent(
    tape: &mut Tape,
    z0: Var,
    t0: f64,
    t1: f64,
    coeffs: &CoeffVars,
    substep: f64,
) -> Result<Var> {
    if t1 < t0 {
        return Err(Error::Domain(format!("rollout end {t1} precedes start {t0}")));
    }
    if !(substep > 0.0) {
        return Err(Error::Domain(format!("substep must be positive, got {substep}")));
    }
    let n = substep_count(t1 - t0, substep);
    let h = StepSize::Uniform((t1 - t0) / n.max(1) as f64);
    let mut z = z0;
    for _ in 0..n {
        z = rk4_step(tape, z, &h, coeffs)?;
    }
    Ok(z)
}

/// Rolls every column of `z0` forward by its own horizon.
///
/// Column `j` takes `⌈horizon_j / substep⌉` equal steps, exactly as
/// [`rollout_latent`] would; columns that finish early take zero-length steps
/// for the remaining iterations, which leaves them unchanged.
pub fn rollout_latent_batch(
    tape: &mut Tape,
    z0: Var,
    horizons: &[f64],
    coeffs: &CoeffVars,
    substep: f64,
) -> Result<Var> {
    let (_, m) = tape.value(z0).dims2()?;
    if horizons.len() != m {
        return Err(Error::Dimension(format!(
            "{} horizons for {m} latent columns",
            horizons.len()
        )));
    }
    if let Some(h) = horizons.iter().find(|h| !(**h >= 0.0)) {
        return Err(Error::Domain(format!("negative rollout horizon {h}")));
    }
    if !(substep > 0.0) {
        return Err(Error::Domain(format!("substep must be positive, got {substep}")));
    }
    let counts: Vec<usize> = horizons.iter().map(|&h| substep_count(h, substep)).collect();
    let steps = counts.iter().copied().max().unwrap_or(0);
    let mut z = z0;
    for s in 0..steps {
        let h: Arc<[f64]> = horizons
            .iter()
            .zip(&counts)
            .map(|(&dt, &n)| if s < n { dt / n as f64 } else { 0.0 })
            .collect();
        z = rk4_step(tape, z, &StepSize::PerColumn(h), coeffs)?;
    }
    Ok(z)
}

/// Encode, integrate the latent state by `dt`, decode.
#[allow(clippy::too_many_arguments)]
pub fn rollout_predict(
    tape: &mut Tape,
    model: &AutoencoderVars,
    coeffs: &CoeffVars,
    u_t: Var,
    t: f64,
    dt: f64,
    substep: f64,
) -> Result<Var> {
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("rollout horizon must be nonnegative, got {dt}")));
    }
    let z = model.encode(tape, u_t)?;
    let z = rollout_latent(tape, z, t, t + dt, coeffs, substep)?;
    model.decode(tape, z)
}

/// One RK4 step on a plain latent vector.
pub fn rk4_step_plain(z: &mut [f64], h: f64, coeffs: &LatentCoefficients) {
    let l = z.len();
    let mut k = [vec![0.0; l], vec![0.0; l], vec![0.0; l], vec![0.0; l]];
    let mut stage = vec![0.0; l];
    coeffs.rhs(z, &mut k[0]);
    for i in 0..l {
        stage[i] = z[i] + 0.5 * h * k[0][i];
    }
    coeffs.rhs(&stage, &mut k[1]);
    for i in 0..l {
        stage[i] = z[i] + 0.5 * h * k[1][i];
    }
    coeffs.rhs(&stage, &mut k[2]);
    for i in 0..l {
        stage[i] = z[i] + h * k[2][i];
    }
    coeffs.rhs(&stage, &mut k[3]);
    for i in 0..l {
        z[i] += h / 6.0 * (k[0][i] + 2.0 * (k[1][i] + k[2][i]) + k[3][i]);
    }
}

/// Latent trajectory on `times` starting from `z0` at `times[0]`; returns
/// `times.len()` states, row-major.
pub fn integrate_latent(
    z0: &[f64],
    times: &[f64],
    coeffs: &LatentCoefficients,
    substep: f64,
) -> Result<Vec<f64>> {
    if z0.len() != coeffs.dim {
        return Err(Error::Dimension(format!(
            "initial latent state has {} entries, coefficients expect {}",
            z0.len(),
            coeffs.dim
        )));
    }
    if !(substep > 0.0) {
        return Err(Error::Domain(format!("substep must be positive, got {substep}")));
    }
    let mut z = z0.to_vec();
    let mut out = Vec::with_capacity(times.len() * z.len());
    out.extend_from_slice(&z);
    for w in times.windows(2) {
        let span = w[1] - w[0];
        if span < 0.0 {
            return Err(Error::Domain("integration times must be nondecreasing".into()));
        }
        let n = substep_count(span, substep);
        for _ in 0..n {
            rk4_step_plain(&mut z, span / n as f64, coeffs);
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "latent state diverged before t = {}",
                w[1]
            )));
        }
        out.extend_from_slice(&z);
    }
    Ok(out)
}

/// Predicts a full trajectory from one initial frame: encode, integrate on
/// `times`, decode every state. Returns `times.len() × N_u`, row-major.
pub fn predict_trajectory(
    model: &AutoencoderModel,
    coeffs: &LatentCoefficients,
    u0: &[f64],
    times: &[f64],
    substep: f64,
) -> Result<Vec<f64>> {
    let z0 = model.encode(u0, 1)?;
    let zs = integrate_latent(&z0, times, coeffs, substep)?;
    let (l, m) = (model.latent_dim(), times.len());
    let decoded = model.decode(&transpose(&zs, m, l), m)?;
    Ok(transpose(&decoded, model.n_u(), m))
}

/// Transposes a row-major `rows × cols` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = init_mlp(&[4, 3, 2], 9).unwrap();
        let b = init_mlp(&[4, 3, 2], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weight.shape(), &[3, 4]);
        assert_eq!(a.layers()[1].weight.shape(), &[2, 3]);
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&x| x == 0.0)));
        assert_ne!(a, init_mlp(&[4, 3, 2], 10).unwrap());
        assert!(matches!(init_mlp(&[], 0), Err(Error::Domain(_))));
        assert!(matches!(init_mlp(&[4], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn encode_decode_shapes() {
        let model = AutoencoderModel::new(&[6, 4, 2], 1).unwrap();
        assert_eq!(model.decoder.widths(), &[2, 4, 6]);
        let u: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = model.encode(&u, 3).unwrap();
        assert_eq!(z.len(), 2 * 3);
        let r = model.decode(&z, 3).unwrap();
        assert_eq!(r.len(), 18);
        assert!(r.iter().all(|x| x.is_finite()));
        assert_eq!(z, model.encode(&u, 3).unwrap());
        assert!(matches!(model.encode(&u, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        let model = AutoencoderModel::new(&[5, 7, 3], 4).unwrap();
        let u: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let x = tape.constant(Tensor::matrix(5, 2, u.clone()).unwrap());
        let z = vars.encode(&mut tape, x).unwrap();
        let y = vars.decode(&mut tape, z).unwrap();
        let plain = model.decode(&model.encode(&u, 2).unwrap(), 2).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn coeffs(a: &[f64], b: &[f64]) -> LatentCoefficients {
        LatentCoefficients::new(b.len(), a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn latent_rhs_cases() {
        let cases = [
            (coeffs(&[0.0; 4], &[0.0, 0.0]), [1.0, 2.0], [0.0, 0.0]),
            (coeffs(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]), [1.0, 2.0], [1.0, 2.0]),
            (coeffs(&[0.0; 4], &[1.0, -1.0]), [5.0, -3.0], [1.0, -1.0]),
        ];
        for (c, z, want) in cases {
            let mut tape = Tape::new();
            let cv = c.bind(&mut tape, false);
            let zv = tape.constant(Tensor::matrix(2, 1, z.to_vec()).unwrap());
            let r = latent_rhs(&mut tape, zv, &cv).unwrap();
            assert_eq!(tape.value(r).data(), &want);
        }
        let mut tape = Tape::new();
        let cv = coeffs(&[0.0; 4], &[0.0; 2]).bind(&mut tape, false);
        let z3 = tape.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        assert!(matches!(latent_rhs(&mut tape, z3, &cv), Err(Error::Dimension(_))));
    }

    #[test]
    fn rk4_scalar_stability_polynomial() {
        let (a, h, z0) = (-0.7, 0.3, 1.4);
        let mut tape = Tape::new();
        let cv = coeffs(&[a], &[0.0]).bind(&mut tape, false);
        let z = tape.constant(Tensor::matrix(1, 1, vec![z0]).unwrap());
        let z1 = rk4_step(&mut tape, z, &StepSize::Uniform(h), &cv).unwrap();
        let x = a * h;
        let want = z0 * (1.0 + x + x * x / 2.0 + x.powi(3) / 6.0 + x.powi(4) / 24.0);
        assert!((tape.value(z1).item() - want).abs() < 1e-15);
    }

    #[test]
    fn rk4_constant_field() {
        let mut tape = Tape::new();
        let cv = coeffs(&[0.0; 4], &[0.5, -2.0]).bind(&mut tape, false);
        let z = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let z1 = rk4_step(&mut tape, z, &StepSize::Uniform(0.1), &cv).unwrap();
        let v = tape.value(z1).data();
        assert!((v[0] - 1.05).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(rk4_step(&mut tape, z, &StepSize::Uniform(0.0), &cv).is_err());
    }

    #[test]
    fn rollout_identity_and_linear_cases() {
        let mut tape = Tape::new();
        let cv = coeffs(&[0.0], &[2.0]).bind(&mut tape, false);
        let z = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let same = rollout_latent(&mut tape, z, 0.4, 0.4, &cv, 0.1).unwrap();
        assert_eq!(same, z);
        let z1 = rollout_latent(&mut tape, z, 0.0, 0.5, &cv, 0.1).unwrap();
        assert!((tape.value(z1).item() - 4.0).abs() < 1e-14);
        assert!(matches!(
            rollout_latent(&mut tape, z, 1.0, 0.5, &cv, 0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn batch_rollout_matches_individual_rollouts() {
        let c = coeffs(&[-0.3, 0.8, -0.5, -0.2], &[0.1, -0.4]);
        let horizons = [0.0, 0.05, 0.23, 0.5];
        let z0 = [0.3, -1.0, 0.7, 0.2, -0.4, 1.1, 0.0, 0.5];
        let mut tape = Tape::new();
        let cv = c.bind(&mut tape, false);
        let zb = tape.constant(Tensor::matrix(2, 4, z0.to_vec()).unwrap());
        let out = rollout_latent_batch(&mut tape, zb, &horizons, &cv, 0.1).unwrap();
        let batch = tape.value(out).data().to_vec();
        for (j, &h) in horizons.iter().enumerate() {
            let zj = tape.constant(Tensor::matrix(2, 1, vec![z0[j], z0[4 + j]]).unwrap());
            let r = rollout_latent(&mut tape, zj, 1.0, 1.0 + h, &cv, 0.1).unwrap();
            let v = tape.value(r).data();
            assert!((v[0] - batch[j]).abs() < 1e-15 && (v[1] - batch[4 + j]).abs() < 1e-15);
        }
        // zero horizon leaves the column untouched
        assert_eq!(batch[0], z0[0]);
        assert_eq!(batch[4], z0[4]);
    }

    #[test]
    fn plain_and_taped_integration_agree() {
        let c = coeffs(&[-0.3, 0.8, -0.5, -0.2], &[0.1, -0.4]);
        let times = [0.0, 0.13, 0.31, 0.5];
        let zs = integrate_latent(&[1.0, -1.0], &times, &c, 0.05).unwrap();
        let mut tape = Tape::new();
        let cv = c.bind(&mut tape, false);
        let mut z = tape.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        for (k, w) in times.windows(2).enumerate() {
            z = rollout_latent(&mut tape, z, w[0], w[1], &cv, 0.05).unwrap();
            let v = tape.value(z).data();
            assert!((v[0] - zs[2 * (k + 1)]).abs() < 1e-14);
            assert!((v[1] - zs[2 * (k + 1) + 1]).abs() < 1e-14);
        }
    }

    #[test]
    fn substep_counts() {
        assert_eq!(substep_count(0.0, 0.1), 0);
        assert_eq!(substep_count(0.3, 0.1), 3);
        assert_eq!(substep_count(0.30001, 0.1), 4);
        assert_eq!(substep_count(0.02, 0.02), 1);
    }

    #[test]
    fn coefficient_flattening() {
        let c = coeffs(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0]);
        assert_eq!(c.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(LatentCoefficients::from_flat(2, &c.flatten()).unwrap(), c);
        assert!(LatentCoefficients::from_flat(2, &[0.0; 5]).is_err());
    }
}
