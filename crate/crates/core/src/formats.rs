//! On-disk formats.
//!
//! Trajectories (`.lsdt`), little-endian:
//!
//! ```text
//! "LSDT" | u32 version = 1 | u32 p | f64 θ[p] | u32 n_frames | u32 N_u
//!        | f64 times[n_frames] | f64 states[n_frames · N_u]
//! ```
//!
//! Checkpoints (model `.lsdm`, surrogate `.lsdg`) share one container:
//!
//! ```text
//! magic[4] | u32 version = 1 | u32 header_len | header (JSON, UTF-8)
//!          | u64 n_values | f64 values[n_values]
//! ```
//!
//! Model values are stored per encoder layer (weight row-major, then bias),
//! followed by the decoder layers in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{ParameterPoint, Trajectory};
use crate::rom::{AutoencoderModel, Layer, Mlp};
use crate::tape::Tensor;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"LSDT";
pub const MODEL_MAGIC: &[u8; 4] = b"LSDM";
pub const SURROGATE_MAGIC: &[u8; 4] = b"LSDG";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("array of {n} values overflows")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} = {n} does not fit in u32")))
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let n = traj.n_frames();
    let mut out = Vec::with_capacity(40 + 8 * (n + traj.states.len()));
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    put_f64s(&mut out, &traj.theta.as_array());
    out.extend_from_slice(&to_u32(n, "frame count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(traj.n_u, "node count")?.to_le_bytes());
    put_f64s(&mut out, &traj.times);
    put_f64s(&mut out, &traj.states);
    Ok(out)
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a trajectory file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let p = r.u32()? as usize;
    if p != 2 {
        return Err(Error::Format(format!("expected 2 parameters, file has {p}")));
    }
    let theta = r.f64s(2)?;
    let theta = ParameterPoint {
        nu: theta[0],
        omega: theta[1],
    };
    let n_frames = r.u32()? as usize;
    let n_u = r.u32()? as usize;
    if n_frames == 0 || n_u == 0 {
        return Err(Error::Format("empty trajectory".into()));
    }
    let expected = n_frames
        .checked_mul(n_u)
        .and_then(|s| s.checked_add(n_frames))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("trajectory dimensions overflow".into()))?;
    if expected != r.remaining() {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            r.remaining()
        )));
    }
    let times = r.f64s(n_frames)?;
    let states = r.f64s(n_frames * n_u)?;
    r.finish()?;
    Trajectory::new(theta, times, states, n_u)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, encode_trajectory(traj)?)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    decode_trajectory(&fs::read(path)?)
}

/// Checkpoint container: typed JSON header plus a flat `f64` payload.
pub fn encode_container<H: Serialize>(magic: &[u8; 4], header: &H, values: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + json.len() + 8 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(json.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    put_f64s(&mut out, values);
    Ok(out)
}

pub fn decode_container<H: for<'de> Deserialize<'de>>(
    magic: &[u8; 4],
    bytes: &[u8],
) -> Result<(H, Vec<f64>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let n = r.u64()?;
    let n = usize::try_from(n)
        .ok()
        .filter(|n| n.checked_mul(8) == Some(r.remaining()))
        .ok_or_else(|| {
            Error::Format(format!(
                "payload declares {n} values but {} bytes remain",
                r.remaining()
            ))
        })?;
    let values = r.f64s(n)?;
    r.finish()?;
    Ok((header, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format_version: u32,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub latent_dim: usize,
    pub n_u: usize,
    pub seed: u64,
}

pub fn encode_model(model: &AutoencoderModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        encoder_widths: model.encoder.widths().to_vec(),
        decoder_widths: model.decoder.widths().to_vec(),
        latent_dim: model.latent_dim(),
        n_u: model.n_u(),
        seed: model.seed,
    };
    let values: Vec<f64> = model
        .encoder
        .params()
        .chain(model.decoder.params())
        .flatten()
        .copied()
        .collect();
    encode_container(MODEL_MAGIC, &header, &values)
}

fn param_count(widths: &[usize]) -> Option<usize> {
    widths.windows(2).try_fold(0usize, |acc, w| {
        w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
    })
}

fn take_mlp(widths: &[usize], values: &mut &[f64]) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (inp, out) = (w[0], w[1]);
        let (weight, rest) = values.split_at(inp * out);
        let (bias, rest) = rest.split_at(out);
        *values = rest;
        layers.push(Layer {
            weight: Tensor::matrix(out, inp, weight.to_vec())?,
            bias: Tensor::vector(bias.to_vec()),
        });
    }
    Mlp::from_layers(layers)
}

pub fn decode_model(bytes: &[u8]) -> Result<AutoencoderModel> {
    let (h, values): (ModelHeader, Vec<f64>) = decode_container(MODEL_MAGIC, bytes)?;
    if h.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {}",
            h.format_version
        )));
    }
    let valid = |w: &[usize]| w.len() >= 2 && !w.contains(&0);
    if !valid(&h.encoder_widths) || !valid(&h.decoder_widths) {
        return Err(Error::Format("network widths must have ≥ 2 positive entries".into()));
    }
    let expected = param_count(&h.encoder_widths)
        .zip(param_count(&h.decoder_widths))
        .and_then(|(a, b)| a.checked_add(b));
    if expected != Some(values.len()) {
        return Err(Error::Format(format!(
            "widths need {expected:?} parameters, payload has {}",
            values.len()
        )));
    }
    let mut rest = values.as_slice();
    let encoder = take_mlp(&h.encoder_widths, &mut rest)?;
    let decoder = take_mlp(&h.decoder_widths, &mut rest)?;
    let model = AutoencoderModel::from_parts(encoder, decoder, h.seed)
        .map_err(|e| Error::Format(e.to_string()))?;
    if model.latent_dim() != h.latent_dim || model.n_u() != h.n_u {
        return Err(Error::Format("header dimensions disagree with widths".into()));
    }
    Ok(model)
}

pub fn write_model(path: &Path, model: &AutoencoderModel) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<AutoencoderModel> {
    decode_model(&fs::read(path)?)
}
