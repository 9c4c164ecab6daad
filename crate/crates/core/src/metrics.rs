//! Maximum relative error between a reference trajectory and a prediction.

use crate::error::{Error, Result};
use crate::fom::{ParameterPoint, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub theta: ParameterPoint,
    /// `max_i frame_mae[i] / sigma`
    pub error: f64,
    /// Mean absolute error of every frame.
    pub frame_mae: Vec<f64>,
    /// Population standard deviation of `|u|` over all reference entries.
    pub sigma: f64,
}

/// Largest per-frame mean absolute error, normalized by the spread of the
/// reference magnitudes.
pub fn relative_error(fom: &Trajectory, pred: &Trajectory) -> Result<ErrorReport> {
    if fom.n_u != pred.n_u || fom.n_frames() != pred.n_frames() {
        return Err(Error::Dimension(format!(
            "reference is {}x{}, prediction {}x{}",
            fom.n_frames(),
            fom.n_u,
            pred.n_frames(),
            pred.n_u
        )));
    }
    let tol = 1e-12 * fom.final_time().abs().max(1.0);
    if let Some(i) = fom.times.iter().zip(&pred.times).position(|(a, b)| (a - b).abs() > tol) {
        return Err(Error::Domain(format!(
            "time grids differ at frame {i}: {} vs {}",
            fom.times[i], pred.times[i]
        )));
    }
    let n = fom.states.len() as f64;
    let mean = fom.states.iter().map(|u| u.abs()).sum::<f64>() / n;
    let var = fom.states.iter().map(|u| (u.abs() - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(
            "reference magnitudes have zero spread".into(),
        ));
    }
    let frame_mae: Vec<f64> = (0..fom.n_frames())
        .map(|j| {
            let (a, b) = (fom.frame(j), pred.frame(j));
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / fom.n_u as f64
        })
        .collect();
    let error = frame_mae.iter().fold(0.0, |m: f64, e| m.max(*e)) / sigma;
    Ok(ErrorReport {
        theta: fom.theta,
        error,
        frame_mae,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tr(times: Vec<f64>, states: Vec<f64>, n_u: usize) -> Trajectory {
        Trajectory::new(ParameterPoint::new(0.1, 1.0).unwrap(), times, states, n_u).unwrap()
    }

    #[test]
    fn two_frame_scalar_by_hand() {
        let fom = tr(vec![0.0, 1.0], vec![0.0, 2.0], 1);
        let pred = tr(vec![0.0, 1.0], vec![1.0, 3.0], 1);
        let r = relative_error(&fom, &pred).unwrap();
        assert_eq!(r.sigma, 1.0);
        assert_eq!(r.frame_mae, vec![1.0, 1.0]);
        assert_eq!(r.error, 1.0);
    }

    #[test]
    fn identical_is_zero() {
        let fom = tr(vec![0.0, 0.5, 1.0], vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4], 2);
        assert_eq!(relative_error(&fom, &fom).unwrap().error, 0.0);
    }

    #[test]
    fn errors() {
        let zero = tr(vec![0.0, 1.0], vec![0.0, 0.0], 1);
        assert!(matches!(relative_error(&zero, &zero), Err(Error::Degenerate(_))));
        let a = tr(vec![0.0, 1.0], vec![0.0, 2.0], 1);
        let b = tr(vec![0.0, 1.1], vec![0.0, 2.0], 1);
        assert!(matches!(relative_error(&a, &b), Err(Error::Domain(_))));
        let c = tr(vec![0.0, 1.0], vec![0.0, 2.0, 0.0, 1.0], 2);
        assert!(matches!(relative_error(&a, &c), Err(Error::Dimension(_))));
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..5, 2usize..6).prop_flat_map(|(n_u, frames)| {
            (
                prop::collection::vec(-5.0f64..5.0, n_u * frames),
                prop::collection::vec(-5.0f64..5.0, n_u * frames),
            )
        })
    }

    fn shaped(states: Vec<f64>) -> Trajectory {
        // frame count is recovered from the smallest n_u dividing evenly
        let n = states.len();
        let n_u = (1..5).rev().find(|k| n.is_multiple_of(*k) && n / k >= 2).unwrap_or(1);
        let times = (0..n / n_u).map(|i| i as f64).collect();
        tr(times, states, n_u)
    }

    proptest! {
        #[test]
        fn scale_invariance((u, v) in pair(), c in 0.01f64..100.0) {
            let (fom, pred) = (shaped(u.clone()), shaped(v.clone()));
            prop_assume!(relative_error(&fom, &fom).is_ok());
            let base = relative_error(&fom, &pred).unwrap().error;
            let scaled = relative_error(
                &shaped(u.iter().map(|x| c * x).collect()),
                &shaped(v.iter().map(|x| c * x).collect()),
            ).unwrap().error;
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn worsening_one_frame_never_lowers_error((u, v) in pair(), extra in 0.0f64..3.0, pick in 0usize..100) {
            let (fom, pred) = (shaped(u), shaped(v));
            prop_assume!(relative_error(&fom, &fom).is_ok());
            let before = relative_error(&fom, &pred).unwrap();
            let j = pick % fom.n_frames();
            let mut worse = pred.clone();
            for k in 0..worse.n_u {
                let i = j * worse.n_u + k;
                let d = worse.states[i] - fom.states[i];
                worse.states[i] += if d >= 0.0 { extra } else { -extra };
            }
            let after = relative_error(&fom, &worse).unwrap();
            prop_assert!(after.error >= before.error);
        }
    }
}
