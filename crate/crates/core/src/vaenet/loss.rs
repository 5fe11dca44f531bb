//! Reconstruction plus beta-weighted divergence loss.

use super::layers::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
}

/// `-0.5 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn kld<T: Scalar>(mu: &[T], logvar: &[T]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.f64(), lv.f64());
            1.0 + lv - m * m - lv.exp()
        })
        .sum::<f64>()
}

pub fn mse<T: Scalar>(xhat: &[T], target: &[T]) -> Result<f64> {
    if xhat.len() != target.len() || xhat.is_empty() {
        return Err(Error::ShapeMismatch { expected: vec![target.len()], got: vec![xhat.len()] });
    }
    let s: f64 = xhat.iter().zip(target).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(s / xhat.len() as f64)
}

pub fn loss<T: Scalar>(xhat: &[T], target: &[T], mu: &[T], logvar: &[T], beta: f64) -> Result<LossParts> {
    if mu.len() != logvar.len() {
        return Err(Error::LengthMismatch(format!("mu {} vs logvar {}", mu.len(), logvar.len())));
    }
    let recon = mse(xhat, target)?;
    let kld = kld(mu, logvar);
    Ok(LossParts { total: recon + beta * kld, recon, kld })
}

/// Gradients of `weight * loss` for one sample: `(d_xhat, d_mu, d_logvar)`.
pub(crate) fn loss_grads<T: Scalar>(
    xhat: &[T],
    target: &[T],
    mu: &[T],
    logvar: &[T],
    beta: f64,
    weight: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = T::of(2.0 * weight / xhat.len() as f64);
    let d_out = xhat.iter().zip(target).map(|(&a, &b)| c * (a - b)).collect();
    let bw = T::of(beta * weight);
    let half = T::of(0.5);
    let d_mu = mu.iter().map(|&m| bw * m).collect();
    let d_lv = logvar.iter().map(|&lv| bw * half * (lv.exp() - T::one())).collect();
    (d_out, d_mu, d_lv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_reconstruction_at_prior_is_zero() {
        let x = vec![0.5f64, -1.0, 2.0, 0.0];
        let l = loss(&x, &x, &[0.0; 3], &[0.0; 3], 1e-6).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn unit_mean_offset_gives_half() {
        let mut mu = vec![0.0f64; 8];
        mu[3] = 1.0;
        assert!((kld(&mu, &[0.0; 8]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn beta_weighting() {
        let recon = 0.1;
        let kld = 0.5;
        assert!((recon + 1e-6 * kld - 0.1000005f64).abs() < 1e-15);
        // mse of 0.1 and kld of 0.5 through the public entry point
        let x = [0.0f64];
        let t = [0.1f64.sqrt()];
        let l = loss(&x, &t, &[1.0], &[0.0], 1e-6).unwrap();
        assert!((l.total - 0.1000005).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(loss(&[0.0f64; 3], &[0.0; 4], &[0.0], &[0.0], 0.0).is_err());
        assert!(loss(&[0.0f64; 3], &[0.0; 3], &[0.0], &[0.0; 2], 0.0).is_err());
    }
}
