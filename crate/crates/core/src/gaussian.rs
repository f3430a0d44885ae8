//! Diagonal Gaussian distributions parameterized by mean and log standard
//! deviation, with the closed forms the training loops need: reparameterized
//! sampling, log-density with gradients, and KL divergence with gradients.
//!
//! Log-stds are clamped to `[LOG_STD_MIN, LOG_STD_MAX]` at construction.
//! Networks that output log-stds must treat clamped coordinates as having
//! zero gradient; see the mask returned by the latent heads in `vmae`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ln(1e-6); standard deviations below 1e-6 collapse the density.
pub const LOG_STD_MIN: f64 = -13.815510557964274;
/// ln(1e6).
pub const LOG_STD_MAX: f64 = 13.815510557964274;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagonalGaussian {
    /// Clamps `log_std` into the supported range. Errors on length mismatch
    /// or non-finite parameters.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::dimension(
                "DiagonalGaussian::new",
                format!("log_std of length {}", mean.len()),
                log_std.len().to_string(),
            ));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameters".into()));
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(DiagonalGaussian { mean, log_std })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|&v| v.exp()).collect()
    }

    /// Reparameterized draw: `mean + std * noise`, one noise value per
    /// dimension.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::dimension(
                "DiagonalGaussian::sample",
                self.dim().to_string(),
                noise.len().to_string(),
            ));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect())
    }
}

/// Gradients of a log-density with respect to the distribution parameters.
#[derive(Clone, Debug)]
pub struct LogProbGrad {
    pub wrt_mean: Vec<f64>,
    pub wrt_log_std: Vec<f64>,
}

/// Log-density of `z` under `dist`, plus gradients with respect to the mean
/// and log-std. Per coordinate:
///
///   log N(z) = -log_std - ln(2*pi)/2 - (z - mean)^2 / (2 * std^2)
///   d/d mean    = (z - mean) / std^2
///   d/d log_std = (z - mean)^2 / std^2 - 1
pub fn gaussian_log_prob(dist: &DiagonalGaussian, z: &[f64]) -> Result<(f64, LogProbGrad)> {
    if z.len() != dist.dim() {
        return Err(Error::dimension(
            "gaussian_log_prob",
            dist.dim().to_string(),
            z.len().to_string(),
        ));
    }
    let mut log_prob = 0.0;
    let mut wrt_mean = Vec::with_capacity(dist.dim());
    let mut wrt_log_std = Vec::with_capacity(dist.dim());
    for ((&m, &ls), &zi) in dist.mean.iter().zip(&dist.log_std).zip(z) {
        let inv_var = (-2.0 * ls).exp();
        let diff = zi - m;
        log_prob += -ls - 0.5 * LN_2PI - 0.5 * diff * diff * inv_var;
        wrt_mean.push(diff * inv_var);
        wrt_log_std.push(diff * diff * inv_var - 1.0);
    }
    if !log_prob.is_finite() {
        return Err(Error::Numerical("non-finite log probability".into()));
    }
    Ok((
        log_prob,
        LogProbGrad {
            wrt_mean,
            wrt_log_std,
        },
    ))
}

/// KL(q || p) for diagonal Gaussians, summed over dimensions:
///
///   sum_i [ ls_p - ls_q + (var_q + (mu_q - mu_p)^2) / (2 * var_p) - 1/2 ]
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    kl_diag_gaussians_with_grads(q, p).map(|(kl, _)| kl)
}

#[derive(Clone, Debug)]
pub struct KlGrads {
    pub q_mean: Vec<f64>,
    pub q_log_std: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_log_std: Vec<f64>,
}

pub fn kl_diag_gaussians_with_grads(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
) -> Result<(f64, KlGrads)> {
    if q.dim() != p.dim() {
        return Err(Error::dimension(
            "kl_diag_gaussians",
            q.dim().to_string(),
            p.dim().to_string(),
        ));
    }
    let dim = q.dim();
    let mut kl = 0.0;
    let mut grads = KlGrads {
        q_mean: Vec::with_capacity(dim),
        q_log_std: Vec::with_capacity(dim),
        p_mean: Vec::with_capacity(dim),
        p_log_std: Vec::with_capacity(dim),
    };
    for i in 0..dim {
        let (mq, lsq) = (q.mean[i], q.log_std[i]);
        let (mp, lsp) = (p.mean[i], p.log_std[i]);
        let var_q = (2.0 * lsq).exp();
        let inv_var_p = (-2.0 * lsp).exp();
        let diff = mq - mp;
        kl += lsp - lsq + 0.5 * (var_q + diff * diff) * inv_var_p - 0.5;
        grads.q_mean.push(diff * inv_var_p);
        grads.p_mean.push(-diff * inv_var_p);
        grads.q_log_std.push(var_q * inv_var_p - 1.0);
        grads
            .p_log_std
            .push(1.0 - (var_q + diff * diff) * inv_var_p);
    }
    if !kl.is_finite() {
        return Err(Error::Numerical("non-finite KL divergence".into()));
    }
    // The divergence is nonnegative; rounding of exp(2lsq)*exp(-2lsp) can
    // push the analytic sum a few ulp below zero when q is very close to p.
    Ok((kl.max(0.0), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numerical_gradient};
    use approx::assert_abs_diff_eq;

    #[test]
    fn sample_is_mean_plus_scaled_noise() {
        let d = DiagonalGaussian::new(vec![1.0, -2.0], vec![0.0, (2.0f64).ln()]).unwrap();
        let z = d.sample(&[0.5, -1.0]).unwrap();
        assert_abs_diff_eq!(z[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn log_std_is_clamped_at_construction() {
        let d = DiagonalGaussian::new(vec![0.0], vec![-100.0]).unwrap();
        assert_abs_diff_eq!(d.log_std()[0], LOG_STD_MIN, epsilon = 1e-12);
        let d = DiagonalGaussian::new(vec![0.0], vec![100.0]).unwrap();
        assert_abs_diff_eq!(d.log_std()[0], LOG_STD_MAX, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_of_standard_normal_at_zero() {
        let d = DiagonalGaussian::standard(3);
        let (lp, _) = gaussian_log_prob(&d, &[0.0, 0.0, 0.0]).unwrap();
        // Three times -ln(2*pi)/2.
        assert_abs_diff_eq!(lp, -1.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        let mean = vec![0.3, -0.7, 1.1];
        let log_std = vec![-0.2, 0.4, 0.0];
        let z = [0.5, -1.0, 1.5];

        let d = DiagonalGaussian::new(mean.clone(), log_std.clone()).unwrap();
        let (_, grad) = gaussian_log_prob(&d, &z).unwrap();

        let numeric_mean = numerical_gradient(
            |m| {
                let d = DiagonalGaussian::new(m.to_vec(), log_std.clone())?;
                Ok(gaussian_log_prob(&d, &z)?.0)
            },
            &mean,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grad.wrt_mean, &numeric_mean) < 1e-4);

        let numeric_ls = numerical_gradient(
            |ls| {
                let d = DiagonalGaussian::new(mean.clone(), ls.to_vec())?;
                Ok(gaussian_log_prob(&d, &z)?.0)
            },
            &log_std,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grad.wrt_log_std, &numeric_ls) < 1e-4);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let d = DiagonalGaussian::new(vec![0.4, -1.2], vec![0.3, -0.5]).unwrap();
        let kl = kl_diag_gaussians(&d, &d).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_against_standard_normal_closed_form() {
        // KL(N(m, s^2) || N(0, 1)) = (s^2 + m^2 - 1)/2 - ln(s), per dimension.
        let m = 0.8;
        let s: f64 = 1.7;
        let q = DiagonalGaussian::new(vec![m], vec![s.ln()]).unwrap();
        let p = DiagonalGaussian::standard(1);
        let kl = kl_diag_gaussians(&q, &p).unwrap();
        let expected = 0.5 * (s * s + m * m - 1.0) - s.ln();
        assert_abs_diff_eq!(kl, expected, epsilon = 1e-12);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let q_mean = vec![0.2, -0.4];
        let q_ls = vec![0.1, -0.3];
        let p_mean = vec![-0.5, 0.9];
        let p_ls = vec![0.25, 0.05];

        let q = DiagonalGaussian::new(q_mean.clone(), q_ls.clone()).unwrap();
        let p = DiagonalGaussian::new(p_mean.clone(), p_ls.clone()).unwrap();
        let (_, grads) = kl_diag_gaussians_with_grads(&q, &p).unwrap();

        let cases: Vec<(Vec<f64>, Box<dyn Fn(&[f64]) -> Result<f64>>, &[f64])> = vec![
            (
                q_mean.clone(),
                Box::new({
                    let (q_ls, p_mean, p_ls) = (q_ls.clone(), p_mean.clone(), p_ls.clone());
                    move |v: &[f64]| {
                        let q = DiagonalGaussian::new(v.to_vec(), q_ls.clone())?;
                        let p = DiagonalGaussian::new(p_mean.clone(), p_ls.clone())?;
                        kl_diag_gaussians(&q, &p)
                    }
                }),
                &grads.q_mean,
            ),
            (
                q_ls.clone(),
                Box::new({
                    let (q_mean, p_mean, p_ls) = (q_mean.clone(), p_mean.clone(), p_ls.clone());
                    move |v: &[f64]| {
                        let q = DiagonalGaussian::new(q_mean.clone(), v.to_vec())?;
                        let p = DiagonalGaussian::new(p_mean.clone(), p_ls.clone())?;
                        kl_diag_gaussians(&q, &p)
                    }
                }),
                &grads.q_log_std,
            ),
            (
                p_mean.clone(),
                Box::new({
                    let (q_mean, q_ls, p_ls) = (q_mean.clone(), q_ls.clone(), p_ls.clone());
                    move |v: &[f64]| {
                        let q = DiagonalGaussian::new(q_mean.clone(), q_ls.clone())?;
                        let p = DiagonalGaussian::new(v.to_vec(), p_ls.clone())?;
                        kl_diag_gaussians(&q, &p)
                    }
                }),
                &grads.p_mean,
            ),
            (
                p_ls.clone(),
                Box::new({
                    let (q_mean, q_ls, p_mean) = (q_mean.clone(), q_ls.clone(), p_mean.clone());
                    move |v: &[f64]| {
                        let q = DiagonalGaussian::new(q_mean.clone(), q_ls.clone())?;
                        let p = DiagonalGaussian::new(p_mean.clone(), v.to_vec())?;
                        kl_diag_gaussians(&q, &p)
                    }
                }),
                &grads.p_log_std,
            ),
        ];

        for (at, f, analytic) in cases {
            let numeric = numerical_gradient(f, &at, 1e-5).unwrap();
            assert!(max_relative_error(analytic, &numeric) < 1e-4);
        }
    }
}
