//! First-order optimizers over flat parameter vectors.
//!
//! Networks are flattened with `nn::flatten_params` before stepping, so one
//! optimizer state can cover several stacks trained jointly. A step with any
//! non-finite gradient is refused and leaves the parameters untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Minimize: parameters move against the gradient.
    Descent,
    /// Maximize: parameters move along the gradient.
    Ascent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimState {
    learning_rate: f64,
    method: Method,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimState {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimState {
            learning_rate,
            method: Method::Sgd,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(learning_rate: f64) -> Self {
        OptimState {
            learning_rate,
            method: Method::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one update in place. Moment buffers are sized on first use and
/// must match thereafter.
pub fn optimizer_step(
    state: &mut OptimState,
    params: &mut [f64],
    grads: &[f64],
    direction: Direction,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dimension(
            "optimizer_step",
            params.len().to_string(),
            grads.len().to_string(),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(
            "non-finite gradient; parameters left unchanged".into(),
        ));
    }
    let sign = match direction {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    match state.method {
        Method::Sgd => {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p += sign * state.learning_rate * g;
            }
            state.step += 1;
        }
        Method::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            if state.first_moment.is_empty() {
                state.first_moment = vec![0.0; params.len()];
                state.second_moment = vec![0.0; params.len()];
            }
            if state.first_moment.len() != params.len() {
                return Err(Error::dimension(
                    "optimizer_step (adam moments)",
                    state.first_moment.len().to_string(),
                    params.len().to_string(),
                ));
            }
            state.step += 1;
            let t = state.step as i32;
            let bias1 = 1.0 - beta1.powi(t);
            let bias2 = 1.0 - beta2.powi(t);
            for i in 0..params.len() {
                let g = grads[i];
                let m = &mut state.first_moment[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                let v = &mut state.second_moment[i];
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                params[i] += sign * state.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sgd_descent_moves_against_the_gradient() {
        let mut state = OptimState::sgd(0.1);
        let mut params = vec![1.0, -1.0];
        optimizer_step(&mut state, &mut params, &[2.0, -4.0], Direction::Descent).unwrap();
        assert_abs_diff_eq!(params[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(params[1], -0.6, epsilon = 1e-12);
    }

    #[test]
    fn sgd_ascent_moves_along_the_gradient() {
        let mut state = OptimState::sgd(0.1);
        let mut params = vec![0.0];
        optimizer_step(&mut state, &mut params, &[3.0], Direction::Ascent).unwrap();
        assert_abs_diff_eq!(params[0], 0.3, epsilon = 1e-12);
    }

    // First Adam step has magnitude ~lr regardless of gradient scale because
    // the bias-corrected moments cancel.
    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        for &g in &[1e-4, 1.0, 1e4] {
            let mut state = OptimState::adam(0.001);
            let mut params = vec![0.0];
            optimizer_step(&mut state, &mut params, &[g], Direction::Descent).unwrap();
            assert_abs_diff_eq!(params[0], -0.001, epsilon = 1e-6);
        }
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize (x - 3)^2; gradient 2(x - 3).
        let mut state = OptimState::adam(0.05);
        let mut params = vec![0.0];
        for _ in 0..2000 {
            let g = 2.0 * (params[0] - 3.0);
            optimizer_step(&mut state, &mut params, &[g], Direction::Descent).unwrap();
        }
        assert!((params[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_leaves_parameters_untouched() {
        let mut state = OptimState::adam(0.01);
        let mut params = vec![1.0, 2.0];
        optimizer_step(&mut state, &mut params, &[0.5, 0.5], Direction::Descent).unwrap();
        let before = params.clone();
        let err = optimizer_step(
            &mut state,
            &mut params,
            &[f64::NAN, 0.0],
            Direction::Descent,
        );
        assert!(err.is_err());
        assert_eq!(params, before);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut state = OptimState::sgd(0.1);
        let mut params = vec![0.0, 0.0];
        assert!(optimizer_step(&mut state, &mut params, &[1.0], Direction::Descent).is_err());
    }
}
