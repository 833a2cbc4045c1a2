use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, lr: T, beta1: T, beta2: T, epsilon: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Standard hyper-parameters (β1 0.9, β2 0.999, ε 1e-8).
    pub fn with_lr(len: usize, lr: T) -> Self {
        Self::new(len, lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    /// One bias-corrected Adam update, in place.
    pub fn step_in_place(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::step_in_place`]: returns the next state and parameters.
pub fn adam_step<T: Scalar>(
    state: &AdamState<T>,
    params: &[T],
    grads: &[T],
) -> Result<(AdamState<T>, Vec<T>)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.step_in_place(&mut out, grads)?;
    Ok((next, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let state = AdamState::<f64>::with_lr(3, 1e-3);
        let grads = [2.5, -0.01, 7.0];
        let (next, p) = adam_step(&state, &[0.0; 3], &grads).unwrap();
        for (pi, g) in p.iter().zip(grads) {
            // m̂ = g, v̂ = g² ⇒ Δ = -lr·g/(|g|+ε)
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
        assert_eq!(next.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::<f32>::with_lr(2, 0.1);
        let mut p = vec![1.0f32, -2.0];
        for _ in 0..10 {
            state.step_in_place(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(state.t, 10);
    }

    #[test]
    fn shape_mismatch() {
        let state = AdamState::<f64>::with_lr(2, 0.1);
        assert!(adam_step(&state, &[0.0; 3], &[0.0; 2]).is_err());
        assert!(adam_step(&state, &[0.0; 2], &[0.0; 1]).is_err());
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [1.0, -2.0, 3.0];
        let mut state = AdamState::<f64>::with_lr(3, 1e-2);
        let mut p = vec![0.0; 3];
        let mut reached = None;
        for step in 1..=5000 {
            let g: Vec<f64> = p.iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
            state.step_in_place(&mut p, &g).unwrap();
            let dist = p.iter().zip(target).map(|(x, t)| (x - t).powi(2)).sum::<f64>().sqrt();
            if dist < 1e-4 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some());
    }

    #[test]
    fn replay_is_bit_identical() {
        let grads: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos() * 3.0])
            .collect();
        let run = || {
            let mut s = AdamState::<f64>::with_lr(2, 0.05);
            let mut p = vec![0.5, -0.5];
            for g in &grads {
                let (ns, np) = adam_step(&s, &p, g).unwrap();
                s = ns;
                p = np;
            }
            (s, p)
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(p1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(s1, s2);
        assert!(s1.v.iter().all(|&v| v >= 0.0));
    }
}
