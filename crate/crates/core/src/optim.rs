//! Adam with coupled L2 weight decay over flat parameter slices.

use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// First/second moment accumulators, one block per parameter tensor, plus the
/// shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        AdamState {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over parallel parameter/gradient blocks. Weight decay is
/// added to the gradient before the moment updates (coupled form).
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    h: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len().max(state.m.len()),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    for (block, (grad_block, (m_block, v_block))) in params
        .iter_mut()
        .zip(grads.iter().zip(state.m.iter_mut().zip(state.v.iter_mut())))
    {
        if block.len() != grad_block.len() || block.len() != m_block.len() {
            return Err(Error::DimensionMismatch {
                expected: block.len(),
                got: grad_block.len(),
            });
        }
        for i in 0..block.len() {
            let g = grad_block[i] + h.weight_decay * block[i];
            m_block[i] = h.beta1 * m_block[i] + (1.0 - h.beta1) * g;
            v_block[i] = h.beta2 * v_block[i] + (1.0 - h.beta2) * g * g;
            let m_hat = m_block[i] / bias1;
            let v_hat = v_block[i] / bias2;
            block[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(w: &mut [f64], g: &[f64], state: &mut AdamState, h: &AdamHyper) {
        let mut blocks: Vec<&mut [f64]> = vec![w];
        adam_step(&mut blocks, &[g], state, h).unwrap();
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let h = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut w = vec![1.5, -0.25, 3.0];
        let mut state = AdamState::new(&[3]);
        step(&mut w, &[0.0, 0.0, 0.0], &mut state, &h);
        assert_eq!(w, vec![1.5, -0.25, 3.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g/(|g| + eps)
        let h = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut w = vec![1.0];
        let mut state = AdamState::new(&[1]);
        step(&mut w, &[1.0], &mut state, &h);
        let expected = 1.0 - h.lr * 1.0 / (1.0 + h.eps);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((1.0 - w[0]).abs() <= h.lr * (1.0 + 1e-6));
    }

    #[test]
    fn descends_quadratic() {
        let h = AdamHyper {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut w = vec![1.0];
        let mut state = AdamState::new(&[1]);
        let mut prev = f64::abs(w[0]);
        for _ in 0..10 {
            let g = vec![2.0 * w[0]];
            step(&mut w, &g, &mut state, &h);
            assert!(w[0].abs() < prev);
            prev = w[0].abs();
        }
    }

    #[test]
    fn deterministic() {
        let h = AdamHyper::default();
        let run = || {
            let mut w = vec![0.3, -0.8];
            let mut state = AdamState::new(&[2]);
            for i in 0..20 {
                let g = vec![0.1 * i as f64, -0.05];
                step(&mut w, &g, &mut state, &h);
            }
            (w, state)
        };
        let (w1, s1) = run();
        let (w2, s2) = run();
        assert_eq!(w1, w2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let h = AdamHyper::default();
        let mut w = vec![1.0, 2.0];
        let mut state = AdamState::new(&[2]);
        let mut blocks: Vec<&mut [f64]> = vec![&mut w];
        assert!(adam_step(&mut blocks, &[&[1.0][..]], &mut state, &h).is_err());
    }
}
