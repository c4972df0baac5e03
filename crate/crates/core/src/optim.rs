//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.5,
            beta2: 0.999,
            eps: ADAM_EPS,
        }
    }
}

/// First and second moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_shapes<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).unzip();
        AdamState { t: 0, m, v }
    }

    /// One update of every tensor in `params` with the matching gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64, h: AdamHyper) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - h.beta1.powf(self.t as f64);
        let c2 = 1.0 - h.beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Contract(format!("gradient {i} does not match its parameter")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

/// Linear decay to zero over the epochs after `decay_start`.
pub fn lr_at_epoch(base: f64, epoch: u64, epochs: u64, decay_start: u64) -> f64 {
    if epoch < decay_start || epochs <= decay_start {
        return base;
    }
    let span = (epochs - decay_start) as f64;
    base * (1.0 - (epoch - decay_start) as f64 / span).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut s = AdamState::for_shapes([&p]);
        s.step(&mut [&mut p], &[&g], 0.1, AdamHyper::default()).unwrap();
        // m̂ = g and v̂ = g² on the first step.
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(lr_at_epoch(1.0, 0, 10, 5), 1.0);
        assert_eq!(lr_at_epoch(1.0, 5, 10, 5), 1.0);
        assert!((lr_at_epoch(1.0, 7, 10, 5) - 0.6).abs() < 1e-15);
        assert_eq!(lr_at_epoch(1.0, 3, 3, 3), 1.0);
    }
}
