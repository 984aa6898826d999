use serde::{Deserialize, Serialize};

use crate::tensorcore::Tensor;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`. `decay[i]` selects the tensors that
    /// receive weight decay.
    pub fn step(
        &self,
        lr: f64,
        params: &mut [Tensor],
        grads: &[Tensor],
        decay: &[bool],
        state: &mut AdamState,
    ) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.m.len());
        state.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(state.t as i32);
        let c2 = 1.0 - b2.powi(state.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decay[i] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = *w * shrink - lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
