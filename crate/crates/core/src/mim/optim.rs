use super::model::ToyMimModel;
use crate::error::{MoodError, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: ToyMimModel,
}

impl SgdMomentum {
    pub fn new(model: &ToyMimModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(MoodError::Parameter(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(MoodError::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocity: model.zeros_like(),
        })
    }

    /// Applies one update with gradient `grad · grad_scale`.
    pub fn step(&mut self, model: &mut ToyMimModel, grad: &ToyMimModel, grad_scale: f64) {
        let grads = grad.params();
        for ((theta, v), g) in model
            .params_mut()
            .into_iter()
            .zip(self.velocity.params_mut())
            .zip(grads.iter())
        {
            debug_assert_eq!(theta.len(), g.data.len());
            for ((t, vel), &gv) in theta.iter_mut().zip(v.iter_mut()).zip(g.data) {
                *vel = self.momentum * *vel + grad_scale * gv;
                *t -= self.learning_rate * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mim::model::ModelDims;

    fn model() -> ToyMimModel {
        ToyMimModel::new(
            ModelDims {
                patch_size: 2,
                channels: 1,
                grid_rows: 1,
                grid_cols: 2,
                embed_dim: 4,
                depth: 1,
                heads: 1,
                recon_dim: 4,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = model();
        let start = m.clone();
        let mut g = m.zeros_like();
        g.mask_token[0] = 1.0;
        let mut opt = SgdMomentum::new(&m, 0.1, 0.9).unwrap();
        opt.step(&mut m, &g, 1.0);
        opt.step(&mut m, &g, 1.0);
        // 0.1 * 1 + 0.1 * 1.9
        assert!((start.mask_token[0] - m.mask_token[0] - 0.29).abs() < 1e-15);
        assert_eq!(m.mask_token[1], start.mask_token[1]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut m = model();
        let start = m.clone();
        let mut g = m.zeros_like();
        g.pos_embed.as_mut_slice().iter_mut().for_each(|v| *v = 3.0);
        let mut opt = SgdMomentum::new(&m, 0.0, 0.9).unwrap();
        for _ in 0..5 {
            opt.step(&mut m, &g, 1.0);
        }
        assert_eq!(m, start);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let m = model();
        assert!(SgdMomentum::new(&m, -1.0, 0.9).is_err());
        assert!(SgdMomentum::new(&m, 0.1, 1.0).is_err());
    }
}
