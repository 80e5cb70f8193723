use super::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

/// A named trainable array with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn reset_moments(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0 }
    }

    /// One bias-corrected update of every parameter with its gradient.
    pub fn update(&mut self, params: &mut [&mut Parameter], grads: &[&Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (p, g) in params.iter_mut().zip(grads) {
            let Parameter { value, m, v, .. } = &mut **p;
            for (((x, m), v), gv) in value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let mh = *m as f64 / bc1;
                let vh = *v as f64 / bc2;
                *x -= (c.lr * mh / (vh.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new("w", Tensor::new(&[3], vec![1.0, -1.0, 0.0]).unwrap());
        let g = Tensor::new(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.update(&mut [&mut p], &[&g]).unwrap();
        let d = p.value.data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] + 0.99).abs() < 1e-6);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Parameter::new("x", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            let g = Tensor::new(&[2], p.value.data().iter().map(|x| 2.0 * x).collect()).unwrap();
            opt.update(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.value.norm() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Parameter::new("x", Tensor::zeros(&[2]));
        let g = Tensor::zeros(&[3]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        assert!(opt.update(&mut [&mut p], &[&g]).is_err());
    }
}
