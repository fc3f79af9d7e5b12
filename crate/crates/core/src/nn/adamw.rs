use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    shapes: Vec<Vec<usize>>,
    decay: Vec<bool>,
}

impl<F: Float> AdamW<F> {
    /// Zeroed moments for parameters of the given shapes; decay applies to all.
    pub fn new(shapes: &[&[usize]], config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|s| vec![F::zero(); s.iter().product()]).collect(),
            v: shapes.iter().map(|s| vec![F::zero(); s.iter().product()]).collect(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            decay: vec![true; shapes.len()],
        }
    }

    /// Restricts weight decay to the parameters flagged `true`.
    pub fn with_decay_mask(mut self, decay: Vec<bool>) -> Self {
        assert_eq!(decay.len(), self.shapes.len());
        self.decay = decay;
        self
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i].as_slice() || g.shape() != self.shapes[i].as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {:?}, got param {:?} grad {:?}",
                    self.shapes[i],
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.t as i32));
        let lr_f = F::of(lr);
        let eps = F::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { F::of(lr * c.weight_decay) } else { F::zero() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - decay * *w - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig { weight_decay: 0.0, ..Default::default() }
    }

    #[test]
    fn first_step_closed_form() {
        let mut opt = AdamW::<f64>::new(&[&[1]], no_decay());
        let mut w = scalar(1.0);
        opt.step(&mut [&mut w], &[&scalar(1.0)], 0.1).unwrap();
        assert_eq!(opt.t, 1);
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient() {
        let mut opt = AdamW::<f64>::new(&[&[1]], no_decay());
        let mut w = scalar(2.5);
        opt.step(&mut [&mut w], &[&scalar(0.0)], 0.1).unwrap();
        assert_eq!(w.data()[0], 2.5);

        let mut opt = AdamW::<f64>::new(&[&[1]], AdamWConfig { weight_decay: 0.05, ..Default::default() });
        let mut w = scalar(2.0);
        opt.step(&mut [&mut w], &[&scalar(0.0)], 0.1).unwrap();
        assert!((w.data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn decay_mask_respected() {
        let mut opt = AdamW::<f64>::new(&[&[1], &[1]], AdamWConfig::default()).with_decay_mask(vec![false, true]);
        let (mut a, mut b) = (scalar(1.0), scalar(1.0));
        opt.step(&mut [&mut a, &mut b], &[&scalar(0.0), &scalar(0.0)], 0.1).unwrap();
        assert_eq!(a.data()[0], 1.0);
        assert!(b.data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = AdamW::<f64>::new(&[&[2]], no_decay());
        let mut w = scalar(1.0);
        assert!(opt.step(&mut [&mut w], &[&scalar(1.0)], 0.1).is_err());
    }
}
