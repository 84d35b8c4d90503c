use candle_core::{Tensor, Var};

use crate::error::Result;

/// Adam with decoupled weight decay.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<(Var, Tensor, Tensor)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: i32,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let params = vars
            .into_iter()
            .map(|v| {
                let z = v.as_tensor().zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<_>>()?;
        Ok(Self { params, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0 })
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update. `grads[i]` belongs to the i-th variable; `None` leaves it untouched
    /// apart from weight decay.
    pub fn step(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for ((var, m, v), g) in self.params.iter_mut().zip(grads) {
            let theta = var.as_tensor().detach();
            let decayed = (&theta * (1.0 - lr * self.weight_decay))?;
            let Some(g) = g else {
                var.set(&decayed)?;
                continue;
            };
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&*m / bc1)? / denom)?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Option<Tensor>]) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![v.clone()], 0.0).unwrap();
        let g = Tensor::new(&[0.5f64, -3.0], &Device::Cpu).unwrap();
        opt.step(&[Some(g)], 0.1).unwrap();
        let out: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((out[0] - 0.9).abs() < 1e-6);
        assert!((out[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let v = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![v.clone()], 0.5).unwrap();
        opt.step(&[None], 0.1).unwrap();
        let out: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((out[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()), None];
        let before = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(before, 5.0);
        assert!((global_norm(&g).unwrap() - 1.0).abs() < 1e-12);
    }
}
