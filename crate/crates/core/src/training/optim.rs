use super::{Result, TrainError};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place. `names` labels errors.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TrainError::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != g.shape() {
                return Err(TrainError::Config(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(x)]
    }

    #[test]
    fn first_step_example() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        let mut p = one(1.0);
        opt.step(&mut p, &one(1.0), &[], 0.1).unwrap();
        assert!((p[0].item().unwrap() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_cases() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        let mut p = one(2.5);
        opt.step(&mut p, &one(0.0), &[], 0.1).unwrap();
        assert_eq!(p[0].item().unwrap(), 2.5);
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.3);
        opt.step(&mut p, &one(0.0), &[], 0.1).unwrap();
        assert!((p[0].item().unwrap() - 2.5 * (1.0 - 0.1 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_before_update() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(f64::NAN)];
        let names = vec!["a".to_string(), "b".to_string()];
        match opt.step(&mut p, &g, &names, 0.1) {
            Err(TrainError::NonFiniteGradient(n)) => assert_eq!(n, "b"),
            r => panic!("{r:?}"),
        }
        assert_eq!(p[0].item().unwrap(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
