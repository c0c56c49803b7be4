//! SGD with momentum and Adam, both with L2 weight decay folded into the
//! gradient (`g ← g + wd·w`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or Adam's β1.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerSettings {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("momentum/beta terms must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// One parameter's view for an update step.
pub struct ParamUpdate<'a, T> {
    pub value: &'a mut [T],
    pub grad: Option<&'a [T]>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    settings: OptimizerSettings,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(settings: OptimizerSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Optimizer {
            settings,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.settings.lr = lr;
        Ok(())
    }

    /// Updates every parameter in place. Parameters must be passed in the
    /// same order on every call; slot `i` of the optimizer state belongs to
    /// parameter `i`.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_, T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            let g = p.grad.ok_or(Error::MissingGradient(i))?;
            if g.len() != p.value.len() {
                return Err(Error::shape("optimizer", &[p.value.len()], &[g.len()]));
            }
        }
        self.begin_step();
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.expect("checked above");
            self.update(i, p.value, g, p.decay)?;
        }
        Ok(())
    }

    /// Starts a new step; call once before the [`Optimizer::update`] calls
    /// of that step.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Updates parameter slot `i` in place.
    pub fn update(&mut self, i: usize, value: &mut [T], grad: &[T], decay: bool) -> Result<()> {
        if grad.len() != value.len() {
            return Err(Error::shape("optimizer", &[value.len()], &[grad.len()]));
        }
        if self.steps == 0 {
            return Err(Error::invalid("optimizer update before begin_step"));
        }
        while self.first.len() <= i {
            self.first.push(Vec::new());
            self.second.push(Vec::new());
        }
        if self.first[i].is_empty() {
            self.first[i] = vec![T::ZERO; value.len()];
            if self.settings.kind == OptimizerKind::Adam {
                self.second[i] = vec![T::ZERO; value.len()];
            }
        }
        if self.first[i].len() != value.len() {
            return Err(Error::shape("optimizer state", &[self.first[i].len()], &[value.len()]));
        }
        let s = self.settings;
        let lr = T::from_f64(s.lr);
        let wd = if decay { T::from_f64(s.weight_decay) } else { T::ZERO };
        let mu = T::from_f64(s.momentum);
        match s.kind {
            OptimizerKind::Sgd => {
                for ((w, &gi), vi) in value.iter_mut().zip(grad).zip(self.first[i].iter_mut()) {
                    let gi = gi + wd * *w;
                    *vi = mu * *vi + gi;
                    *w -= lr * *vi;
                }
            }
            OptimizerKind::Adam => {
                let b2 = T::from_f64(s.beta2);
                let c1 = T::from_f64(1.0 - s.momentum.powf(self.steps as f64));
                let c2 = T::from_f64(1.0 - s.beta2.powf(self.steps as f64));
                let eps = T::from_f64(s.eps);
                let (m, v) = (&mut self.first[i], &mut self.second[i]);
                for (((w, &gi), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let gi = gi + wd * *w;
                    *mi = mu * *mi + (T::ONE - mu) * gi;
                    *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        if let Some(index) = value.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value in parameter {i} at index {index} after update"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: &mut Optimizer<f64>, w: &mut [f64], g: &[f64]) -> Result<()> {
        opt.step(&mut [ParamUpdate {
            value: w,
            grad: Some(g),
            decay: true,
        }])
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerSettings::sgd(0.1, 0.0, 0.0)).unwrap();
        let mut w = [1.0];
        run(&mut opt, &mut w, &[1.0]).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_hand_unrolled() {
        let mut opt = Optimizer::new(OptimizerSettings::sgd(0.1, 0.9, 0.0)).unwrap();
        let mut w = [1.0];
        run(&mut opt, &mut w, &[1.0]).unwrap();
        run(&mut opt, &mut w, &[1.0]).unwrap();
        // Velocities 1.0 then 1.9.
        assert!((w[0] - (1.0 - 0.1 * (1.0 + 1.9))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let mut opt = Optimizer::new(OptimizerSettings::sgd(0.1, 0.0, 1e-4)).unwrap();
        let mut w = [2.0];
        run(&mut opt, &mut w, &[0.5]).unwrap();
        assert!((w[0] - (2.0 - 0.1 * (0.5 + 1e-4 * 2.0))).abs() < 1e-15);
        let mut w = [2.0];
        let mut opt = Optimizer::new(OptimizerSettings::sgd(0.1, 0.0, 1e-4)).unwrap();
        opt.step(&mut [ParamUpdate {
            value: &mut w,
            grad: Some(&[0.5]),
            decay: false,
        }])
        .unwrap();
        assert!((w[0] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerSettings::adam(1e-3, 0.0)).unwrap();
        let mut w = [0.5, -0.5];
        opt.step(&mut [ParamUpdate {
            value: &mut w,
            grad: Some(&[3.0, -0.01]),
            decay: false,
        }])
        .unwrap();
        assert!((w[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-0.5 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_and_bad_settings() {
        let mut opt = Optimizer::<f64>::new(OptimizerSettings::sgd(0.1, 0.9, 0.0)).unwrap();
        let mut w = [1.0];
        let err = opt
            .step(&mut [ParamUpdate {
                value: &mut w,
                grad: None,
                decay: true,
            }])
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(0)));
        assert!(Optimizer::<f64>::new(OptimizerSettings::sgd(0.0, 0.9, 0.0)).is_err());
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut opt = Optimizer::new(OptimizerSettings::sgd(1e300, 0.0, 0.0)).unwrap();
        let mut w = [1.0];
        assert!(matches!(run(&mut opt, &mut w, &[1e300]), Err(Error::Numerical(_))));
    }
}
