use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// SGD with heavy-ball momentum: `v <- mu v + g; p <- p - lr v`.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    learning_rate: f64,
    momentum: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, learning_rate: f64, momentum: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self { vars, velocity, learning_rate, momentum }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let v = match vel.take() {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g.clone(),
            };
            var.set(&var.as_tensor().sub(&(&v * self.learning_rate)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_hand_rolled_momentum() {
        // minimise 0.5 * x^2 from x = 1: g = x
        let x = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let mut opt = SgdMomentum::new(vec![x.clone()], 0.1, 0.9);
        let (mut xr, mut vr) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let loss = (x.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            vr = 0.9 * vr + xr;
            xr -= 0.1 * vr;
        }
        let got = x.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
        assert!((got - xr).abs() < 1e-6, "{got} vs {xr}");
    }
}
