use crate::error::{contract, Result};
use crate::model::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction:
/// `θ ← θ − lr·m̂/(√v̂ + eps)`, so the first step is `−lr·g/(|g| + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Parameters,
    pub v: Parameters,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &Parameters, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return contract("optimizer state, parameters and gradients differ in layout");
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let state = self.m.iter_mut().zip(self.v.iter_mut());
        for (((name, p), (gname, g)), ((_, m), (_, v))) in
            params.iter_mut().zip(grads.iter()).zip(state)
        {
            if name != gname || p.shape() != g.shape() {
                return contract(format!("gradient {gname} does not match parameter {name}"));
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                let mi = beta1 * md[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i] as f64 + (1.0 - beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] = (pd[i] as f64 - step) as f32;
            }
        }
        Ok(())
    }
}
