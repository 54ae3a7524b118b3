use serde::{Deserialize, Serialize};

/// Adaptive-moment optimizer with an optional cosine step-size decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Final step size as a fraction of `lr` at the end of the cosine schedule.
    pub min_lr_ratio: f64,
    pub cosine_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            min_lr_ratio: 0.05,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    total_steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize, total_steps: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            total_steps: total_steps.max(1) as u64,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if !self.cfg.cosine_decay {
            return self.cfg.lr;
        }
        let frac = (self.t as f64 / self.total_steps as f64).min(1.0);
        let floor = self.cfg.lr * self.cfg.min_lr_ratio;
        floor + 0.5 * (self.cfg.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.cfg.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g + wd * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(cfg, 2, 2000);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn cosine_schedule_ends_at_floor() {
        let mut opt = Adam::new(AdamConfig::default(), 1, 10);
        let mut p = [0.0];
        for _ in 0..10 {
            opt.step(&mut p, &[0.0]);
        }
        assert!((opt.current_lr() - 1e-3 * 0.05).abs() < 1e-12);
    }
}
