//! Adaptive-moment optimizers: Adam and Adafactor (factored second moment).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Adafactor without momentum, fixed learning rate, update clipping at RMS 1.
    pub fn adafactor(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adafactor,
            lr,
            beta1: 0.0,
            beta2: 0.8, // decay-rate exponent: beta2_t = 1 - t^-0.8
            eps: 1e-30,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Adam { m: Mat, v: Mat },
    Factored { row: Vec<f64>, col: Vec<f64>, m: Option<Mat> },
    Full { v: Mat, m: Option<Mat> },
}

/// Per-tensor optimizer state keyed by the caller's tensor id.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    slots: HashMap<usize, Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            slots: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, key: usize, param: &mut Mat, grad: &Mat) {
        assert!(self.t > 0, "begin_step must precede update");
        match self.cfg.kind {
            OptimizerKind::Adam => self.adam(key, param, grad),
            OptimizerKind::Adafactor => self.adafactor(key, param, grad),
        }
    }

    fn adam(&mut self, key: usize, param: &mut Mat, grad: &Mat) {
        let c = self.cfg;
        let t = self.t as i32;
        let slot = self.slots.entry(key).or_insert_with(|| Slot::Adam {
            m: Mat::zeros(param.dim()),
            v: Mat::zeros(param.dim()),
        });
        let Slot::Adam { m, v } = slot else { unreachable!() };
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        ndarray::Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                let g = g + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            });
    }

    fn adafactor(&mut self, key: usize, param: &mut Mat, grad: &Mat) {
        let c = self.cfg;
        let decay = 1.0 - (self.t as f64).powf(-c.beta2);
        let (rows, cols) = param.dim();
        let factored = rows > 1 && cols > 1;
        let slot = self.slots.entry(key).or_insert_with(|| {
            let m = (c.beta1 > 0.0).then(|| Mat::zeros((rows, cols)));
            if factored {
                Slot::Factored {
                    row: vec![0.0; rows],
                    col: vec![0.0; cols],
                    m,
                }
            } else {
                Slot::Full {
                    v: Mat::zeros((rows, cols)),
                    m,
                }
            }
        });
        let sq = grad.mapv(|g| g * g + c.eps);
        let mut update = match slot {
            Slot::Factored { row, col, .. } => {
                for (r, s) in sq.sum_axis(ndarray::Axis(1)).iter().enumerate() {
                    row[r] = decay * row[r] + (1.0 - decay) * s / cols as f64;
                }
                for (k, s) in sq.sum_axis(ndarray::Axis(0)).iter().enumerate() {
                    col[k] = decay * col[k] + (1.0 - decay) * s / rows as f64;
                }
                let row_mean = row.iter().sum::<f64>() / rows as f64;
                Mat::from_shape_fn((rows, cols), |(r, k)| {
                    let vhat = row[r] * col[k] / row_mean;
                    grad[[r, k]] / vhat.sqrt()
                })
            }
            Slot::Full { v, .. } => {
                v.zip_mut_with(&sq, |v, &s| *v = decay * *v + (1.0 - decay) * s);
                ndarray::Zip::from(grad).and(&*v).map_collect(|&g, &v| g / v.sqrt())
            }
            Slot::Adam { .. } => unreachable!(),
        };
        let rms = (update.mapv(|u| u * u).sum() / update.len() as f64).sqrt();
        let clip = (rms / 1.0).max(1.0);
        update /= clip;
        let momentum = match slot {
            Slot::Factored { m, .. } | Slot::Full { m, .. } => m.as_mut(),
            Slot::Adam { .. } => None,
        };
        if let Some(m) = momentum {
            m.zip_mut_with(&update, |m, &u| *m = c.beta1 * *m + (1.0 - c.beta1) * u);
            update = m.clone();
        }
        if c.weight_decay > 0.0 {
            param.mapv_inplace(|p| p * (1.0 - c.lr * c.weight_decay));
        }
        param.scaled_add(-c.lr, &update);
    }
}
