use super::{NnError, Param, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with L2 weight decay folded into the gradient
/// (`g <- g + wd * theta`) and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self { weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every parameter with learning rate `lr`. Parameters
    /// must come in the same order on every call.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<(), NnError>
    where
        I: IntoIterator<Item = &'a mut Param<F>>,
    {
        let params: Vec<&mut Param<F>> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.value.len() != m.len()) {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = F::from(1.0 - BETA1.powi(t)).unwrap();
        let c2 = F::from(1.0 - BETA2.powi(t)).unwrap();
        let (b1, b2) = (F::from(BETA1).unwrap(), F::from(BETA2).unwrap());
        let (lr, wd, eps) = (F::from(lr).unwrap(), F::from(self.weight_decay).unwrap(), F::from(ADAM_EPS).unwrap());
        let one = F::one();
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = p;
            for (((theta, &g), m), v) in
                value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                let g = g + wd * *theta;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *theta = *theta - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` whenever the best validation score
/// has not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: None, bad_epochs: 0 }
    }

    /// Records one epoch's score (higher is better) and returns the
    /// learning rate for the next epoch.
    pub fn step(&mut self, score: f64) -> f64 {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
