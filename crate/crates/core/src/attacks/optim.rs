use crate::error::{Error, Result};

/// Bias-corrected Adam over one flat variable vector.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self::with_hyperparameters(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of `vars` in place. A non-finite gradient leaves both the
    /// variables and the moments untouched and reports divergence.
    pub fn step(&mut self, vars: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if vars.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("state {} vs vars {} / grads {}", self.m.len(), vars.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at index {i}")));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((x, &g), m), v) in vars.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Tracks strict minima of a loss sequence.
#[derive(Debug, Clone)]
pub struct BestTracker {
    best: f64,
    since: usize,
}

impl Default for BestTracker {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            since: 0,
        }
    }
}

impl BestTracker {
    /// Records `loss`; returns true on a new strict minimum.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    /// Observations since the last strict minimum.
    pub fn since_best(&self) -> usize {
        self.since
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Multiplies the learning rate by `factor` whenever `window` consecutive
/// observations bring no new strict minimum; the count restarts after a decay.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    window: usize,
    best: f64,
    count: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, window: usize) -> Self {
        Self {
            lr,
            factor,
            window,
            best: f64::INFINITY,
            count: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, loss: f64) {
        if loss < self.best {
            self.best = loss;
            self.count = 0;
            return;
        }
        self.count += 1;
        if self.window > 0 && self.count >= self.window {
            self.lr *= self.factor;
            self.count = 0;
        }
    }
}
