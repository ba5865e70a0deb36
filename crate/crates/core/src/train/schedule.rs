//! Validation-driven learning-rate plateau schedule with early stopping:
//! the rate is halved after `lr_patience` consecutive epochs without a new
//! best validation metric, and training stops after `stop_patience` such
//! epochs.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// New best metric; callers should checkpoint.
    Improved,
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    lr_patience: usize,
    stop_patience: usize,
    best: f64,
    since_best: usize,
    since_lr_drop: usize,
}

impl PlateauSchedule {
    pub fn new(lr_init: f64, decay: f64, lr_patience: usize, stop_patience: usize) -> Self {
        PlateauSchedule {
            lr: lr_init,
            decay,
            lr_patience,
            stop_patience,
            best: f64::NEG_INFINITY,
            since_best: 0,
            since_lr_drop: 0,
        }
    }

    pub fn resume(
        lr: f64,
        decay: f64,
        lr_patience: usize,
        stop_patience: usize,
        best: f64,
        since_best: usize,
        since_lr_drop: usize,
    ) -> Self {
        PlateauSchedule {
            lr,
            decay,
            lr_patience,
            stop_patience,
            best,
            since_best,
            since_lr_drop,
        }
    }

    /// Learning rate to use for the upcoming epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    pub fn since_lr_drop(&self) -> usize {
        self.since_lr_drop
    }

    /// Feeds one epoch's validation metric (higher is better).
    pub fn observe(&mut self, metric: f64) -> Verdict {
        if metric > self.best {
            self.best = metric;
            self.since_best = 0;
            self.since_lr_drop = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        self.since_lr_drop += 1;
        if self.since_lr_drop >= self.lr_patience {
            self.lr *= self.decay;
            self.since_lr_drop = 0;
        }
        if self.since_best >= self.stop_patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}
