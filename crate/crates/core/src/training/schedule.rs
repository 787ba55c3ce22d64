use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `lr0 · factor^floor(epoch / every_n_epochs)`.
    StepDecay { factor: f64, every_n_epochs: usize },
    /// Multiply by `factor` once `patience` consecutive epochs pass without a
    /// new best validation loss, then start counting again.
    Plateau { factor: f64, patience: usize },
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    pub schedule: Schedule,
    pub initial_lr: f64,
    lr: f64,
    best: f64,
    wait: usize,
    pub reductions: usize,
}

impl Scheduler {
    pub fn new(schedule: Schedule, initial_lr: f64) -> Self {
        Self {
            schedule,
            initial_lr,
            lr: initial_lr,
            best: f64::INFINITY,
            wait: 0,
            reductions: 0,
        }
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Closed form of the step schedule; `None` for loss-driven schedules.
    pub fn step_decay_lr(&self, epoch: usize) -> Option<f64> {
        match self.schedule {
            Schedule::StepDecay { factor, every_n_epochs } => {
                Some(self.initial_lr * factor.powi((epoch / every_n_epochs.max(1)) as i32))
            }
            Schedule::Constant => Some(self.initial_lr),
            Schedule::Plateau { .. } => None,
        }
    }

    /// Records the validation loss of `epoch` and returns the rate for
    /// `epoch + 1`.
    pub fn next(&mut self, epoch: usize, validation_loss: f64) -> f64 {
        match self.schedule {
            Schedule::StepDecay { .. } | Schedule::Constant => {
                self.lr = self.step_decay_lr(epoch + 1).expect("closed-form schedule");
            }
            Schedule::Plateau { factor, patience } => {
                if validation_loss < self.best {
                    self.best = validation_loss;
                    self.wait = 0;
                } else {
                    self.wait += 1;
                    if self.wait >= patience {
                        self.lr *= factor;
                        self.reductions += 1;
                        self.wait = 0;
                    }
                }
            }
        }
        self.lr
    }
}

/// Stops after `patience` epochs without a new best validation loss;
/// patience 0 disables stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns `true` when training should stop after this epoch.
    pub fn update(&mut self, validation_loss: f64) -> bool {
        if validation_loss < self.best {
            self.best = validation_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.patience > 0 && self.wait >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_decay_example() {
        let s = Scheduler::new(
            Schedule::StepDecay {
                factor: 0.5,
                every_n_epochs: 5,
            },
            0.001,
        );
        assert_eq!(s.step_decay_lr(12), Some(0.00025));
    }

    #[test]
    fn step_decay_follows_epochs() {
        let mut s = Scheduler::new(
            Schedule::StepDecay {
                factor: 0.5,
                every_n_epochs: 5,
            },
            0.001,
        );
        let mut seen = vec![s.lr()];
        for e in 0..30 {
            seen.push(s.next(e, 1.0));
        }
        for (e, lr) in seen.iter().enumerate() {
            assert_eq!(*lr, 0.001 * 0.5f64.powi(e as i32 / 5));
        }
    }

    #[test]
    fn plateau_two_halvings_on_constant_losses() {
        let mut s = Scheduler::new(Schedule::Plateau { factor: 0.5, patience: 3 }, 1.0);
        for e in 0..7 {
            s.next(e, 2.0);
        }
        assert_eq!(s.reductions, 2);
        assert_eq!(s.lr(), 0.25);
    }

    #[test]
    fn plateau_never_fires_on_improving_losses() {
        let mut s = Scheduler::new(Schedule::Plateau { factor: 0.5, patience: 1 }, 1e-5);
        for e in 0..50 {
            assert_eq!(s.next(e, 10.0 - e as f64 * 0.1), 1e-5);
        }
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut es = EarlyStopping::new(2);
        assert!(!es.update(1.0));
        assert!(!es.update(1.5));
        assert!(!es.update(0.9));
        assert!(!es.update(0.95));
        assert!(es.update(0.91));
        let mut off = EarlyStopping::new(0);
        assert!((0..100).all(|_| !off.update(1.0)));
    }

    /// Counter reference: improvement resets, otherwise count and fire at
    /// `patience`.
    fn simulate(losses: &[f64], patience: usize) -> usize {
        let (mut best, mut wait, mut fired) = (f64::INFINITY, 0, 0);
        for &l in losses {
            if l < best {
                best = l;
                wait = 0;
            } else {
                wait += 1;
                if wait == patience {
                    fired += 1;
                    wait = 0;
                }
            }
        }
        fired
    }

    proptest! {
        #[test]
        fn plateau_matches_counter_simulation(
            losses in prop::collection::vec(0u8..6, 1..60),
            patience in 1usize..6,
        ) {
            let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
            let mut s = Scheduler::new(Schedule::Plateau { factor: 0.5, patience }, 1.0);
            for (e, &l) in losses.iter().enumerate() {
                s.next(e, l);
            }
            let fired = simulate(&losses, patience);
            prop_assert_eq!(s.reductions, fired);
            prop_assert_eq!(s.lr(), 0.5f64.powi(fired as i32));
        }
    }
}
