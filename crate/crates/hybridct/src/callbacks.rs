//! Training control: early stopping, learning-rate reduction on plateau, and
//! best-checkpoint tracking, driven purely by the validation-loss sequence.
//!
//! The controller is a standalone state machine so its behavior can be
//! verified against synthetic loss traces without touching a model.

/// Controller settings. `min_delta` is the smallest decrease that counts as
/// an improvement for both callbacks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CallbackConfig {
    pub initial_lr: f64,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    /// Epochs without improvement before the learning rate is reduced.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub min_delta: f64,
}

impl Default for CallbackConfig {
    fn default() -> Self {
        CallbackConfig {
            initial_lr: 1e-4,
            early_stop_patience: 5,
            plateau_patience: 3,
            lr_factor: 0.5,
            lr_min: 1e-6,
            min_delta: 1e-4,
        }
    }
}

/// What the caller must do after reporting an epoch's validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochDecision {
    /// Snapshot the current weights; this epoch is the best so far.
    pub checkpoint: bool,
    /// Stop training after this epoch and restore the best checkpoint.
    pub stop: bool,
}

/// State machine fed one validation loss per epoch.
#[derive(Debug, Clone)]
pub struct TrainingController {
    config: CallbackConfig,
    lr: f64,
    best_loss: f64,
    best_epoch: Option<usize>,
    early_stop_wait: usize,
    plateau_wait: usize,
    stopped_at: Option<usize>,
    epochs_seen: usize,
}

impl TrainingController {
    pub fn new(config: CallbackConfig) -> Self {
        TrainingController {
            lr: config.initial_lr,
            config,
            best_loss: f64::INFINITY,
            best_epoch: None,
            early_stop_wait: 0,
            plateau_wait: 0,
            stopped_at: None,
            epochs_seen: 0,
        }
    }

    /// Learning rate to use for the next epoch.
    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    /// Best (lowest) validation loss seen so far.
    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    /// 1-based epoch of the best validation loss.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// 1-based epoch after which training stopped early, if it did.
    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    /// Report the validation loss of the epoch that just finished.
    ///
    /// An improvement is a loss below `best - min_delta`; it resets both
    /// patience counters and requests a checkpoint. Otherwise the plateau
    /// counter may halve the learning rate (never below `lr_min`, taking
    /// effect from the next epoch) and the early-stop counter may end
    /// training.
    pub fn observe(&mut self, val_loss: f64) -> EpochDecision {
        self.epochs_seen += 1;
        let epoch = self.epochs_seen;
        if val_loss < self.best_loss - self.config.min_delta {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.early_stop_wait = 0;
            self.plateau_wait = 0;
            return EpochDecision { checkpoint: true, stop: false };
        }
        self.early_stop_wait += 1;
        self.plateau_wait += 1;
        if self.plateau_wait >= self.config.plateau_patience {
            self.lr = (self.lr * self.config.lr_factor).max(self.config.lr_min);
            self.plateau_wait = 0;
        }
        let stop = self.early_stop_wait >= self.config.early_stop_patience;
        if stop {
            self.stopped_at = Some(epoch);
        }
        EpochDecision { checkpoint: false, stop }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_trace(config: CallbackConfig, losses: &[f64]) -> (TrainingController, Vec<f64>, Option<usize>) {
        let mut controller = TrainingController::new(config);
        let mut lrs = Vec::new();
        let mut stopped = None;
        for (i, &loss) in losses.iter().enumerate() {
            lrs.push(controller.current_lr());
            let decision = controller.observe(loss);
            if decision.stop {
                stopped = Some(i + 1);
                break;
            }
        }
        (controller, lrs, stopped)
    }

    #[test]
    fn early_stop_restores_best_epoch() {
        let losses = [0.50, 0.40, 0.41, 0.42, 0.43, 0.44, 0.45];
        let (controller, _, stopped) = run_trace(CallbackConfig::default(), &losses);
        assert_eq!(stopped, Some(7));
        assert_eq!(controller.best_epoch(), Some(2));
        assert_eq!(controller.best_loss(), 0.40);
    }

    #[test]
    fn lr_halves_on_plateau_and_floors() {
        let config = CallbackConfig {
            early_stop_patience: usize::MAX,
            ..CallbackConfig::default()
        };
        let mut controller = TrainingController::new(config);
        controller.observe(1.0);
        let mut lrs = vec![];
        for _ in 0..30 {
            controller.observe(1.0);
            lrs.push(controller.current_lr());
        }
        // Halved every `plateau_patience` epochs: 5e-5, 2.5e-5, ...
        assert_eq!(lrs[2], 5e-5);
        assert_eq!(lrs[5], 2.5e-5);
        assert_eq!(lrs[8], 1.25e-5);
        assert_eq!(*lrs.last().unwrap(), 1e-6);
        assert!(lrs.iter().all(|&lr| lr >= 1e-6));
    }

    #[test]
    fn strictly_improving_never_stops() {
        let losses: Vec<f64> = (0..20).map(|i| 1.0 - 0.01 * i as f64).collect();
        let (controller, lrs, stopped) = run_trace(CallbackConfig::default(), &losses);
        assert_eq!(stopped, None);
        assert_eq!(controller.best_epoch(), Some(20));
        assert!(lrs.iter().all(|&lr| lr == 1e-4));
    }

    #[test]
    fn min_delta_gates_improvement() {
        let config = CallbackConfig {
            min_delta: 1e-2,
            early_stop_patience: 2,
            ..CallbackConfig::default()
        };
        // The second loss improves by less than min_delta, so it is a plateau.
        let (controller, _, stopped) = run_trace(config, &[0.5, 0.495, 0.494]);
        assert_eq!(stopped, Some(3));
        assert_eq!(controller.best_epoch(), Some(1));
    }

    #[test]
    fn checkpoint_flag_tracks_improvements() {
        let mut controller = TrainingController::new(CallbackConfig::default());
        assert!(controller.observe(0.5).checkpoint);
        assert!(!controller.observe(0.6).checkpoint);
        assert!(controller.observe(0.3).checkpoint);
    }
}
