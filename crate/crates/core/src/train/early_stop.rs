/// What to do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored value has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Decision {
        match self.best {
            Some((_, best)) if value <= best || value.is_nan() => {
                self.since += 1;
                if self.since >= self.patience {
                    Decision::Stop
                } else {
                    Decision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.since = 0;
                Decision::Improved
            }
        }
    }

    /// `(epoch, value)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degrading_run_stops_at_epoch_six() {
        let mut es = EarlyStopping::new(5);
        let mut stopped = None;
        for epoch in 1..=20 {
            if es.observe(epoch, 1.0 / epoch as f64) == Decision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(6));
        assert_eq!(es.best(), Some((1, 1.0)));
    }

    #[test]
    fn ties_are_not_improvements() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 0.5), Decision::Improved);
        assert_eq!(es.observe(2, 0.5), Decision::Continue);
        assert_eq!(es.observe(3, 0.6), Decision::Improved);
        assert_eq!(es.epochs_since_improvement(), 0);
    }
}
