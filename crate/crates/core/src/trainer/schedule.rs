/// Learning-rate schedule driven by validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    pub since_improvement: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Stalled,
    Halved,
}

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self { lr, best: f64::INFINITY, since_improvement: 0 }
    }
}

/// Records one validation loss. A strictly lower loss becomes the new best;
/// once `patience` consecutive validations fail to improve, the rate halves
/// and the counter restarts.
pub fn schedule_update(s: &mut Schedule, validation_loss: f64, patience: u32) -> ScheduleEvent {
    debug_assert!(patience >= 1);
    if validation_loss < s.best {
        s.best = validation_loss;
        s.since_improvement = 0;
        return ScheduleEvent::Improved;
    }
    s.since_improvement += 1;
    if s.since_improvement >= patience {
        s.lr /= 2.0;
        s.since_improvement = 0;
        ScheduleEvent::Halved
    } else {
        ScheduleEvent::Stalled
    }
}
