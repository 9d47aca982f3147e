use serde::{Deserialize, Serialize};

/// Linear ramp from `init` to `fin` over `duration` seconds, held at `fin`
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub init: f64,
    pub fin: f64,
    pub duration: f64,
}

impl LinearSchedule {
    pub fn new(init: f64, fin: f64, duration: f64) -> Self {
        Self { init, fin, duration }
    }

    pub fn at(&self, t: f64) -> f64 {
        schedule(self.init, self.fin, t, self.duration)
    }
}

pub fn schedule(value_init: f64, value_fin: f64, t: f64, duration: f64) -> f64 {
    if duration <= 0.0 || t >= duration {
        return value_fin;
    }
    let frac = (t / duration).max(0.0);
    value_init + (value_fin - value_init) * frac
}
