use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear from `warmup_floor` to `start` over `warmup_steps`, then cosine
    /// from `start` to `end`.
    WarmupCosine,
    Cosine,
    Constant,
}

/// A scalar hyperparameter as a function of the optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub warmup_floor: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn constant(value: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            start: value,
            end: value,
            warmup_floor: value,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn cosine(start: f64, end: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            start,
            end,
            warmup_floor: start,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn warmup_cosine(floor: f64, start: f64, end: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            start,
            end,
            warmup_floor: floor,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.warmup_steps > self.total_steps {
            return Err(TensorError::Schedule("warmup longer than schedule"));
        }
        if !(self.start.is_finite() && self.end.is_finite() && self.warmup_floor.is_finite()) {
            return Err(TensorError::Schedule("non-finite endpoint"));
        }
        Ok(())
    }

    /// Value at `step` in `[0, total_steps]`.
    pub fn eval(&self, step: usize) -> Result<f64, TensorError> {
        if step > self.total_steps {
            return Err(TensorError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        self.validate()?;
        Ok(match self.kind {
            ScheduleKind::Constant => self.start,
            ScheduleKind::Cosine => cosine(self.start, self.end, step, self.total_steps),
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    let t = step as f64 / self.warmup_steps as f64;
                    self.warmup_floor + (self.start - self.warmup_floor) * t
                } else if self.total_steps == self.warmup_steps {
                    if step == self.total_steps && self.total_steps > 0 {
                        self.end
                    } else {
                        self.start
                    }
                } else {
                    cosine(
                        self.start,
                        self.end,
                        step - self.warmup_steps,
                        self.total_steps - self.warmup_steps,
                    )
                }
            }
        })
    }

    /// Like [`Schedule::eval`] but clamps `step` into range.
    pub fn eval_clamped(&self, step: usize) -> f64 {
        self.eval(step.min(self.total_steps)).unwrap_or(self.end)
    }
}

fn cosine(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if step >= total {
        return end;
    }
    if step == 0 {
        return start;
    }
    let t = step as f64 / total as f64;
    end + (start - end) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule::cosine(0.04, 0.4, 100);
        assert_eq!(s.eval(0).unwrap(), 0.04);
        assert!((s.eval(100).unwrap() - 0.4).abs() < 1e-15);
        assert!((s.eval(50).unwrap() - 0.22).abs() < 1e-15);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = Schedule::warmup_cosine(0.0, 1e-4, 1e-6, 10, 110);
        assert_eq!(s.eval(0).unwrap(), 0.0);
        assert!((s.eval(5).unwrap() - 0.5e-4).abs() < 1e-18);
        assert_eq!(s.eval(10).unwrap(), 1e-4);
        assert!((s.eval(110).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn teacher_temperature_warmup_holds_after() {
        let s = Schedule::warmup_cosine(0.04, 0.07, 0.07, 10, 30);
        assert_eq!(s.eval(0).unwrap(), 0.04);
        assert!((s.eval(10).unwrap() - 0.07).abs() < 1e-15);
        assert!((s.eval(30).unwrap() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let s = Schedule::constant(1.0, 5);
        assert_eq!(s.eval(5).unwrap(), 1.0);
        assert!(matches!(
            s.eval(6),
            Err(TensorError::StepOutOfRange { step: 6, total: 5 })
        ));
    }

    #[test]
    fn warmup_only_reaches_end_at_total() {
        let s = Schedule::warmup_cosine(0.0, 1.0, 0.5, 4, 4);
        assert_eq!(s.eval(0).unwrap(), 0.0);
        assert_eq!(s.eval(4).unwrap(), 0.5);
    }
}
