//! Warmup-stable-decay learning-rate schedule.

use crate::numerics::Real;

/// Linear warmup from 0 to `peak`, a constant plateau, then a linear decay
/// over the final `decay_fraction` of the run ending at `floor · peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wsd {
    pub peak: Real,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_fraction: Real,
    pub floor: Real,
}

impl Wsd {
    /// Number of steps in the decay window (at least one for a nonempty run).
    pub fn decay_steps(&self) -> u64 {
        if self.total_steps == 0 {
            return 0;
        }
        ((self.total_steps as Real * self.decay_fraction).round() as u64).clamp(1, self.total_steps)
    }

    pub fn decay_start(&self) -> u64 {
        self.total_steps - self.decay_steps()
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr(&self, step: u64) -> Real {
        let warm = if step < self.warmup_steps {
            step as Real / self.warmup_steps as Real
        } else {
            1.0
        };
        let start = self.decay_start();
        let decay = if self.total_steps > 0 && step >= start {
            let frac = ((step - start + 1) as Real / self.decay_steps() as Real).min(1.0);
            1.0 - (1.0 - self.floor) * frac
        } else {
            1.0
        };
        self.peak * warm.min(decay)
    }
}

/// Free-function form of [`Wsd::lr`].
pub fn wsd_lr(step: u64, schedule: &Wsd) -> Real {
    schedule.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Wsd {
        Wsd {
            peak: 2e-3,
            warmup_steps: 50,
            total_steps: 1000,
            decay_fraction: 0.1,
            floor: 0.1,
        }
    }

    #[test]
    fn anchors() {
        let s = sched();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(25), 1e-3);
        assert_eq!(s.lr(500), 2e-3);
        assert_eq!(s.lr(899), 2e-3);
        assert!((s.lr(999) - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn monotone_pieces() {
        let s = sched();
        for t in 1..50 {
            assert!(s.lr(t) > s.lr(t - 1));
        }
        for t in 901..1000 {
            assert!(s.lr(t) < s.lr(t - 1));
        }
    }

    #[test]
    fn tiny_runs() {
        let s = Wsd {
            total_steps: 1,
            warmup_steps: 0,
            ..sched()
        };
        assert!((s.lr(0) - 2e-4).abs() < 1e-15);
        let s = Wsd {
            total_steps: 0,
            ..sched()
        };
        assert_eq!(s.decay_steps(), 0);
    }
}
