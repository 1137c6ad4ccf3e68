//! Learning-rate schedules with linear warmup.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
    Wsd,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "wsd" => Ok(Self::Wsd),
            other => Err(Error::Parse(format!("unknown scheduler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub kind: ScheduleKind,
    pub warmup_fraction: f64,
    /// Required for cosine and wsd.
    pub total_steps: Option<u64>,
    pub decay_fraction: f64,
    pub floor_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            warmup_fraction: 0.0,
            total_steps: None,
            decay_fraction: 0.2,
            floor_lr: 0.0,
        }
    }
}

/// A resolved schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    peak: f64,
    floor: f64,
    warmup: u64,
    total: Option<u64>,
    decay_start: f64,
}

impl Schedule {
    /// The warmup length is `⌈f_w·T⌉`, or `⌈f_w·max_steps⌉` for a constant schedule.
    pub fn new(cfg: &SchedulerConfig, peak: f64, max_steps: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.warmup_fraction) {
            return Err(Error::InvalidArgument(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                cfg.warmup_fraction
            )));
        }
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "peak lr must be positive, got {peak}"
            )));
        }
        let total = match cfg.kind {
            ScheduleKind::Constant => None,
            _ => {
                let t = cfg.total_steps.ok_or_else(|| {
                    Error::InvalidArgument(format!("{:?} schedule needs total_steps", cfg.kind))
                })?;
                if t == 0 {
                    return Err(Error::InvalidArgument(
                        "total_steps must be positive".into(),
                    ));
                }
                Some(t)
            }
        };
        if cfg.kind == ScheduleKind::Cosine && !(0.0..=peak).contains(&cfg.floor_lr) {
            return Err(Error::InvalidArgument(format!(
                "floor_lr must lie in [0, peak], got {}",
                cfg.floor_lr
            )));
        }
        if cfg.kind == ScheduleKind::Wsd && !(cfg.decay_fraction > 0.0 && cfg.decay_fraction <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "decay_fraction must lie in (0, 1], got {}",
                cfg.decay_fraction
            )));
        }
        let horizon = total.unwrap_or(max_steps);
        let warmup = (cfg.warmup_fraction * horizon as f64).ceil() as u64;
        let decay_start = total.map_or(0.0, |t| t as f64 * (1.0 - cfg.decay_fraction));
        Ok(Self {
            kind: cfg.kind,
            peak,
            floor: cfg.floor_lr,
            warmup,
            total,
            decay_start,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup
    }

    pub fn total_steps(&self) -> Option<u64> {
        self.total
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }
}

/// Learning rate for the update taken at `step` (0-based).
pub fn lr_at(s: &Schedule, step: u64) -> Result<f64> {
    if let Some(t) = s.total {
        if step > t {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond total_steps {t}"
            )));
        }
    }
    if step < s.warmup {
        return Ok(s.peak * (step + 1) as f64 / s.warmup as f64);
    }
    let lr = match (s.kind, s.total) {
        (ScheduleKind::Constant, _) => s.peak,
        (ScheduleKind::Cosine, Some(t)) => {
            let span = t.saturating_sub(s.warmup);
            let progress = if span == 0 {
                1.0
            } else {
                (step - s.warmup) as f64 / span as f64
            };
            s.floor + (s.peak - s.floor) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
        }
        (ScheduleKind::Wsd, Some(t)) => {
            let x = step as f64;
            if x < s.decay_start {
                s.peak
            } else {
                s.peak * (t as f64 - x) / (t as f64 - s.decay_start)
            }
        }
        _ => unreachable!("decaying schedules carry total_steps"),
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: ScheduleKind, f_w: f64, total: Option<u64>) -> SchedulerConfig {
        SchedulerConfig {
            kind,
            warmup_fraction: f_w,
            total_steps: total,
            ..Default::default()
        }
    }

    #[test]
    fn constant_warmup_reaches_peak_on_last_step() {
        let s = Schedule::new(&cfg(ScheduleKind::Constant, 0.25, None), 3e-3, 1000).unwrap();
        assert_eq!(s.warmup_steps(), 250);
        assert_eq!(lr_at(&s, 249).unwrap(), 3e-3);
        assert_eq!(lr_at(&s, 0).unwrap(), 3e-3 / 250.0);
        assert_eq!(lr_at(&s, 10_000).unwrap(), 3e-3);
    }

    #[test]
    fn cosine_endpoint_is_floor() {
        let s = Schedule::new(&cfg(ScheduleKind::Cosine, 0.1, Some(500)), 1.0, 500).unwrap();
        assert!(lr_at(&s, 500).unwrap().abs() < 1e-15);
        assert_eq!(lr_at(&s, 50).unwrap(), 1.0);
        let mut c = cfg(ScheduleKind::Cosine, 0.0, Some(100));
        c.floor_lr = 0.1;
        let s = Schedule::new(&c, 1.0, 100).unwrap();
        assert!((lr_at(&s, 100).unwrap() - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 50).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn wsd_decay_midpoint() {
        let mut c = cfg(ScheduleKind::Wsd, 0.0, Some(1000));
        c.decay_fraction = 0.2;
        let s = Schedule::new(&c, 2.0, 1000).unwrap();
        assert_eq!(lr_at(&s, 799).unwrap(), 2.0);
        assert!((lr_at(&s, 900).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(&s, 1000).unwrap(), 0.0);
    }

    #[test]
    fn beyond_total_is_error() {
        let s = Schedule::new(&cfg(ScheduleKind::Wsd, 0.0, Some(10)), 1.0, 10).unwrap();
        assert!(lr_at(&s, 11).is_err());
    }

    #[test]
    fn decaying_needs_total() {
        assert!(Schedule::new(&cfg(ScheduleKind::Cosine, 0.0, None), 1.0, 10).is_err());
        assert!(Schedule::new(&cfg(ScheduleKind::Constant, 1.0, None), 1.0, 10).is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("wsd".parse::<ScheduleKind>().unwrap(), ScheduleKind::Wsd);
        assert!("linear".parse::<ScheduleKind>().is_err());
    }

    proptest! {
        #[test]
        fn nonincreasing_after_warmup(
            wsd in any::<bool>(),
            f_w in 0.0f64..0.4,
            total in 10u64..2000,
            df in 0.05f64..0.5,
        ) {
            let mut c = cfg(if wsd { ScheduleKind::Wsd } else { ScheduleKind::Cosine }, f_w, Some(total));
            c.decay_fraction = df;
            let s = Schedule::new(&c, 1.0, total).unwrap();
            let w = s.warmup_steps();
            if w > 0 && w <= total {
                let jump = (lr_at(&s, w).unwrap() - lr_at(&s, w - 1).unwrap()).abs();
                prop_assert!(jump <= 1.0 / w as f64 + 1e-12);
            }
            let mut prev = f64::INFINITY;
            for step in w..=total {
                let lr = lr_at(&s, step).unwrap();
                prop_assert!(lr <= prev + 1e-12);
                prop_assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }
}
