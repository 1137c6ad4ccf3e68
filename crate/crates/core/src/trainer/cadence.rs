//! Hybrid evaluation schedule.

use std::collections::BTreeSet;

/// Powers of two up to `n`, every multiple of `interval` up to `n`, and the
/// points `⌈k·n/20⌉` for `k = 14..=20` covering the last 30% of training.
/// An `interval` of zero disables the periodic points.
pub fn eval_cadence(n: u64, interval: u64) -> Vec<u64> {
    let mut out = BTreeSet::new();
    let mut p = 1u64;
    while p <= n {
        out.insert(p);
        p = match p.checked_mul(2) {
            Some(q) => q,
            None => break,
        };
    }
    if let Some(m) = n.checked_div(interval) {
        out.extend((1..=m).map(|k| k * interval));
    }
    for k in 14..=20u128 {
        let s = (k * n as u128).div_ceil(20) as u64;
        if s >= 1 {
            out.insert(s);
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_steps() {
        let c = eval_cadence(16, 1000);
        assert_eq!(c, vec![1, 2, 4, 8, 12, 13, 14, 15, 16]);
    }

    #[test]
    fn periodic_points() {
        let c = eval_cadence(100, 30);
        for s in [30, 60, 90] {
            assert!(c.contains(&s));
        }
        assert!(!c.contains(&120));
        assert_eq!(*c.last().unwrap(), 100);
    }

    #[test]
    fn single_step() {
        assert_eq!(eval_cadence(1, 5), vec![1]);
    }

    proptest! {
        #[test]
        fn strictly_increasing_ending_at_n(n in 1u64..100_000, e in 0u64..5000) {
            let c = eval_cadence(n, e);
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*c.last().unwrap(), n);
            prop_assert!(c[0] >= 1);
        }
    }
}
