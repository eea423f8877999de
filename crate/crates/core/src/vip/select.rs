use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{ImportanceMap, VipConfig};
use crate::numerics::math;

/// Retained visual indices, strictly increasing and never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub keep: Vec<usize>,
    pub num_visual: usize,
}

impl SelectionResult {
    pub fn all(num_visual: usize) -> Self {
        Self {
            keep: (0..num_visual).collect(),
            num_visual,
        }
    }

    pub fn retention_rate(&self) -> f64 {
        self.keep.len() as f64 / self.num_visual as f64
    }
}

/// `max(1, ceil(r_max · Nv))`, with `None` meaning no cap.
///
/// A 1e-9 slack absorbs products such as `(1/3)·9 = 3.0000000000000004`.
pub fn retention_cap(r_max: Option<f64>, num_visual: usize) -> usize {
    match r_max {
        None => num_visual,
        Some(r) => {
            let c = math::ceil(r * num_visual as f64 - 1e-9);
            (c.max(1.0) as usize).min(num_visual)
        }
    }
}

/// Tokens with `P ≥ tau`, capped to the highest-P members; falls back to the argmax.
pub fn select_tokens(p: &ImportanceMap, cfg: &VipConfig) -> SelectionResult {
    select_from_probs(&p.probs, cfg.tau, cfg.r_max)
}

pub(crate) fn select_from_probs(probs: &[f64], tau: f64, r_max: Option<f64>) -> SelectionResult {
    let n = probs.len();
    assert!(n > 0, "selection over zero visual tokens");
    let cap = retention_cap(r_max, n);
    let mut chosen: Vec<usize> = (0..n).filter(|&i| probs[i] >= tau).collect();
    if chosen.is_empty() {
        let mut best = 0;
        for i in 1..n {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        chosen.push(best);
    } else if chosen.len() > cap {
        chosen.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        chosen.truncate(cap);
        chosen.sort_unstable();
    }
    SelectionResult {
        keep: chosen,
        num_visual: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_case() {
        let r = select_from_probs(&[0.9, 0.1, 0.8, 0.2], 0.5, Some(0.5));
        assert_eq!(r.keep, vec![0, 2]);
        let r = select_from_probs(&[0.9, 0.6, 0.8, 0.7], 0.5, Some(0.5));
        assert_eq!(r.keep, vec![0, 2]);
    }

    #[test]
    fn never_empty() {
        let r = select_from_probs(&[0.1, 0.3, 0.3, 0.2], 0.5, None);
        assert_eq!(r.keep, vec![1]);
        assert_eq!(r.retention_rate(), 0.25);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let r = select_from_probs(&[0.7, 0.9, 0.7, 0.7], 0.5, Some(0.5));
        assert_eq!(r.keep, vec![0, 1]);
    }

    #[test]
    fn cap_values() {
        assert_eq!(retention_cap(Some(0.111), 64), 8);
        assert_eq!(retention_cap(Some(1.0 / 3.0), 9), 3);
        assert_eq!(retention_cap(Some(0.01), 4), 1);
        assert_eq!(retention_cap(None, 10), 10);
        assert_eq!(retention_cap(Some(1.0), 10), 10);
    }
}
