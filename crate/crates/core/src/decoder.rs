//! Budgeted keyshot decoding with an exact 0/1 knapsack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{expand_scores, ChangePointPartition, PickSequence};

/// Default summary budget as a fraction of the video length.
pub const DEFAULT_BUDGET: f64 = 0.15;

/// `floor(rho * n_frames)`, with a 1e-9 allowance so products such as
/// `0.29 * 100` that land just below an integer are not rounded down.
pub fn budget_capacity(rho: f64, n_frames: usize) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("budget rho must lie in (0, 1], got {rho}")));
    }
    Ok(((rho * n_frames as f64 + 1e-9).floor() as usize).min(n_frames))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentKnapsackInstance {
    pub values: Vec<f64>,
    pub weights: Vec<usize>,
    pub capacity: usize,
}

impl SegmentKnapsackInstance {
    pub fn new(values: Vec<f64>, weights: Vec<usize>, capacity: usize) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::shape(
                "knapsack",
                format!("{} values for {} weights", values.len(), weights.len()),
            ));
        }
        if weights.contains(&0) {
            return Err(Error::invalid("knapsack weights must be at least 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("knapsack values must be finite"));
        }
        Ok(Self {
            values,
            weights,
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total value and weight of a selection.
    pub fn evaluate(&self, selection: &[bool]) -> (f64, usize) {
        let mut value = 0.0;
        let mut weight = 0;
        for (k, _) in selection.iter().enumerate().filter(|(_, &u)| u) {
            value += self.values[k];
            weight += self.weights[k];
        }
        (value, weight)
    }
}

/// Per-segment mean score and frame-count weight; capacity left at 0.
pub fn segment_values(frame_scores: &[f64], cps: &ChangePointPartition) -> Result<SegmentKnapsackInstance> {
    if frame_scores.len() != cps.n_frames() {
        return Err(Error::shape(
            "segment_values",
            format!("{} frame scores for {} frames", frame_scores.len(), cps.n_frames()),
        ));
    }
    let values = cps
        .segments()
        .iter()
        .map(|s| frame_scores[s.start..=s.end].iter().sum::<f64>() / s.len() as f64)
        .collect();
    SegmentKnapsackInstance::new(values, cps.lengths(), 0)
}

/// Exact 0/1 knapsack by dynamic programming over integer capacity.
///
/// Maximizes total value; among equal values prefers smaller total weight,
/// then the lexicographically smallest list of selected indices. Items are
/// processed from last to first, so including item `k` on a full tie always
/// yields the smaller index list.
pub fn knapsack_select(inst: &SegmentKnapsackInstance) -> Vec<bool> {
    let m = inst.len();
    let cap = inst.capacity;
    // best (value, weight) achievable with items k.. and capacity c
    let mut value = vec![0.0f64; cap + 1];
    let mut weight = vec![0usize; cap + 1];
    let mut take = vec![false; m * (cap + 1)];
    for k in (0..m).rev() {
        let (vk, wk) = (inst.values[k], inst.weights[k]);
        let mut next_value = value.clone();
        let mut next_weight = weight.clone();
        for c in wk..=cap {
            let cand_v = vk + value[c - wk];
            let cand_w = wk + weight[c - wk];
            let better = cand_v > value[c] || (cand_v == value[c] && cand_w <= weight[c]);
            if better {
                next_value[c] = cand_v;
                next_weight[c] = cand_w;
                take[k * (cap + 1) + c] = true;
            }
        }
        value = next_value;
        weight = next_weight;
    }
    let mut selection = vec![false; m];
    let mut c = cap;
    for k in 0..m {
        if take[k * (cap + 1) + c] {
            selection[k] = true;
            c -= inst.weights[k];
        }
    }
    selection
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryMask {
    pub mask: Vec<bool>,
    pub selected_segments: Vec<usize>,
}

impl SummaryMask {
    pub fn n_selected_frames(&self) -> usize {
        self.mask.iter().filter(|&&y| y).count()
    }
}

/// Expands a segment selection to a per-frame mask.
pub fn selection_mask(selection: &[bool], cps: &ChangePointPartition) -> SummaryMask {
    let mut mask = vec![false; cps.n_frames()];
    let mut selected_segments = Vec::new();
    for (k, seg) in cps.segments().iter().enumerate() {
        if selection[k] {
            selected_segments.push(k);
            mask[seg.start..=seg.end].iter_mut().for_each(|y| *y = true);
        }
    }
    SummaryMask {
        mask,
        selected_segments,
    }
}

/// Scores on the sampled timeline to a frame mask within `floor(rho N)` frames.
pub fn decode_summary(
    scores: &[f64],
    picks: &PickSequence,
    cps: &ChangePointPartition,
    rho: f64,
) -> Result<SummaryMask> {
    let capacity = budget_capacity(rho, cps.n_frames())?;
    let frame_scores = expand_scores(scores, picks, cps.n_frames())?;
    let mut inst = segment_values(&frame_scores, cps)?;
    inst.capacity = capacity;
    Ok(selection_mask(&knapsack_select(&inst), cps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(inst: &SegmentKnapsackInstance) -> (f64, usize, Vec<bool>) {
        let m = inst.len();
        let mut best: Option<(f64, usize, Vec<usize>, Vec<bool>)> = None;
        for bits in 0u32..(1 << m) {
            let sel: Vec<bool> = (0..m).map(|k| bits >> k & 1 == 1).collect();
            let (v, w) = inst.evaluate(&sel);
            if w > inst.capacity {
                continue;
            }
            let idx: Vec<usize> = (0..m).filter(|&k| sel[k]).collect();
            let replace = match &best {
                None => true,
                Some((bv, bw, bidx, _)) => v > *bv || (v == *bv && (w < *bw || (w == *bw && idx < *bidx))),
            };
            if replace {
                best = Some((v, w, idx, sel));
            }
        }
        let (v, w, _, sel) = best.unwrap();
        (v, w, sel)
    }

    #[test]
    fn capacity_floors() {
        assert_eq!(budget_capacity(0.15, 10).unwrap(), 1);
        assert_eq!(budget_capacity(0.15, 100).unwrap(), 15);
        assert_eq!(budget_capacity(0.29, 100).unwrap(), 29);
        assert_eq!(budget_capacity(0.15, 6).unwrap(), 0);
        assert_eq!(budget_capacity(1.0, 7).unwrap(), 7);
        assert!(budget_capacity(0.0, 10).is_err());
        assert!(budget_capacity(1.5, 10).is_err());
        assert!(budget_capacity(f64::NAN, 10).is_err());
    }

    #[test]
    fn segment_value_examples() {
        let cps = ChangePointPartition::from_pairs(&[(0, 2), (3, 4)], 5).unwrap();
        let inst = segment_values(&[1.0, 1.0, 1.0, 5.0, 5.0], &cps).unwrap();
        assert_eq!(inst.values, vec![1.0, 5.0]);
        assert_eq!(inst.weights, vec![3, 2]);

        let cps = ChangePointPartition::from_pairs(&[(0, 1), (2, 3)], 4).unwrap();
        let inst = segment_values(&[0.0, 2.0, 4.0, 6.0], &cps).unwrap();
        assert_eq!(inst.values, vec![1.0, 5.0]);
        assert_eq!(inst.weights, vec![2, 2]);

        let cps = ChangePointPartition::from_pairs(&[(0, 3)], 4).unwrap();
        let inst = segment_values(&[1.0, 2.0, 3.0, 6.0], &cps).unwrap();
        assert_eq!(inst.values, vec![3.0]);
        assert_eq!(inst.weights, vec![4]);
        assert!(segment_values(&[1.0], &cps).is_err());
    }

    #[test]
    fn classic_instance() {
        let inst = SegmentKnapsackInstance::new(vec![60.0, 100.0, 120.0], vec![10, 20, 30], 50).unwrap();
        let sel = knapsack_select(&inst);
        assert_eq!(sel, vec![false, true, true]);
        assert_eq!(inst.evaluate(&sel), (220.0, 50));
        assert_eq!(brute_force(&inst).2, sel);
    }

    #[test]
    fn ties_prefer_lower_weight_then_smaller_indices() {
        let inst = SegmentKnapsackInstance::new(vec![1.0, 1.0], vec![1, 1], 1).unwrap();
        assert_eq!(knapsack_select(&inst), vec![true, false]);

        let inst = SegmentKnapsackInstance::new(vec![2.0, 2.0, 1.0, 1.0], vec![3, 1, 1, 1], 3).unwrap();
        assert_eq!(knapsack_select(&inst), vec![false, true, true, true]);

        let inst = SegmentKnapsackInstance::new(vec![2.0, 2.0], vec![3, 1], 3).unwrap();
        assert_eq!(knapsack_select(&inst), vec![false, true]);

        let inst = SegmentKnapsackInstance::new(vec![2.0, 1.0, 1.0], vec![2, 1, 1], 2).unwrap();
        assert_eq!(knapsack_select(&inst), vec![true, false, false]);

        let inst = SegmentKnapsackInstance::new(vec![1.0, 2.0, 1.0], vec![1, 2, 1], 2).unwrap();
        assert_eq!(knapsack_select(&inst), vec![true, false, true]);

        let inst = SegmentKnapsackInstance::new(vec![0.0, -1.0], vec![1, 1], 2).unwrap();
        assert_eq!(knapsack_select(&inst), vec![false, false]);
    }

    #[test]
    fn everything_fits() {
        let inst = SegmentKnapsackInstance::new(vec![0.5, 0.1, 2.0], vec![4, 5, 6], 20).unwrap();
        assert_eq!(knapsack_select(&inst), vec![true; 3]);
        let inst = SegmentKnapsackInstance::new(vec![0.5, 0.1], vec![4, 5], 0).unwrap();
        assert_eq!(knapsack_select(&inst), vec![false; 2]);
        let inst = SegmentKnapsackInstance::new(vec![], vec![], 3).unwrap();
        assert!(knapsack_select(&inst).is_empty());
    }

    #[test]
    fn invalid_instances() {
        assert!(SegmentKnapsackInstance::new(vec![1.0], vec![0], 1).is_err());
        assert!(SegmentKnapsackInstance::new(vec![1.0, 2.0], vec![1], 1).is_err());
        assert!(SegmentKnapsackInstance::new(vec![f64::NAN], vec![1], 1).is_err());
    }

    #[test]
    fn decode_examples() {
        let picks = PickSequence::new(vec![0, 3, 6, 9]).unwrap();
        let cps = ChangePointPartition::from_pairs(&[(0, 9)], 10).unwrap();
        let out = decode_summary(&[0.9, 0.8, 0.7, 0.6], &picks, &cps, 0.15).unwrap();
        assert!(out.selected_segments.is_empty());
        assert_eq!(out.n_selected_frames(), 0);

        let cps = ChangePointPartition::from_pairs(&[(0, 0), (1, 9)], 10).unwrap();
        let out = decode_summary(&[0.5; 4], &picks, &cps, 0.15).unwrap();
        assert_eq!(out.selected_segments, vec![0]);
        let mut want = vec![false; 10];
        want[0] = true;
        assert_eq!(out.mask, want);

        assert!(decode_summary(&[0.5; 4], &picks, &cps, 0.0).is_err());
    }

    #[test]
    fn unit_weights_pick_top_half() {
        let scores = [0.3, 0.9, 0.1, 0.7, 0.5, 0.8, 0.2, 0.6];
        let n = scores.len();
        let picks = PickSequence::new((0..n).collect()).unwrap();
        let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k, k)).collect();
        let cps = ChangePointPartition::from_pairs(&pairs, n).unwrap();
        let out = decode_summary(&scores, &picks, &cps, 0.5).unwrap();
        assert_eq!(out.selected_segments, vec![1, 3, 5, 7]);
    }

    fn instance() -> impl Strategy<Value = SegmentKnapsackInstance> {
        (1usize..=10)
            .prop_flat_map(|m| {
                (
                    prop::collection::vec(-64i32..=256, m),
                    prop::collection::vec(1usize..=8, m),
                    0usize..=30,
                )
            })
            .prop_map(|(v, w, c)| {
                let values = v.into_iter().map(|x| f64::from(x) / 64.0).collect();
                SegmentKnapsackInstance::new(values, w, c).unwrap()
            })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(inst in instance()) {
            let sel = knapsack_select(&inst);
            let (v, w) = inst.evaluate(&sel);
            prop_assert!(w <= inst.capacity);
            let (bv, bw, bsel) = brute_force(&inst);
            prop_assert_eq!(v, bv);
            prop_assert_eq!(w, bw);
            prop_assert_eq!(sel, bsel);
        }

        #[test]
        fn uniform_shift_keeps_selection(
            v in prop::collection::vec(1i32..64, 1..10),
            shift in 1i32..32,
            cap in 0usize..10,
        ) {
            let m = v.len();
            let base: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            let shifted: Vec<f64> = base.iter().map(|x| x + f64::from(shift)).collect();
            let a = knapsack_select(&SegmentKnapsackInstance::new(base, vec![1; m], cap).unwrap());
            let b = knapsack_select(&SegmentKnapsackInstance::new(shifted, vec![1; m], cap).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raising_a_selected_segment_keeps_it(
            inst in instance(),
            bump in 1i32..64,
        ) {
            let sel = knapsack_select(&inst);
            if let Some(k) = sel.iter().position(|&u| u) {
                let mut raised = inst.clone();
                raised.values[k] += f64::from(bump) / 64.0;
                prop_assert!(knapsack_select(&raised)[k]);
            }
        }

        #[test]
        fn decode_respects_budget(
            n in 1usize..80,
            cut_seed in prop::collection::vec(any::<bool>(), 80),
            score_seed in prop::collection::vec(-2.0f64..2.0, 80),
            rho in 0.01f64..=1.0,
            stride in 1usize..5,
        ) {
            let mut pairs = Vec::new();
            let mut start = 0;
            for f in 0..n {
                if f + 1 == n || cut_seed[f] {
                    pairs.push((start, f));
                    start = f + 1;
                }
            }
            let cps = ChangePointPartition::from_pairs(&pairs, n).unwrap();
            let picks: Vec<usize> = (0..n).step_by(stride).collect();
            let scores = &score_seed[..picks.len()];
            let picks = PickSequence::new(picks).unwrap();
            let out = decode_summary(scores, &picks, &cps, rho).unwrap();
            prop_assert!(out.n_selected_frames() <= budget_capacity(rho, n).unwrap());
            prop_assert_eq!(out.mask.len(), n);
            for (f, &y) in out.mask.iter().enumerate() {
                let k = cps.segment_of(f).unwrap();
                prop_assert_eq!(y, out.selected_segments.contains(&k));
            }
        }
    }
}
