//! Mapping between the sampled timeline (T picks) and the original timeline
//! (N frames) through a change-point partition.
//!
//! Segment ids are 0-based everywhere in code and file formats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive frame range `[start, end]` on the original timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }
}

/// Ordered, contiguous, disjoint segments covering `[0, n_frames - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangePointPartition {
    segments: Vec<Segment>,
    n_frames: usize,
}

impl ChangePointPartition {
    pub fn new(segments: Vec<Segment>, n_frames: usize) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::invalid("partition over zero frames"));
        }
        let Some(first) = segments.first() else {
            return Err(Error::invalid("partition has no segments"));
        };
        if first.start != 0 {
            return Err(Error::invalid(format!(
                "first segment starts at {} instead of 0",
                first.start
            )));
        }
        for (k, seg) in segments.iter().enumerate() {
            if seg.end < seg.start {
                return Err(Error::invalid(format!(
                    "segment {k} has end {} before start {}",
                    seg.end, seg.start
                )));
            }
            if let Some(next) = segments.get(k + 1) {
                if next.start != seg.end + 1 {
                    return Err(Error::invalid(format!(
                        "segment {} starts at {} but segment {k} ends at {}",
                        k + 1,
                        next.start,
                        seg.end
                    )));
                }
            }
        }
        let last = segments[segments.len() - 1];
        if last.end != n_frames - 1 {
            return Err(Error::invalid(format!(
                "last segment ends at {} but the video has {n_frames} frames",
                last.end
            )));
        }
        Ok(Self { segments, n_frames })
    }

    /// Builds a partition from `(start, end)` pairs.
    pub fn from_pairs(pairs: &[(usize, usize)], n_frames: usize) -> Result<Self> {
        Self::new(pairs.iter().map(|&(s, e)| Segment::new(s, e)).collect(), n_frames)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Segment lengths on the original timeline.
    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(Segment::len).collect()
    }

    /// Index of the segment containing `frame`, if any.
    pub fn segment_of(&self, frame: usize) -> Option<usize> {
        let k = self.segments.partition_point(|s| s.end < frame);
        self.segments.get(k).filter(|s| s.contains(frame)).map(|_| k)
    }
}

/// Strictly increasing sampling indices on the original timeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PickSequence(Vec<usize>);

impl PickSequence {
    pub fn new(picks: Vec<usize>) -> Result<Self> {
        if picks.is_empty() {
            return Err(Error::invalid("pick sequence is empty"));
        }
        if let Some(w) = picks.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "picks are not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self(picks))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        self.0[self.0.len() - 1]
    }
}

/// Segment membership of every sampled timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndexMap {
    /// `segment_ids[t]` is the segment containing pick `t`.
    pub segment_ids: Vec<usize>,
    /// `index_sets[k]` lists the sampled timesteps falling in segment `k`.
    pub index_sets: Vec<Vec<usize>>,
    /// Segment lengths in frames.
    pub lengths: Vec<usize>,
    /// `sampled_counts[k] == index_sets[k].len()`.
    pub sampled_counts: Vec<usize>,
}

impl SegmentIndexMap {
    pub fn n_segments(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_steps(&self) -> usize {
        self.segment_ids.len()
    }
}

pub fn assign_segment_ids(picks: &PickSequence, cps: &ChangePointPartition) -> Result<SegmentIndexMap> {
    let m = cps.n_segments();
    let mut segment_ids = Vec::with_capacity(picks.len());
    let mut index_sets = vec![Vec::new(); m];
    for (t, &p) in picks.as_slice().iter().enumerate() {
        let k = cps.segment_of(p).ok_or(Error::Coverage { pick: p })?;
        segment_ids.push(k);
        index_sets[k].push(t);
    }
    let sampled_counts = index_sets.iter().map(Vec::len).collect();
    Ok(SegmentIndexMap {
        segment_ids,
        index_sets,
        lengths: cps.lengths(),
        sampled_counts,
    })
}

/// Piecewise-constant expansion of sampled scores onto `n_frames` frames.
///
/// Frame `n` in `[p_t, p_{t+1})` takes `scores[t]`, the tail `[p_T, N)` takes
/// the last score, and frames before the first pick take the first score.
pub fn expand_scores(scores: &[f64], picks: &PickSequence, n_frames: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot expand an empty score list"));
    }
    if scores.len() != picks.len() {
        return Err(Error::shape(
            "expand_scores",
            format!("{} scores for {} picks", scores.len(), picks.len()),
        ));
    }
    if picks.last() >= n_frames {
        return Err(Error::Coverage { pick: picks.last() });
    }
    let p = picks.as_slice();
    let mut out = Vec::with_capacity(n_frames);
    out.resize(p[0], scores[0]);
    for t in 0..p.len() {
        let end = p.get(t + 1).copied().unwrap_or(n_frames);
        out.resize(end, scores[t]);
    }
    Ok(out)
}

/// Mean of the sampled scores inside each segment; segments without picks pool to 0.
pub fn pool_segment_scores(scores: &[f64], seg: &SegmentIndexMap) -> Result<Vec<f64>> {
    if scores.len() != seg.n_steps() {
        return Err(Error::shape(
            "pool_segment_scores",
            format!("{} scores for {} timesteps", scores.len(), seg.n_steps()),
        ));
    }
    Ok(seg
        .index_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                0.0
            } else {
                set.iter().map(|&t| scores[t]).sum::<f64>() / set.len() as f64
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cps(pairs: &[(usize, usize)], n: usize) -> ChangePointPartition {
        ChangePointPartition::from_pairs(pairs, n).unwrap()
    }

    fn picks(p: &[usize]) -> PickSequence {
        PickSequence::new(p.to_vec()).unwrap()
    }

    // Independent scan of every pick against every interval.
    fn brute_ids(p: &[usize], pairs: &[(usize, usize)]) -> Vec<usize> {
        p.iter()
            .map(|&x| pairs.iter().position(|&(s, e)| s <= x && x <= e).unwrap())
            .collect()
    }

    #[test]
    fn assigns_two_segments() {
        let map = assign_segment_ids(&picks(&[0, 1, 3, 5]), &cps(&[(0, 2), (3, 5)], 6)).unwrap();
        assert_eq!(map.segment_ids, vec![0, 0, 1, 1]);
        assert_eq!(map.lengths, vec![3, 3]);
        assert_eq!(map.sampled_counts, vec![2, 2]);
    }

    #[test]
    fn single_frame_video() {
        let map = assign_segment_ids(&picks(&[0]), &cps(&[(0, 0)], 1)).unwrap();
        assert_eq!(map.segment_ids, vec![0]);
        assert_eq!(map.lengths, vec![1]);
        assert_eq!(map.sampled_counts, vec![1]);
    }

    #[test]
    fn three_segments_match_brute_force() {
        let pairs = [(0, 3), (4, 4), (5, 9)];
        let p = [0, 2, 4, 6, 8];
        let map = assign_segment_ids(&picks(&p), &cps(&pairs, 10)).unwrap();
        assert_eq!(map.segment_ids, brute_ids(&p, &pairs));
        assert_eq!(map.segment_ids, vec![0, 0, 1, 2, 2]);
        assert_eq!(map.sampled_counts, vec![2, 1, 2]);
        assert_eq!(map.lengths, vec![4, 1, 5]);
    }

    #[test]
    fn pick_past_the_end_is_a_coverage_violation() {
        let err = assign_segment_ids(&picks(&[0, 6]), &cps(&[(0, 5)], 6)).unwrap_err();
        assert!(matches!(err, Error::Coverage { pick: 6 }));
    }

    #[test]
    fn malformed_partitions_are_rejected() {
        assert!(ChangePointPartition::from_pairs(&[(1, 5)], 6).is_err());
        assert!(ChangePointPartition::from_pairs(&[(0, 2), (4, 5)], 6).is_err());
        assert!(ChangePointPartition::from_pairs(&[(0, 2), (3, 4)], 6).is_err());
        assert!(ChangePointPartition::from_pairs(&[(0, 2), (3, 2)], 6).is_err());
        assert!(ChangePointPartition::from_pairs(&[], 6).is_err());
        assert!(PickSequence::new(vec![0, 2, 2]).is_err());
        assert!(PickSequence::new(vec![]).is_err());
    }

    #[test]
    fn expand_basic_and_tail() {
        let out = expand_scores(&[1.0, 2.0, 3.0], &picks(&[0, 2, 4]), 6).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let out = expand_scores(&[7.5], &picks(&[0]), 4).unwrap();
        assert_eq!(out, vec![7.5; 4]);
    }

    #[test]
    fn expand_backfills_leading_frames() {
        // oracle: per-frame interval rules
        let scores = [1.0, 2.0];
        let p = [1usize, 3];
        let n = 5;
        let oracle: Vec<f64> = (0..n)
            .map(|f| {
                let t = p.iter().rposition(|&x| x <= f).unwrap_or(0);
                scores[t]
            })
            .collect();
        let out = expand_scores(&scores, &picks(&p), n).unwrap();
        assert_eq!(out, oracle);
        // frames 1..3 belong to the first pick, frames 3..5 to the second
        assert_eq!(out, vec![1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn expand_rejects_empty_scores() {
        let p = PickSequence(vec![]);
        assert!(matches!(expand_scores(&[], &p, 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pooling() {
        let seg = |ids: Vec<usize>, m: usize| {
            let mut index_sets = vec![Vec::new(); m];
            for (t, &k) in ids.iter().enumerate() {
                index_sets[k].push(t);
            }
            SegmentIndexMap {
                sampled_counts: index_sets.iter().map(Vec::len).collect(),
                segment_ids: ids,
                index_sets,
                lengths: vec![1; m],
            }
        };
        assert_eq!(
            pool_segment_scores(&[1.0, 3.0, 5.0, 7.0], &seg(vec![0, 0, 1, 1], 2)).unwrap(),
            vec![2.0, 6.0]
        );
        assert_eq!(pool_segment_scores(&[4.0], &seg(vec![0], 1)).unwrap(), vec![4.0]);
        assert_eq!(
            pool_segment_scores(&[1.0, 2.0, 3.0], &seg(vec![0, 0, 0], 2)).unwrap(),
            vec![2.0, 0.0]
        );
    }

    /// Random (N, partition, picks) triples with every segment holding >= 1 pick
    /// when `dense` is set.
    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, Vec<usize>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::btree_set(1..n, 0..n.min(8)),
                    proptest::collection::btree_set(0..n, 1..=n),
                )
            })
            .prop_map(|(n, cuts, picks)| {
                let mut bounds: Vec<usize> = std::iter::once(0).chain(cuts).collect();
                bounds.push(n);
                let pairs = bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect();
                (n, pairs, picks.into_iter().collect())
            })
    }

    proptest! {
        #[test]
        fn index_sets_partition_the_timesteps((n, pairs, p) in instance()) {
            let map = assign_segment_ids(&picks(&p), &cps(&pairs, n)).unwrap();
            let flat: Vec<usize> = map.index_sets.concat();
            prop_assert_eq!(flat, (0..p.len()).collect::<Vec<_>>());
            prop_assert!(map.segment_ids.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(map.sampled_counts.iter().sum::<usize>(), p.len());
            prop_assert_eq!(map.lengths.iter().sum::<usize>(), n);
            prop_assert_eq!(map.segment_ids, brute_ids(&p, &pairs));
        }

        #[test]
        fn expansion_has_n_frames_and_only_input_values((n, _pairs, p) in instance(), seed in 0u64..1000) {
            let scores: Vec<f64> = (0..p.len()).map(|t| ((t as u64 * 7919 + seed) % 101) as f64).collect();
            let out = expand_scores(&scores, &picks(&p), n).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert!(out.iter().all(|v| scores.contains(v)));
            for (t, &pt) in p.iter().enumerate() {
                prop_assert_eq!(out[pt], scores[t]);
            }
        }

        #[test]
        fn pooling_survives_expand_and_resample((n, pairs, p) in instance()) {
            let partition = cps(&pairs, n);
            let seq = picks(&p);
            let map = assign_segment_ids(&seq, &partition).unwrap();
            prop_assume!(map.sampled_counts.iter().all(|&c| c > 0));
            let scores: Vec<f64> = (0..p.len()).map(|t| (t as f64).sin()).collect();
            let dense = expand_scores(&scores, &seq, n).unwrap();
            let resampled: Vec<f64> = p.iter().map(|&f| dense[f]).collect();
            prop_assert_eq!(
                pool_segment_scores(&resampled, &map).unwrap(),
                pool_segment_scores(&scores, &map).unwrap()
            );
        }
    }
}
