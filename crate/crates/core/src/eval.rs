//! Rank correlations, the two evaluation protocols and flip-rate diagnostics.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{Annotations, DatasetMode, VideoRecord};
use crate::decoder::decode_summary;
use crate::error::{Error, Result};
use crate::timeline::{ChangePointPartition, PickSequence};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "correlation",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two observations"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    Ok(())
}

fn is_constant(a: &[f64]) -> bool {
    a.iter().all(|&v| v == a[0])
}

/// Pairs tied within runs of equal values of a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (pairs `i < j` with `v[i] > v[j]`).
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps =
        sort_counting_swaps(&mut v[..mid], &mut buf[..mid]) + sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b, or `None` when either vector is constant.
///
/// O(n log n): sort by `(a, b)`, then count discordant pairs as merge-sort
/// inversions of `b`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_pair(a, b)?;
    if is_constant(a) || is_constant(b) {
        return Ok(None);
    }
    let n = a.len() as u64;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let ties_a = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ties_joint = tied_pairs(&pairs);
    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; bs.len()];
    let discordant = sort_counting_swaps(&mut bs, &mut buf);
    let ties_b = tied_pairs(&bs);
    let n0 = n * (n - 1) / 2;
    // concordant - discordant = n0 - n1 - n2 + n3 - 2 * discordant
    let numerator = n0 as i64 - ties_a as i64 - ties_b as i64 + ties_joint as i64 - 2 * discordant as i64;
    Ok(Some(tau_b(numerator, n0 - ties_a, n0 - ties_b)))
}

/// Shared final step so every pair-counting route rounds identically.
pub fn tau_b(concordant_minus_discordant: i64, untied_a: u64, untied_b: u64) -> f64 {
    concordant_minus_discordant as f64 / ((untied_a as f64) * (untied_b as f64)).sqrt()
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && a[order[end]] == a[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share rank (start + 1 + end) / 2
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Two-pass Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rho with average ranks, or `None` when either vector is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_pair(a, b)?;
    if is_constant(a) || is_constant(b) {
        return Ok(None);
    }
    Ok(Some(pearson(&average_ranks(a), &average_ranks(b))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoCorrelation {
    pub id: String,
    /// `None` marks a degenerate (constant) comparison.
    pub tau: Option<f64>,
    pub rho: Option<f64>,
}

impl VideoCorrelation {
    pub fn is_degenerate(&self) -> bool {
        self.tau.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub protocol: DatasetMode,
    pub per_video: Vec<VideoCorrelation>,
    /// Means over non-degenerate videos; `None` if every video is degenerate.
    pub mean_tau: Option<f64>,
    pub mean_rho: Option<f64>,
    pub n_degenerate: usize,
}

impl CorrelationReport {
    fn from_videos(protocol: DatasetMode, per_video: Vec<VideoCorrelation>) -> Self {
        let mean = |f: fn(&VideoCorrelation) -> Option<f64>| {
            let vals: Vec<f64> = per_video.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mean_tau = mean(|v| v.tau);
        let mean_rho = mean(|v| v.rho);
        let n_degenerate = per_video.iter().filter(|v| v.is_degenerate()).count();
        Self {
            protocol,
            per_video,
            mean_tau,
            mean_rho,
            n_degenerate,
        }
    }

    /// CSV with columns `video_id,tau,rho,degenerate` and a `mean` footer.
    pub fn to_csv(&self) -> Result<String> {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["video_id", "tau", "rho", "degenerate"])?;
        for v in &self.per_video {
            w.write_record([v.id.clone(), fmt(v.tau), fmt(v.rho), v.is_degenerate().to_string()])?;
        }
        w.write_record([
            "mean".to_owned(),
            fmt(self.mean_tau),
            fmt(self.mean_rho),
            self.n_degenerate.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn check_prediction(id: &str, prediction: &[f64], annotations: &Array2<f64>) -> Result<()> {
    if annotations.nrows() == 0 || annotations.ncols() != prediction.len() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "video {id}: prediction length {} vs annotations {:?}",
                prediction.len(),
                annotations.dim()
            ),
        ));
    }
    Ok(())
}

/// Correlation against each annotator row, averaged over non-degenerate rows.
pub fn tvsum_video(id: &str, prediction: &[f64], annotations: &Array2<f64>) -> Result<VideoCorrelation> {
    check_prediction(id, prediction, annotations)?;
    let (mut taus, mut rhos) = (Vec::new(), Vec::new());
    for row in annotations.rows() {
        let row = row.to_vec();
        if let Some(t) = kendall_tau(prediction, &row)? {
            taus.push(t);
        }
        if let Some(r) = spearman_rho(prediction, &row)? {
            rhos.push(r);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(VideoCorrelation {
        id: id.to_owned(),
        tau: mean(&taus),
        rho: mean(&rhos),
    })
}

/// Correlation against the elementwise mean of the binary user summaries.
pub fn summe_video(id: &str, prediction: &[f64], summaries: &Array2<f64>) -> Result<VideoCorrelation> {
    check_prediction(id, prediction, summaries)?;
    let target = summaries.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec();
    Ok(VideoCorrelation {
        id: id.to_owned(),
        tau: kendall_tau(prediction, &target)?,
        rho: spearman_rho(prediction, &target)?,
    })
}

pub fn evaluate_tvsum(videos: &[(&str, &[f64], &Array2<f64>)]) -> Result<CorrelationReport> {
    let per_video = videos
        .iter()
        .map(|(id, p, a)| tvsum_video(id, p, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationReport::from_videos(DatasetMode::Tvsum, per_video))
}

pub fn evaluate_summe(videos: &[(&str, &[f64], &Array2<f64>)]) -> Result<CorrelationReport> {
    let per_video = videos
        .iter()
        .map(|(id, p, a)| summe_video(id, p, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationReport::from_videos(DatasetMode::Summe, per_video))
}

/// Runs the protocol matching `protocol` over dataset records.
///
/// `predictions[i]` belongs to `videos[i]`.
pub fn evaluate_records(
    protocol: DatasetMode,
    videos: &[VideoRecord],
    predictions: &[Vec<f64>],
) -> Result<CorrelationReport> {
    if videos.len() != predictions.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} videos", predictions.len(), videos.len()),
        ));
    }
    let mut per_video = Vec::with_capacity(videos.len());
    for (v, p) in videos.iter().zip(predictions) {
        let row = match (&v.annotations, protocol) {
            (Annotations::Scores(a), DatasetMode::Tvsum) => tvsum_video(&v.id, p, a)?,
            (Annotations::Summaries(a), DatasetMode::Summe) => summe_video(&v.id, p, a)?,
            (ann, _) => {
                return Err(Error::config(format!(
                    "protocol {protocol} cannot evaluate {} annotations (video {})",
                    ann.mode(),
                    v.id
                )))
            }
        };
        per_video.push(row);
    }
    Ok(CorrelationReport::from_videos(protocol, per_video))
}

/// Scores each video's reference targets against themselves: every TVSum
/// annotator row against itself, the SumMe mean summary against itself.
pub fn evaluate_oracle(protocol: DatasetMode, videos: &[VideoRecord]) -> Result<CorrelationReport> {
    let mut per_video = Vec::with_capacity(videos.len());
    for v in videos {
        let row = match (&v.annotations, protocol) {
            (Annotations::Scores(a), DatasetMode::Tvsum) => {
                let (mut taus, mut rhos) = (Vec::new(), Vec::new());
                for r in a.rows() {
                    let r = r.to_vec();
                    let one = Array2::from_shape_vec((1, r.len()), r.clone()).expect("row shape");
                    let c = tvsum_video(&v.id, &r, &one)?;
                    taus.extend(c.tau);
                    rhos.extend(c.rho);
                }
                let mean = |x: &[f64]| (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64);
                VideoCorrelation {
                    id: v.id.clone(),
                    tau: mean(&taus),
                    rho: mean(&rhos),
                }
            }
            (Annotations::Summaries(a), DatasetMode::Summe) => {
                let target = a.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec();
                summe_video(&v.id, &target, a)?
            }
            (ann, _) => {
                return Err(Error::config(format!(
                    "protocol {protocol} cannot evaluate {} annotations (video {})",
                    ann.mode(),
                    v.id
                )))
            }
        };
        per_video.push(row);
    }
    Ok(CorrelationReport::from_videos(protocol, per_video))
}

/// Fraction of `trials` decodes under per-pick `N(0, sigma^2)` noise whose
/// selected segments differ from the unperturbed decode.
pub fn flip_rate(
    scores: &[f64],
    picks: &PickSequence,
    cps: &ChangePointPartition,
    rho: f64,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("flip_rate needs at least one trial"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be non-negative, got {sigma}")));
    }
    let base = decode_summary(scores, picks, cps, rho)?.selected_segments;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = 0usize;
    let mut perturbed = vec![0.0; scores.len()];
    for _ in 0..trials {
        for (p, &s) in perturbed.iter_mut().zip(scores) {
            *p = s + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        if decode_summary(&perturbed, picks, cps, rho)?.selected_segments != base {
            flips += 1;
        }
    }
    Ok(flips as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn naive_tau(a: &[f64], b: &[f64]) -> Option<f64> {
        let n = a.len();
        let (mut s, mut ta, mut tb) = (0i64, 0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap() as i64;
                let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap() as i64;
                s += da * db;
                ta += u64::from(a[i] == a[j]);
                tb += u64::from(b[i] == b[j]);
            }
        }
        let n0 = (n * (n - 1) / 2) as u64;
        (ta < n0 && tb < n0).then(|| tau_b(s, n0 - ta, n0 - tb))
    }

    fn naive_ranks(a: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|&x| {
                let below = a.iter().filter(|&&y| y < x).count() as f64;
                let equal = a.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_abs_diff_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kendall_with_ties_by_hand() {
        // (0,1) tied in a, (2,3) tied in b, the other four concordant
        let a = [1.0, 1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0, 3.0];
        assert_abs_diff_eq!(kendall_tau(&a, &b).unwrap().unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[0.3, 0.1, 0.2], &[0.3, 0.1, 0.2]).unwrap(), Some(1.0));
        assert_abs_diff_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let r = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(r, 4.5 / (4.5f64 * 5.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.9486832980505138, epsilon = 1e-12);
        assert_eq!(spearman_rho(&[2.0, 2.0], &[1.0, 3.0]).unwrap(), None);
    }

    #[test]
    fn tvsum_protocol() {
        let pred = [0.1, 0.4, 0.2, 0.3];
        let ann = array![[0.1, 0.4, 0.2, 0.3], [0.4, 0.1, 0.2, 0.3]];
        let v = tvsum_video("v", &pred, &ann).unwrap();
        let t0 = 1.0;
        let t1 = kendall_tau(&pred, &[0.4, 0.1, 0.2, 0.3]).unwrap().unwrap();
        assert_abs_diff_eq!(v.tau.unwrap(), (t0 + t1) / 2.0, epsilon = 1e-15);

        let same = array![[1.0, 3.0, 2.0, 0.0], [1.0, 3.0, 2.0, 0.0]];
        let v = tvsum_video("v", &[1.0, 3.0, 2.0, 0.0], &same).unwrap();
        assert_eq!((v.tau, v.rho), (Some(1.0), Some(1.0)));

        let videos = [
            VideoCorrelation {
                id: "a".into(),
                tau: Some(0.2),
                rho: Some(0.1),
            },
            VideoCorrelation {
                id: "b".into(),
                tau: Some(0.4),
                rho: Some(0.2),
            },
            VideoCorrelation {
                id: "c".into(),
                tau: Some(0.6),
                rho: None,
            },
            VideoCorrelation {
                id: "d".into(),
                tau: None,
                rho: None,
            },
        ];
        let report = CorrelationReport::from_videos(DatasetMode::Tvsum, videos.to_vec());
        assert_abs_diff_eq!(report.mean_tau.unwrap(), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(report.mean_rho.unwrap(), 0.15, epsilon = 1e-15);
        assert_eq!(report.n_degenerate, 1);
    }

    #[test]
    fn summe_protocol() {
        let v = summe_video("v", &[0.1, 0.9], &array![[0.0, 1.0]]).unwrap();
        assert_eq!((v.tau, v.rho), (Some(1.0), Some(1.0)));
        let v = summe_video("v", &[0.1, 0.9, 0.5], &array![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert!(v.is_degenerate());
        let v = summe_video("v", &[0.9, 0.5, 0.1], &array![[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        assert_eq!((v.tau, v.rho), (Some(1.0), Some(1.0)));

        let pred = [0.5, 0.2, 0.9, 0.1];
        let row = array![[0.3, 0.3, 0.8, 0.1]];
        let a = evaluate_tvsum(&[("x", &pred, &row)]).unwrap();
        let b = evaluate_summe(&[("x", &pred, &row)]).unwrap();
        assert_eq!(a.mean_tau, b.mean_tau);
        assert_eq!(a.mean_rho, b.mean_rho);
    }

    #[test]
    fn csv_has_footer() {
        let pred = [0.5, 0.2, 0.9];
        let row = array![[0.3, 0.3, 0.8]];
        let flat = array![[0.3, 0.3, 0.3]];
        let report = evaluate_tvsum(&[("x", &pred, &row), ("y", &pred, &flat)]).unwrap();
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "video_id,tau,rho,degenerate");
        assert!(lines[2].starts_with("y,,,true"));
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[3].ends_with(",1"));
    }

    #[test]
    fn oracle_predictions_score_one() {
        use crate::data::{generate_synthetic, SyntheticConfig};
        for mode in [DatasetMode::Tvsum, DatasetMode::Summe] {
            let data = generate_synthetic(&SyntheticConfig {
                n_videos: 3,
                mode,
                ..SyntheticConfig::default()
            })
            .unwrap();
            let report = evaluate_oracle(mode, &data.videos).unwrap();
            assert_eq!(report.per_video.len(), 3);
            assert_eq!(report.mean_tau, Some(1.0));
            assert_eq!(report.mean_rho, Some(1.0));
            let other = match mode {
                DatasetMode::Tvsum => DatasetMode::Summe,
                DatasetMode::Summe => DatasetMode::Tvsum,
            };
            assert!(matches!(evaluate_oracle(other, &data.videos), Err(Error::Config(_))));
        }
    }

    fn single_picks(n: usize) -> (PickSequence, ChangePointPartition) {
        let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k, k)).collect();
        (
            PickSequence::new((0..n).collect()).unwrap(),
            ChangePointPartition::from_pairs(&pairs, n).unwrap(),
        )
    }

    #[test]
    fn flip_rate_examples() {
        let (picks, cps) = single_picks(10);
        let scores = [0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.4, 0.6, 0.7, 0.0];
        assert_eq!(flip_rate(&scores, &picks, &cps, 0.3, 0.0, 50, 1).unwrap(), 0.0);
        let separated = [5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(flip_rate(&separated, &picks, &cps, 0.1, 0.01, 100, 2).unwrap(), 0.0);

        // two equal weight-1 segments, capacity 1 (N = 2, rho = 0.5)
        let (picks, cps) = single_picks(2);
        let r = flip_rate(&[0.5, 0.5], &picks, &cps, 0.5, 0.1, 2000, 3).unwrap();
        assert!((r - 0.5).abs() < 0.1, "{r}");
        assert!(flip_rate(&[0.5, 0.5], &picks, &cps, 0.5, 0.1, 0, 3).is_err());
    }

    fn tied_vector() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..6).prop_map(f64::from), n),
                prop::collection::vec((0i32..6).prop_map(f64::from), n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_naive_oracles((a, b) in tied_vector()) {
            prop_assert_eq!(kendall_tau(&a, &b).unwrap(), naive_tau(&a, &b));
            prop_assert_eq!(average_ranks(&a), naive_ranks(&a));
            let want = (!is_constant(&a) && !is_constant(&b)).then(|| pearson(&naive_ranks(&a), &naive_ranks(&b)));
            prop_assert_eq!(spearman_rho(&a, &b).unwrap(), want);
        }

        #[test]
        fn bounded((a, b) in tied_vector()) {
            if let Some(t) = kendall_tau(&a, &b).unwrap() {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
            }
            if let Some(r) = spearman_rho(&a, &b).unwrap() {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }

        #[test]
        fn monotone_transform_invariance((a, b) in tied_vector()) {
            let ta: Vec<f64> = a.iter().map(|x| x.exp() * 3.0 - 7.0).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * x * x + 0.5).collect();
            prop_assert_eq!(kendall_tau(&a, &b).unwrap(), kendall_tau(&ta, &tb).unwrap());
            prop_assert_eq!(spearman_rho(&a, &b).unwrap(), spearman_rho(&ta, &tb).unwrap());
        }
    }
}
