//! OKS-based average precision, crowd buckets, coarse-versus-refined pose
//! quality and the NMS upper-bound sweep.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Pose, Scene};
use crate::error::{Error, Result};
use crate::model::{dense_candidates, DecodeMode, ForwardOptions, Model};
use crate::nms::{greedy_nms, Detection, NmsKind, Similarity, DEFAULT_MAX_KEEP};
use crate::oks::{oks, OksParams};

/// Number of recall sample points of the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_BUCKET_CUTS: (f64, f64) = (0.1, 0.3);

/// The ten OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn gt_counts(gt: &Pose) -> bool {
    gt.num_visible() > 0
}

/// Greedy matching of one scene: detections in descending score order claim
/// the unmatched ground truth of highest OKS at or above `threshold`.
/// Returns `(score, is_true_positive)` in processing order.
fn match_scene(
    dets: &[Detection],
    gts: &[Pose],
    threshold: f64,
    params: &OksParams,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || !gt_counts(g) {
                    continue;
                }
                let v = oks(&dets[d].pose, g, params).unwrap_or(0.0);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (dets[d].score, best.is_some())
        })
        .collect()
}

/// COCO-style AP at one OKS threshold, pooled over scenes. Returns 0 when
/// no scene has a ground-truth pose.
pub fn oks_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<Pose>],
    threshold: f64,
    params: &OksParams,
) -> f64 {
    let npos: usize = gts.iter().flatten().filter(|g| gt_counts(g)).count();
    if npos == 0 {
        return 0.0;
    }
    let mut pooled: Vec<(f64, bool)> = dets
        .iter()
        .zip(gts)
        .flat_map(|(d, g)| match_scene(d, g, threshold, params))
        .collect();
    // Stable: ties keep scene order, then in-scene order.
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut precision = Vec::with_capacity(pooled.len());
    let mut recall = Vec::with_capacity(pooled.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &pooled {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Independent re-derivation of [`oks_ap`] for testing: enumerates every
/// prefix of the ranked list for every recall level.
pub fn ap_bruteforce_oracle(
    dets: &[Vec<Detection>],
    gts: &[Vec<Pose>],
    threshold: f64,
    params: &OksParams,
) -> f64 {
    let mut npos = 0;
    for scene in gts {
        for g in scene {
            if g.keypoints.iter().any(|k| k.v > 0) {
                npos += 1;
            }
        }
    }
    if npos == 0 {
        return 0.0;
    }
    // Rank key: (score desc, scene, rank of the detection inside its scene).
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, scene) in dets.iter().enumerate() {
        let mut local: Vec<usize> = (0..scene.len()).collect();
        // Insertion sort by descending score keeps equal scores in input order.
        for i in 1..local.len() {
            let mut j = i;
            while j > 0 && scene[local[j - 1]].score < scene[local[j]].score {
                local.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used = vec![false; gts[s].len()];
        for (rank, &d) in local.iter().enumerate() {
            let mut pick = None;
            let mut pick_v = -1.0;
            for (j, g) in gts[s].iter().enumerate() {
                if used[j] || !g.keypoints.iter().any(|k| k.v > 0) {
                    continue;
                }
                let v = oks(&scene[d].pose, g, params).unwrap_or(0.0);
                if v >= threshold && v > pick_v {
                    pick = Some(j);
                    pick_v = v;
                }
            }
            if let Some(j) = pick {
                used[j] = true;
            }
            ranked.push((scene[d].score, s, rank, pick.is_some()));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let mut best: f64 = 0.0;
        for k in 1..=ranked.len() {
            let tp = ranked[..k].iter().filter(|x| x.3).count();
            let rec = tp as f64 / npos as f64;
            if rec >= level {
                best = best.max(tp as f64 / k as f64);
            }
        }
        total += best;
    }
    total / 101.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    /// mAP of the scenes in each bucket; `None` for an empty bucket.
    pub easy: Option<f64>,
    pub medium: Option<f64>,
    pub hard: Option<f64>,
    /// Scene counts of (easy, medium, hard).
    pub counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `(threshold, AP)` for the ten thresholds.
    pub ap_per_threshold: Vec<(f64, f64)>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub buckets: BucketResult,
}

/// Bucket of a crowd index: 0 easy (`< lo`), 1 medium, 2 hard (`>= hi`).
pub fn crowd_bucket(crowd_index: f64, cuts: (f64, f64)) -> usize {
    if crowd_index < cuts.0 {
        0
    } else if crowd_index < cuts.1 {
        1
    } else {
        2
    }
}

pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<Pose>], params: &OksParams) -> f64 {
    let aps: Vec<f64> = oks_thresholds()
        .into_iter()
        .map(|t| oks_ap(dets, gts, t, params))
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn summarize(
    dets: &[Vec<Detection>],
    gts: &[Vec<Pose>],
    crowd: &[f64],
    params: &OksParams,
    cuts: (f64, f64),
) -> Result<EvalResult> {
    if dets.len() != gts.len() || crowd.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} detection lists, {} ground-truth lists, {} crowd indices",
            dets.len(),
            gts.len(),
            crowd.len()
        )));
    }
    if !(0.0..=1.0).contains(&cuts.0) || !(cuts.0..=1.0).contains(&cuts.1) {
        return Err(Error::Config(format!("invalid bucket cuts {cuts:?}")));
    }
    let ap_per_threshold: Vec<(f64, f64)> = oks_thresholds()
        .into_iter()
        .map(|t| (t, oks_ap(dets, gts, t, params)))
        .collect();
    let map = ap_per_threshold.iter().map(|x| x.1).sum::<f64>() / ap_per_threshold.len() as f64;
    let mut buckets = [None, None, None];
    let mut counts = [0usize; 3];
    for (b, slot) in buckets.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..gts.len())
            .filter(|&i| crowd_bucket(crowd[i], cuts) == b)
            .collect();
        counts[b] = idx.len();
        if !idx.is_empty() {
            let d: Vec<Vec<Detection>> = idx.iter().map(|&i| dets[i].clone()).collect();
            let g: Vec<Vec<Pose>> = idx.iter().map(|&i| gts[i].clone()).collect();
            *slot = Some(mean_ap(&d, &g, params));
        }
    }
    Ok(EvalResult {
        ap50: ap_per_threshold[0].1,
        ap75: ap_per_threshold[5].1,
        ap_per_threshold,
        map,
        buckets: BucketResult {
            easy: buckets[0],
            medium: buckets[1],
            hard: buckets[2],
            counts,
        },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const EVAL_CSV_HEADER: &str = "metric,value";

/// Rows `mAP, AP50, AP75, AP@0.50 .. AP@0.95, AP_easy, AP_medium, AP_hard,
/// n_easy, n_medium, n_hard`; absent bucket values are empty.
pub fn eval_csv(r: &EvalResult) -> String {
    let mut s = format!(
        "{EVAL_CSV_HEADER}\nmAP,{}\nAP50,{}\nAP75,{}\n",
        r.map, r.ap50, r.ap75
    );
    for (t, ap) in &r.ap_per_threshold {
        let _ = writeln!(s, "AP@{t:.2},{ap}");
    }
    let b = &r.buckets;
    let _ = writeln!(s, "AP_easy,{}", opt(b.easy));
    let _ = writeln!(s, "AP_medium,{}", opt(b.medium));
    let _ = writeln!(s, "AP_hard,{}", opt(b.hard));
    let _ = writeln!(s, "n_easy,{}", b.counts[0]);
    let _ = writeln!(s, "n_medium,{}", b.counts[1]);
    let _ = writeln!(s, "n_hard,{}", b.counts[2]);
    s
}

/// Best OKS of any candidate against each counted ground truth, over all
/// scenes in order.
pub fn best_oks_per_gt(
    cands: &[Vec<Detection>],
    gts: &[Vec<Pose>],
    params: &OksParams,
) -> Vec<f64> {
    cands
        .iter()
        .zip(gts)
        .flat_map(|(c, g)| {
            g.iter().filter(|p| gt_counts(p)).map(move |gt| {
                c.iter()
                    .map(|d| oks(&d.pose, gt, params).unwrap_or(0.0))
                    .fold(0.0, f64::max)
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over ground-truth poses of the best OKS among all dense candidates
/// (every cell of every level, no score filtering), decoded per `mode`.
pub fn mean_best_oks(
    model: &Model,
    scenes: &[Scene],
    params: &OksParams,
    mode: DecodeMode,
) -> Result<f64> {
    Ok(refinement_gain_modes(model, scenes, params, &[mode])?[0])
}

fn refinement_gain_modes(
    model: &Model,
    scenes: &[Scene],
    params: &OksParams,
    modes: &[DecodeMode],
) -> Result<Vec<f64>> {
    let preds = scenes
        .par_iter()
        .map(|s| model.forward(&s.image, ForwardOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Pose>> = scenes.iter().map(|s| s.gt_poses.clone()).collect();
    Ok(modes
        .iter()
        .map(|&mode| {
            let cands: Vec<Vec<Detection>> =
                preds.iter().map(|p| dense_candidates(p, mode)).collect();
            mean(&best_oks_per_gt(&cands, &gts, params))
        })
        .collect())
}

/// `(mean_oks_coarse, mean_oks_refined)`: mean best OKS per ground truth with
/// the refinement zeroed and with the full decode.
pub fn refinement_gain(model: &Model, scenes: &[Scene], params: &OksParams) -> Result<(f64, f64)> {
    let v = refinement_gain_modes(
        model,
        scenes,
        params,
        &[DecodeMode::Coarse, DecodeMode::Refined],
    )?;
    Ok((v[0], v[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "seed")]
pub enum ScorePolicy {
    /// Every pose scores 1.0; suppression order is input order.
    Uniform,
    /// Scores drawn uniformly from `[0, 1)` with the given seed.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsBoundRow {
    pub nms_kind: NmsKind,
    pub threshold: f64,
    /// Fraction of ground-truth poses surviving suppression.
    pub recall: f64,
    /// AP at OKS 0.5 on the hard bucket with the survivors as predictions;
    /// `None` when the bucket is empty.
    pub ap_hard: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsBoundTable {
    pub rows: Vec<NmsBoundRow>,
}

impl NmsBoundTable {
    pub fn max_recall(&self, kind: NmsKind) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.nms_kind == kind)
            .map(|r| r.recall)
            .fold(0.0, f64::max)
    }

    pub fn row(&self, kind: NmsKind, threshold: f64) -> Option<&NmsBoundRow> {
        self.rows
            .iter()
            .find(|r| r.nms_kind == kind && r.threshold == threshold)
    }
}

pub const NMS_BOUND_CSV_HEADER: &str = "nms_kind,threshold,recall,ap_hard";

pub fn nms_bound_csv(t: &NmsBoundTable) -> String {
    let mut s = format!("{NMS_BOUND_CSV_HEADER}\n");
    for r in &t.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.nms_kind.as_str(),
            r.threshold,
            r.recall,
            opt(r.ap_hard)
        );
    }
    s
}

/// Feeds the ground-truth poses of every scene to both NMS variants at each
/// threshold and records how many survive.
pub fn nms_upper_bound(
    scenes: &[Scene],
    thresholds: &[f64],
    policy: ScorePolicy,
    params: &OksParams,
    cuts: (f64, f64),
) -> Result<NmsBoundTable> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("NMS threshold {t} outside (0, 1)")));
    }
    let mut ths = thresholds.to_vec();
    ths.sort_by(f64::total_cmp);
    ths.dedup();

    let mut rng = match policy {
        ScorePolicy::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        ScorePolicy::Uniform => None,
    };
    let inputs: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            s.gt_poses
                .iter()
                .filter(|p| gt_counts(p))
                .map(|p| {
                    let score = rng.as_mut().map_or(1.0, |r| r.random_range(0.0..1.0));
                    Detection::new(p.clone().with_score(score), score, 0)
                })
                .collect()
        })
        .collect();
    let total: usize = inputs.iter().map(Vec::len).sum();
    let hard: Vec<usize> = (0..scenes.len())
        .filter(|&i| crowd_bucket(scenes[i].crowd_index, cuts) == 2)
        .collect();
    let hard_gts: Vec<Vec<Pose>> = hard.iter().map(|&i| scenes[i].gt_poses.clone()).collect();

    let mut rows = Vec::new();
    for kind in [NmsKind::Oks, NmsKind::Iou] {
        let sim = Similarity::new(kind, params);
        for &threshold in &ths {
            let kept: Vec<Vec<Detection>> = inputs
                .par_iter()
                .map(|d| greedy_nms(d, sim, threshold, DEFAULT_MAX_KEEP.max(d.len())))
                .collect();
            let n_kept: usize = kept.iter().map(Vec::len).sum();
            let recall = if total == 0 {
                1.0
            } else {
                n_kept as f64 / total as f64
            };
            let ap_hard = (!hard.is_empty()).then(|| {
                let d: Vec<Vec<Detection>> = hard.iter().map(|&i| kept[i].clone()).collect();
                oks_ap(&d, &hard_gts, 0.5, params)
            });
            rows.push(NmsBoundRow {
                nms_kind: kind,
                threshold,
                recall,
                ap_hard,
            });
        }
    }
    Ok(NmsBoundTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DensePrediction, LevelPrediction};
    use crate::tensor::Tensor;

    fn params() -> OksParams {
        OksParams::new(vec![0.079; 3], 1.0).unwrap()
    }

    fn pose(x: f64, y: f64) -> Pose {
        Pose::from_points(&[(x, y), (x + 20.0, y + 5.0), (x + 8.0, y + 30.0)])
    }

    fn det(p: &Pose, score: f64) -> Detection {
        Detection::new(p.clone().with_score(score), score, 0)
    }

    #[test]
    fn thresholds_are_fixed() {
        let t = oks_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            vec![pose(0.0, 0.0), pose(50.0, 50.0)],
            vec![pose(10.0, 70.0)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .enumerate()
            .map(|(s, g)| {
                g.iter()
                    .enumerate()
                    .map(|(j, p)| det(p, 0.9 - 0.1 * (s * 2 + j) as f64))
                    .collect()
            })
            .collect();
        for t in oks_thresholds() {
            assert_eq!(oks_ap(&dets, &gts, t, &params()), 1.0);
        }
        let r = summarize(&dets, &gts, &[0.0, 0.5], &params(), DEFAULT_BUCKET_CUTS).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.buckets.easy, Some(1.0));
        assert_eq!(r.buckets.medium, None);
        assert_eq!(r.buckets.hard, Some(1.0));
        assert_eq!(r.buckets.counts, [1, 0, 1]);
    }

    #[test]
    fn no_detections_score_zero() {
        let gts = vec![vec![pose(0.0, 0.0)]];
        assert_eq!(oks_ap(&[vec![]], &gts, 0.5, &params()), 0.0);
        assert_eq!(oks_ap(&[vec![]], &[vec![]], 0.5, &params()), 0.0);
    }

    #[test]
    fn hand_walked_pr_curve() {
        // Two GTs; detections: A hits GT0 (0.9), a duplicate of A (0.8) is a
        // false positive, GT1 is missed. PR points: (r .5, p 1), (r .5, p .5).
        let g0 = pose(0.0, 0.0);
        let g1 = pose(60.0, 60.0);
        let dets = vec![vec![
            det(&g0, 0.9),
            det(&g0.translated(0.5, 0.0), 0.8),
            det(&pose(200.0, 0.0), 0.7),
        ]];
        let gts = vec![vec![g0, g1]];
        // Recall levels 0.00..0.50 (51 of them) get precision 1, the rest 0.
        let expect = 51.0 / 101.0;
        assert!((oks_ap(&dets, &gts, 0.5, &params()) - expect).abs() < 1e-15);
        assert!((ap_bruteforce_oracle(&dets, &gts, 0.5, &params()) - expect).abs() < 1e-15);
    }

    #[test]
    fn ap_monotone_in_threshold() {
        let g = pose(0.0, 0.0);
        let dets = vec![vec![
            det(&g.translated(1.5, -1.0), 0.8),
            det(&pose(30.0, 30.0).translated(0.5, 0.5), 0.6),
        ]];
        let gts = vec![vec![g, pose(30.0, 30.0)]];
        let aps: Vec<f64> = oks_thresholds()
            .into_iter()
            .map(|t| oks_ap(&dets, &gts, t, &params()))
            .collect();
        assert!(aps.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn refinement_gain_on_constructed_prediction() {
        // One level, stride 4, a single GT whose exact offsets are split into
        // a biased coarse part and a correcting refinement.
        let gt = Pose::from_points(&[(10.0, 6.0), (14.0, 10.0), (10.0, 14.0)]);
        let mut lp = LevelPrediction {
            stride: 4,
            coarse: Tensor::zeros(&[6, 3, 3]),
            refine: Tensor::zeros(&[6, 3, 3]),
            logits: Tensor::zeros(&[1, 3, 3]),
            heatmaps: None,
        };
        // Cell (2, 2) has center (10, 10).
        let exact = [0.0, -1.0, 1.0, 0.0, 0.0, 1.0];
        for ch in 0..6 {
            lp.coarse.set3(ch, 2, 2, exact[ch] + 0.75);
            lp.refine.set3(ch, 2, 2, -0.75);
        }
        let pred = DensePrediction { levels: vec![lp] };
        let gts = vec![vec![gt]];
        let coarse = best_oks_per_gt(
            &[dense_candidates(&pred, DecodeMode::Coarse)],
            &gts,
            &params(),
        );
        let refined = best_oks_per_gt(
            &[dense_candidates(&pred, DecodeMode::Refined)],
            &gts,
            &params(),
        );
        assert!(coarse[0] < 1.0);
        assert_eq!(refined[0], 1.0);
    }

    fn scene_with(poses: Vec<Pose>, crowd: f64) -> Scene {
        Scene {
            image: Tensor::zeros(&[1, 4, 4]),
            gt_poses: poses,
            crowd_index: crowd,
        }
    }

    #[test]
    fn bound_without_overlap_keeps_everything() {
        let scenes = vec![scene_with(vec![pose(0.0, 0.0), pose(100.0, 100.0)], 0.0)];
        let t = nms_upper_bound(
            &scenes,
            &[0.1, 0.5, 0.9],
            ScorePolicy::Uniform,
            &params(),
            DEFAULT_BUCKET_CUTS,
        )
        .unwrap();
        assert_eq!(t.rows.len(), 6);
        assert!(t
            .rows
            .iter()
            .all(|r| r.recall == 1.0 && r.ap_hard.is_none()));
    }

    #[test]
    fn bound_suppresses_exact_duplicates() {
        let p = pose(5.0, 5.0);
        let scenes = vec![scene_with(vec![p.clone(), p], 1.0)];
        let t = nms_upper_bound(
            &scenes,
            &[0.2, 0.6, 0.95],
            ScorePolicy::Uniform,
            &params(),
            DEFAULT_BUCKET_CUTS,
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.recall == 0.5));
        let r = nms_upper_bound(
            &scenes,
            &[0.5],
            ScorePolicy::Random(3),
            &params(),
            DEFAULT_BUCKET_CUTS,
        )
        .unwrap();
        assert!(r.rows.iter().all(|r| r.recall == 0.5));
        assert!(nms_upper_bound(
            &scenes,
            &[1.0],
            ScorePolicy::Uniform,
            &params(),
            DEFAULT_BUCKET_CUTS
        )
        .is_err());
    }

    #[test]
    fn csv_layouts() {
        let gts = vec![vec![pose(0.0, 0.0)]];
        let dets = vec![vec![det(&gts[0][0], 1.0)]];
        let r = summarize(&dets, &gts, &[0.0], &params(), DEFAULT_BUCKET_CUTS).unwrap();
        let csv = eval_csv(&r);
        assert!(csv.starts_with("metric,value\nmAP,1\nAP50,1\nAP75,1\nAP@0.50,1\n"));
        assert!(csv.contains("AP_medium,\n"));
        let t = NmsBoundTable {
            rows: vec![NmsBoundRow {
                nms_kind: NmsKind::Iou,
                threshold: 0.5,
                recall: 0.75,
                ap_hard: None,
            }],
        };
        assert_eq!(
            nms_bound_csv(&t),
            "nms_kind,threshold,recall,ap_hard\niou,0.5,0.75,\n"
        );
    }
}
