//! Chamfer-threshold average precision and cross-layer query stability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::PredInstance;
use crate::error::{Error, Result};
use crate::mapcore::{chamfer_distance, Extent, MapClass, MapScene, Point};

pub const THRESHOLDS_1: [f64; 3] = [0.2, 0.5, 1.0];
pub const THRESHOLDS_2: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub class_id: MapClass,
    pub score: f64,
    pub points: Vec<Point>,
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub preds: Vec<ScoredInstance>,
    pub gt: MapScene,
}

impl EvalFrame {
    /// One prediction per query, labelled with its most likely
    /// non-background class and scored by that class probability.
    pub fn from_predictions(preds: &[PredInstance], gt: MapScene) -> Self {
        let preds = preds
            .iter()
            .map(|p| {
                let (class_id, score) = p.best_class();
                ScoredInstance { class_id, score, points: p.points.clone() }
            })
            .collect();
        EvalFrame { preds, gt }
    }

    pub fn points_outside(&self, extent: &Extent) -> usize {
        self.preds.iter().map(|p| extent.count_outside(&p.points)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Mean over thresholds.
    pub ap: f64,
    pub per_threshold: Vec<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Set when the class has no ground truth; `ap` is then 0.
    pub no_ground_truth: bool,
}

/// Ranked predictions of one class: `(frame, index)` in descending score,
/// ties broken by position.
fn ranked(frames: &[EvalFrame], class: MapClass) -> Vec<(usize, usize)> {
    let mut r: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.preds.iter().enumerate().filter(|(_, p)| p.class_id == class).map(move |(i, _)| (f, i)))
        .collect();
    r.sort_by(|a, b| frames[b.0].preds[b.1].score.total_cmp(&frames[a.0].preds[a.1].score).then(a.cmp(b)));
    r
}

/// Greedy matching in rank order: TP flags for each ranked prediction.
fn greedy_tp(frames: &[EvalFrame], class: MapClass, order: &[(usize, usize)], threshold: f64) -> Result<Vec<bool>> {
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.instances.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for &(f, i) in order {
        let pred = &frames[f].preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, inst) in frames[f].gt.instances.iter().enumerate() {
            if inst.class_id != class || taken[f][g] {
                continue;
            }
            let d = chamfer_distance(&pred.points, &inst.points)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        match best {
            Some((g, d)) if d < threshold => {
                taken[f][g] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    Ok(tp)
}

/// Area under the precision envelope, summed over recall steps.
fn all_points_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_r {
            ap += (r - last_r) * p;
            last_r = *r;
        }
    }
    ap
}

pub fn compute_class_ap(frames: &[EvalFrame], class: MapClass, thresholds: &[f64]) -> Result<ApResult> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds[0] <= 0.0 {
        return Err(Error::invalid(format!("thresholds must be positive and ascending: {thresholds:?}")));
    }
    let num_gt: usize = frames.iter().map(|f| f.gt.instances_of(class).count()).sum();
    let order = ranked(frames, class);
    if num_gt == 0 {
        return Ok(ApResult {
            ap: 0.0,
            per_threshold: vec![0.0; thresholds.len()],
            num_gt,
            num_pred: order.len(),
            no_ground_truth: true,
        });
    }
    let per_threshold: Vec<f64> =
        thresholds.iter().map(|&t| Ok(all_points_ap(&greedy_tp(frames, class, &order, t)?, num_gt))).collect::<Result<_>>()?;
    let ap = per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(ApResult { ap, per_threshold, num_gt, num_pred: order.len(), no_ground_truth: false })
}

/// Unweighted mean of the per-class APs.
pub fn compute_map(class_aps: &[f64]) -> Result<f64> {
    if class_aps.len() != MapClass::COUNT {
        return Err(Error::invalid(format!("expected {} class APs, got {}", MapClass::COUNT, class_aps.len())));
    }
    Ok(class_aps.iter().sum::<f64>() / class_aps.len() as f64)
}

/// Mean absolute coordinate change between consecutive layers.
/// `layers[t][i]` holds the points of query `i` at layer `t`.
pub fn query_stability_mae(layers: &[Vec<Vec<Point>>]) -> Result<Vec<f64>> {
    if layers.len() < 2 {
        return Err(Error::invalid("stability needs at least two layers"));
    }
    let shape: Vec<usize> = layers[0].iter().map(|q| q.len()).collect();
    let count: usize = shape.iter().sum::<usize>() * 2;
    if count == 0 {
        return Err(Error::invalid("no points to compare"));
    }
    for l in layers {
        let s: Vec<usize> = l.iter().map(|q| q.len()).collect();
        if s != shape {
            return Err(Error::shape("query_stability_mae", &shape, &s));
        }
    }
    Ok(layers
        .windows(2)
        .map(|w| {
            let sum: f64 = w[0]
                .iter()
                .flatten()
                .zip(w[1].iter().flatten())
                .map(|(a, b)| (b[0] - a[0]).abs() + (b[1] - a[1]).abs())
                .sum();
            sum / count as f64
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSummary {
    pub queries: usize,
    pub scenes: usize,
    /// Fraction of queries whose global-loss gradient norm exceeds 1e-12.
    pub fraction_nonzero_global: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub num_scenes: usize,
    /// Class name to AP over the first threshold set.
    pub ap1: BTreeMap<String, f64>,
    pub ap2: BTreeMap<String, f64>,
    pub ap1_per_threshold: BTreeMap<String, Vec<f64>>,
    pub ap2_per_threshold: BTreeMap<String, Vec<f64>>,
    pub map1: f64,
    pub map2: f64,
    pub thresholds1: Vec<f64>,
    pub thresholds2: Vec<f64>,
    /// Mean over scenes of the per-transition stability MAE.
    pub stability_mae: Vec<f64>,
    pub gradient_audit: Option<AuditSummary>,
    pub out_of_extent_points: usize,
    pub flags: Vec<String>,
    pub failed: Option<String>,
}

impl EvalReport {
    /// AP tables and flags for a set of frames; stability and audit fields
    /// are left for the caller.
    pub fn from_frames(variant: &str, seed: u64, frames: &[EvalFrame]) -> Result<Self> {
        let mut r = EvalReport {
            variant: variant.to_string(),
            seed,
            num_scenes: frames.len(),
            thresholds1: THRESHOLDS_1.to_vec(),
            thresholds2: THRESHOLDS_2.to_vec(),
            ..Default::default()
        };
        let mut aps1 = Vec::new();
        let mut aps2 = Vec::new();
        for class in MapClass::ALL {
            let a1 = compute_class_ap(frames, class, &THRESHOLDS_1)?;
            let a2 = compute_class_ap(frames, class, &THRESHOLDS_2)?;
            if a1.no_ground_truth {
                r.flags.push(format!("no_ground_truth:{}", class.name()));
            }
            r.ap1.insert(class.name().into(), a1.ap);
            r.ap2.insert(class.name().into(), a2.ap);
            r.ap1_per_threshold.insert(class.name().into(), a1.per_threshold);
            r.ap2_per_threshold.insert(class.name().into(), a2.per_threshold);
            aps1.push(a1.ap);
            aps2.push(a2.ap);
        }
        r.map1 = compute_map(&aps1)?;
        r.map2 = compute_map(&aps2)?;
        r.out_of_extent_points = frames.iter().map(|f| f.points_outside(&f.gt.extent)).sum();
        if r.out_of_extent_points > 0 {
            r.flags.push("predicted_points_outside_extent".into());
        }
        Ok(r)
    }

    pub fn failed(variant: &str, seed: u64, reason: String) -> Self {
        EvalReport {
            variant: variant.into(),
            seed,
            thresholds1: THRESHOLDS_1.to_vec(),
            thresholds2: THRESHOLDS_2.to_vec(),
            failed: Some(reason),
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `class,threshold_set,AP,mAP`, APs scaled by 100.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,threshold_set,AP,mAP\n");
        for (set, aps, map) in [("AP1", &self.ap1, self.map1), ("AP2", &self.ap2, self.map2)] {
            for class in MapClass::ALL {
                let ap = aps.get(class.name()).copied().unwrap_or(0.0);
                out.push_str(&format!("{},{set},{:.4},{:.4}\n", class.name(), ap * 100.0, map * 100.0));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mapcore::MapInstance;

    fn seg(x: f64) -> Vec<Point> {
        vec![[x, 0.0], [x, 1.0]]
    }

    fn frame(gts: &[f64], preds: &[(f64, f64)]) -> EvalFrame {
        EvalFrame {
            gt: MapScene::new(
                Extent { x_min: -100.0, x_max: 100.0, y_min: -100.0, y_max: 100.0 },
                gts.iter().map(|x| MapInstance::new(MapClass::Divider, seg(*x))).collect(),
            ),
            preds: preds.iter().map(|(x, s)| ScoredInstance { class_id: MapClass::Divider, score: *s, points: seg(*x) }).collect(),
        }
    }

    /// Explicit PR curve over every score cutoff, recomputing the matching
    /// of each prefix from scratch.
    fn oracle_ap(frames: &[EvalFrame], t: f64) -> f64 {
        let order = ranked(frames, MapClass::Divider);
        let g: usize = frames.iter().map(|f| f.gt.instances.len()).sum();
        if g == 0 {
            return 0.0;
        }
        let mut pr = Vec::new();
        for k in 1..=order.len() {
            let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.instances.len()]).collect();
            let mut tp = 0;
            for &(f, i) in &order[..k] {
                let mut cands: Vec<(f64, usize)> = frames[f]
                    .gt
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !taken[f][*j])
                    .map(|(j, inst)| (chamfer_distance(&frames[f].preds[i].points, &inst.points).unwrap(), j))
                    .collect();
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if let Some(&(d, j)) = cands.first() {
                    if d < t {
                        taken[f][j] = true;
                        tp += 1;
                    }
                }
            }
            pr.push((tp as f64 / k as f64, tp as f64 / g as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for k in 0..pr.len() {
            let r = pr[k].1;
            let best_p = pr[k..].iter().map(|x| x.0).fold(0.0, f64::max);
            ap += (r - prev_r) * best_p;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn hand_enumerated_example() {
        let f = frame(&[0.0], &[(0.3, 0.9), (0.05, 0.8)]);
        let r = compute_class_ap(&[f], MapClass::Divider, &[0.2]).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let f = frame(&[0.0, 10.0, 20.0], &[(20.0, 0.1), (0.0, 0.7), (10.0, 0.4)]);
        for t in [&THRESHOLDS_1[..], &THRESHOLDS_2[..]] {
            assert_eq!(compute_class_ap(std::slice::from_ref(&f), MapClass::Divider, t).unwrap().ap, 1.0);
        }
    }

    #[test]
    fn missing_ground_truth_is_flagged() {
        let f = frame(&[], &[(0.0, 0.5)]);
        let r = compute_class_ap(std::slice::from_ref(&f), MapClass::Divider, &THRESHOLDS_1).unwrap();
        assert!(r.no_ground_truth);
        assert_eq!(r.ap, 0.0);
        assert!(compute_class_ap(std::slice::from_ref(&f), MapClass::Divider, &[]).is_err());
        assert!(compute_class_ap(&[f], MapClass::Divider, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn matches_pr_oracle_exhaustively() {
        let offsets = [0.0, 0.05, 0.15, 0.3, 0.45, 0.7, 0.9, 1.2, 1.6, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cases = 0;
        for p in 0..=6 {
            for g in 0..=4 {
                for _ in 0..40 {
                    let frames: Vec<EvalFrame> = (0..2)
                        .map(|_| {
                            let gts: Vec<f64> = (0..g).map(|i| 10.0 * i as f64).collect();
                            let preds: Vec<(f64, f64)> = (0..p)
                                .map(|_| {
                                    let base = if g > 0 { 10.0 * rng.random_range(0..g) as f64 } else { 0.0 };
                                    let d = offsets[rng.random_range(0..offsets.len())];
                                    let score = [0.2, 0.5, 0.9, rng.random_range(0.0..1.0)][rng.random_range(0..4)];
                                    (base + d, score)
                                })
                                .collect();
                            frame(&gts, &preds)
                        })
                        .collect();
                    for ts in [THRESHOLDS_1, THRESHOLDS_2] {
                        let got = compute_class_ap(&frames, MapClass::Divider, &ts).unwrap();
                        for (k, t) in ts.iter().enumerate() {
                            let want = oracle_ap(&frames, *t);
                            assert!((got.per_threshold[k] - want).abs() <= 1e-12, "p={p} g={g} t={t}: {} vs {want}", got.per_threshold[k]);
                        }
                    }
                    cases += 1;
                }
            }
        }
        assert!(cases >= 1000);
    }

    #[test]
    fn ap_ignores_positive_score_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let preds: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(-0.5..20.5), rng.random_range(0.0..1.0))).collect();
            let f = frame(&[0.0, 10.0, 20.0], &preds);
            let scaled: Vec<(f64, f64)> = preds.iter().map(|(x, s)| (*x, s * 3.7)).collect();
            let g = frame(&[0.0, 10.0, 20.0], &scaled);
            let a = compute_class_ap(&[f], MapClass::Divider, &THRESHOLDS_2).unwrap().ap;
            let b = compute_class_ap(&[g], MapClass::Divider, &THRESHOLDS_2).unwrap().ap;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn map_examples() {
        assert!((compute_map(&[0.4, 0.5, 0.6]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(compute_map(&[0.0; 3]).unwrap(), 0.0);
        assert_eq!(compute_map(&[1.0; 3]).unwrap(), 1.0);
        assert_eq!(compute_map(&[0.6, 0.4, 0.5]).unwrap(), compute_map(&[0.4, 0.6, 0.5]).unwrap());
        assert!(compute_map(&[0.5]).is_err());
    }

    #[test]
    fn stability_examples() {
        let a = vec![vec![[0.0, 0.0], [1.0, 2.0]], vec![[5.0, 5.0], [6.0, 7.0]]];
        assert_eq!(query_stability_mae(&[a.clone(), a.clone(), a.clone()]).unwrap(), vec![0.0, 0.0]);
        let b: Vec<Vec<Point>> = a.iter().map(|q| q.iter().map(|p| [p[0] + 1.0, p[1]]).collect()).collect();
        assert_eq!(query_stability_mae(&[a.clone(), b]).unwrap(), vec![0.5]);
        assert!(query_stability_mae(std::slice::from_ref(&a)).is_err());
        assert!(query_stability_mae(&[a, vec![vec![[0.0, 0.0]]]]).is_err());
    }

    #[test]
    fn report_round_trips_and_flags() {
        let f = frame(&[0.0], &[(0.0, 0.9), (500.0, 0.1)]);
        let r = EvalReport::from_frames("baseline", 3, &[f]).unwrap();
        assert_eq!(r.map1, 1.0 / 3.0);
        assert!(r.flags.iter().any(|s| s == "no_ground_truth:ped_crossing"));
        assert!(r.flags.iter().any(|s| s == "predicted_points_outside_extent"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("divider,AP1,100.0000,33.3333"));
    }
}
