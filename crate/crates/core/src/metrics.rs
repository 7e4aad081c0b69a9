//! Center-distance matching, average precision, true-positive errors and
//! the composite detection score.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dethead::DetectionBox;

/// Center-distance thresholds (m) averaged into AP.
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches define the true-positive errors.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
const RECALL_SAMPLES: usize = 101;

/// Ground truth and predictions of one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub gts: Vec<DetectionBox>,
    pub preds: Vec<DetectionBox>,
}

/// One prediction after matching, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub scene: usize,
    pub pred: usize,
    pub score: f64,
    /// Matched ground truth, if any.
    pub gt: Option<usize>,
}

/// Greedy matching in one scene: predictions of `class` in descending score
/// order each take the nearest unmatched same-class ground truth within
/// `threshold`. Returns the matched ground truth per prediction, in the
/// input order of `preds`.
pub fn match_scene(preds: &[DetectionBox], gts: &[DetectionBox], class: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.class_id != class {
                continue;
            }
            let d = preds[i].planar_distance(gt);
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Matches of `class` across scenes, sorted by descending score.
pub fn accumulate(scenes: &[SceneDetections], class: usize, threshold: f64) -> (Vec<MatchRecord>, usize) {
    let mut records = Vec::new();
    let mut n_gt = 0;
    for (s, scene) in scenes.iter().enumerate() {
        n_gt += scene.gts.iter().filter(|g| g.class_id == class).count();
        let m = match_scene(&scene.preds, &scene.gts, class, threshold);
        for (i, p) in scene.preds.iter().enumerate() {
            if p.class_id == class {
                records.push(MatchRecord { scene: s, pred: i, score: p.score, gt: m[i] });
            }
        }
    }
    records.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.scene, a.pred).cmp(&(b.scene, b.pred))));
    (records, n_gt)
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`, with `xs`
/// non-decreasing; left of the data gives `ys[0]`, right gives `right`.
fn interp(x: f64, xs: &[f64], ys: &[f64], right: f64) -> f64 {
    let n = xs.len();
    if x < xs[0] {
        return ys[0];
    }
    let j = xs.partition_point(|&v| v <= x) - 1;
    if j == n - 1 {
        return if x == xs[n - 1] { ys[n - 1] } else { right };
    }
    let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + t * (ys[j + 1] - ys[j])
}

/// Area under the precision/recall curve sampled at 101 recall points, with
/// recall ≤ 0.1 dropped and precision shifted down by 0.1 and clipped.
/// `None` when there is no ground truth.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    if records.is_empty() {
        return Some(0.0);
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prec = Vec::with_capacity(records.len());
    let mut rec = Vec::with_capacity(records.len());
    for r in records {
        if r.gt.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / n_gt as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let kept: Vec<f64> = (first..RECALL_SAMPLES)
        .map(|i| {
            let x = i as f64 / (RECALL_SAMPLES - 1) as f64;
            (interp(x, &rec, &prec, 0.0) - MIN_PRECISION).max(0.0)
        })
        .collect();
    Some(kept.iter().sum::<f64>() / kept.len() as f64 / (1.0 - MIN_PRECISION))
}

/// Mean true-positive errors of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 1.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 − IoU` of two boxes after aligning centers and headings.
pub fn scale_error(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let inter: f64 = (0..3).map(|i| a.size[i].min(b.size[i])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute heading difference, in `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Error means over matched pairs; every error is 1 without a match.
pub fn tp_errors(pairs: &[(&DetectionBox, &DetectionBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&DetectionBox, &DetectionBox) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&|p, g| p.planar_distance(g)),
        ase: mean(&scale_error),
        aoe: mean(&|p, g| yaw_error(p.yaw, g.yaw)),
        ave: mean(&|p, g| (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1])),
        aae: mean(&|p, g| if p.is_moving() == g.is_moving() { 0.0 } else { 1.0 }),
    }
}

/// `(5·mAP + Σ max(1 − mTP, 0)) / 10`.
pub fn nds(map: f64, tp: &TpErrors) -> f64 {
    (5.0 * map + tp.as_array().iter().map(|e| (1.0 - e).max(0.0)).sum::<f64>()) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    /// AP at each of [`AP_THRESHOLDS`].
    pub ap_per_threshold: Vec<f64>,
    pub ap: f64,
    pub tp: TpErrors,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn mean_tp(&self) -> TpErrors {
        TpErrors { ate: self.mate, ase: self.mase, aoe: self.maoe, ave: self.mave, aae: self.maae }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "class", "gt", "AP", "ATE", "ASE", "AOE", "AVE", "AAE"
        );
        for c in &self.per_class {
            s += &format!(
                "{:<12} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}\n",
                c.name, c.n_gt, c.ap, c.tp.ate, c.tp.ase, c.tp.aoe, c.tp.ave, c.tp.aae
            );
        }
        s += &format!(
            "{:<12} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}\nNDS {:.4}\n",
            "mean", "", self.map, self.mate, self.mase, self.maoe, self.mave, self.maae, self.nds
        );
        s
    }
}

/// Full evaluation over scenes. Classes without ground truth are left out
/// of every mean; with no ground truth at all every score is 0 and every
/// error 1.
pub fn evaluate(scenes: &[SceneDetections], class_names: &[&str]) -> MetricsReport {
    let mut per_class = Vec::new();
    for (class, name) in class_names.iter().enumerate() {
        let mut aps = Vec::with_capacity(AP_THRESHOLDS.len());
        let mut n_gt = 0;
        for &t in &AP_THRESHOLDS {
            let (records, n) = accumulate(scenes, class, t);
            n_gt = n;
            aps.extend(average_precision(&records, n));
        }
        if n_gt == 0 {
            continue;
        }
        let (records, _) = accumulate(scenes, class, TP_THRESHOLD);
        let pairs: Vec<_> = records
            .iter()
            .filter_map(|r| r.gt.map(|g| (&scenes[r.scene].preds[r.pred], &scenes[r.scene].gts[g])))
            .collect();
        let ap = aps.iter().sum::<f64>() / aps.len() as f64;
        per_class.push(ClassMetrics {
            class_id: class,
            name: name.to_string(),
            n_gt,
            ap_per_threshold: aps,
            ap,
            tp: tp_errors(&pairs),
        });
    }
    let (map, tp) = if per_class.is_empty() {
        (0.0, TpErrors::WORST)
    } else {
        let n = per_class.len() as f64;
        let m = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
        (
            m(|c| c.ap),
            TpErrors { ate: m(|c| c.tp.ate), ase: m(|c| c.tp.ase), aoe: m(|c| c.tp.aoe), ave: m(|c| c.tp.ave), aae: m(|c| c.tp.aae) },
        )
    };
    MetricsReport {
        map,
        mate: tp.ate,
        mase: tp.ase,
        maoe: tp.aoe,
        mave: tp.ave,
        maae: tp.aae,
        nds: nds(map, &tp),
        per_class,
    }
}
