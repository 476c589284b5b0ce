//! Detection and evolving-world scores.
//!
//! Boxes are `[x, y, w, h]`. Predictions are ranked by descending score with
//! ties broken on image, domain, class and box, so every result is
//! independent of input order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::protocol::{cumulative_eval_set, ClassId, DetectionRecord, TaskSchedule};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union. Zero-area boxes score 0.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| r[2] * r[3];
    let (aa, ab) = (area(a), area(b));
    if !(aa > 0.0) || !(ab > 0.0) {
        log::warn!("zero-area box in IoU: {a:?} vs {b:?}");
        return 0.0;
    }
    let iw = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let ih = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

type ImageKey<'a> = (u64, &'a str);

fn key(r: &DetectionRecord) -> ImageKey<'_> {
    (r.image_id, r.domain.as_str())
}

fn rank_order(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    let sa = a.score.unwrap_or(0.0);
    let sb = b.score.unwrap_or(0.0);
    sb.total_cmp(&sa)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.domain.cmp(&b.domain))
        .then(a.category_id.cmp(&b.category_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn ranked<'a>(preds: impl Iterator<Item = &'a DetectionRecord>) -> Vec<&'a DetectionRecord> {
    let mut v: Vec<_> = preds.collect();
    v.sort_by(|a, b| rank_order(a, b));
    v
}

fn group_gts<'a>(gts: impl Iterator<Item = &'a DetectionRecord>) -> BTreeMap<ImageKey<'a>, Vec<&'a DetectionRecord>> {
    let mut by_image: BTreeMap<ImageKey<'a>, Vec<&'a DetectionRecord>> = BTreeMap::new();
    for g in gts {
        by_image.entry(key(g)).or_default().push(g);
    }
    by_image
}

/// VOC-style greedy matching: each prediction, in rank order, takes the gt of
/// its image with the highest IoU; it is a hit if that IoU clears the
/// threshold and the gt is still free. Returns the hit flags in rank order.
fn greedy_hits(ranked: &[&DetectionRecord], gts: &BTreeMap<ImageKey<'_>, Vec<&DetectionRecord>>, iou_thr: f64) -> Vec<bool> {
    let mut taken: BTreeMap<ImageKey<'_>, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    ranked
        .iter()
        .map(|p| {
            let Some(cands) = gts.get(&key(p)) else { return false };
            let mut best = (usize::MAX, 0.0);
            for (j, g) in cands.iter().enumerate() {
                let o = iou(&p.bbox, &g.bbox);
                if o > best.1 {
                    best = (j, o);
                }
            }
            if best.0 == usize::MAX || best.1 < iou_thr {
                return false;
            }
            let flags = taken.get_mut(&key(p)).expect("same keys as gts");
            if flags[best.0] {
                false
            } else {
                flags[best.0] = true;
                true
            }
        })
        .collect()
}

/// All-point interpolated area under the precision/recall curve.
fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Average precision of one class in percent, or `None` without gt.
pub fn average_precision(preds: &[DetectionRecord], gts: &[DetectionRecord], class: ClassId, iou_thr: f64) -> Option<f64> {
    let gt_map = group_gts(gts.iter().filter(|g| g.category_id == class));
    let n_gt: usize = gt_map.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let order = ranked(preds.iter().filter(|p| p.category_id == class));
    let hits = greedy_hits(&order, &gt_map, iou_thr);
    Some(100.0 * ap_from_hits(&hits, n_gt))
}

/// Percent of unknown gt boxes recovered by unknown-labelled predictions.
pub fn u_recall(preds: &[DetectionRecord], gts: &[DetectionRecord], unknown: ClassId, iou_thr: f64) -> Option<f64> {
    let gt_map = group_gts(gts.iter().filter(|g| g.category_id == unknown));
    let n_gt: usize = gt_map.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let order = ranked(preds.iter().filter(|p| p.category_id == unknown));
    let found = greedy_hits(&order, &gt_map, iou_thr).into_iter().filter(|&h| h).count();
    Some(100.0 * found as f64 / n_gt as f64)
}

/// Wilderness impact and whether the requested known recall was reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WildernessImpact {
    pub wi: f64,
    pub recall_reached: bool,
}

/// `P_closed / P_open − 1` over the known-class detections kept at the
/// score cut that first reaches `recall_level` known recall. Detections
/// whose best-overlap gt is unknown count as errors only in `P_open`.
pub fn wilderness_impact(
    preds: &[DetectionRecord],
    gts: &[DetectionRecord],
    unknown: ClassId,
    recall_level: f64,
    iou_thr: f64,
) -> WildernessImpact {
    let known_preds = ranked(preds.iter().filter(|p| p.category_id != unknown));
    let n_known_gt = gts.iter().filter(|g| g.category_id != unknown).count();
    let all_gts = group_gts(gts.iter());

    // Per-class greedy hits, mapped back to the global rank order.
    let mut hit = vec![false; known_preds.len()];
    let mut classes: Vec<ClassId> = known_preds.iter().map(|p| p.category_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let idx: Vec<usize> = (0..known_preds.len()).filter(|&i| known_preds[i].category_id == c).collect();
        let subset: Vec<&DetectionRecord> = idx.iter().map(|&i| known_preds[i]).collect();
        let gt_map = group_gts(gts.iter().filter(|g| g.category_id == c));
        for (k, h) in greedy_hits(&subset, &gt_map, iou_thr).into_iter().enumerate() {
            hit[idx[k]] = h;
        }
    }
    let on_unknown: Vec<bool> = known_preds
        .iter()
        .zip(&hit)
        .map(|(p, &h)| !h && best_gt_class(p, &all_gts, iou_thr) == Some(unknown))
        .collect();

    let mut cut = known_preds.len();
    let mut reached = false;
    if n_known_gt > 0 {
        let mut tp = 0usize;
        for (i, &h) in hit.iter().enumerate() {
            tp += usize::from(h);
            if tp as f64 >= recall_level * n_known_gt as f64 {
                let s = known_preds[i].score.unwrap_or(0.0);
                cut = i + 1;
                while cut < known_preds.len() && known_preds[cut].score.unwrap_or(0.0) >= s {
                    cut += 1;
                }
                reached = true;
                break;
            }
        }
    }
    let ou = on_unknown[..cut].iter().filter(|&&x| x).count();
    let closed = cut - ou;
    let wi = if ou == 0 { 0.0 } else { ou as f64 / closed.max(1) as f64 };
    WildernessImpact {
        wi,
        recall_reached: reached,
    }
}

fn best_gt_class(p: &DetectionRecord, gts: &BTreeMap<ImageKey<'_>, Vec<&DetectionRecord>>, iou_thr: f64) -> Option<ClassId> {
    let cands = gts.get(&key(p))?;
    let mut best: Option<(&DetectionRecord, f64)> = None;
    for g in cands {
        let o = iou(&p.bbox, &g.bbox);
        if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    best.map(|(g, _)| g.category_id)
}

/// Known-labelled detections above `score_thr` whose best-overlap gt is
/// unknown.
pub fn a_ose(preds: &[DetectionRecord], gts: &[DetectionRecord], unknown: ClassId, score_thr: f64, iou_thr: f64) -> u64 {
    let all_gts = group_gts(gts.iter());
    preds
        .iter()
        .filter(|p| p.category_id != unknown && p.score.unwrap_or(0.0) > score_thr)
        .filter(|p| best_gt_class(p, &all_gts, iou_thr) == Some(unknown))
        .count() as u64
}

/// Thresholds used when scoring a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub wi_recall_level: f64,
    pub a_ose_score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: IOU_THRESHOLD,
            wi_recall_level: 0.8,
            a_ose_score_threshold: 0.5,
        }
    }
}

/// Scores measured after training task `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvalResult {
    pub task: u32,
    /// Percent AP per known class with at least one gt box.
    pub per_class_ap: BTreeMap<ClassId, f64>,
    /// Classes introduced before this task.
    pub map_prev: Option<f64>,
    /// Classes introduced by this task.
    pub map_curr: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub wi: f64,
    pub a_ose: u64,
    pub gt_unknown_count: u64,
    pub known_detections: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl TaskEvalResult {
    /// A result carrying only headline mAPs, for recomputing aggregates
    /// from reported figures.
    pub fn from_maps(task: u32, map_prev: Option<f64>, map_curr: Option<f64>) -> Self {
        Self {
            task,
            per_class_ap: BTreeMap::new(),
            map_prev,
            map_curr,
            map_both: None,
            u_recall: None,
            wi: 0.0,
            a_ose: 0,
            gt_unknown_count: 0,
            known_detections: 0,
            flags: Vec::new(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores predictions made after task `t` against raw gt records.
pub fn evaluate_task(
    schedule: &TaskSchedule,
    t: usize,
    gt: &[DetectionRecord],
    preds: &[DetectionRecord],
    config: &EvalConfig,
) -> Result<TaskEvalResult> {
    let eval = cumulative_eval_set(schedule, t)?;
    let gts = eval.transform_gt(gt);
    let mut flags = Vec::new();
    let labels = eval.classes();
    let kept: Vec<DetectionRecord> = preds
        .iter()
        .filter(|p| eval.domains.contains(&p.domain) && labels.contains(&p.category_id))
        .cloned()
        .collect();
    if kept.len() < preds.len() {
        flags.push(format!(
            "ignored {} predictions outside the task-{t} label space or domains",
            preds.len() - kept.len()
        ));
    }
    if kept.is_empty() {
        flags.push("no predictions".into());
    }

    let thr = config.iou_threshold;
    let mut per_class_ap = BTreeMap::new();
    for &c in &eval.known {
        if let Some(ap) = average_precision(&kept, &gts, c, thr) {
            per_class_ap.insert(c, ap);
        }
    }
    let current = &schedule.task(t)?.classes;
    let map_over = |want: &dyn Fn(ClassId) -> bool| mean(per_class_ap.iter().filter(|(c, _)| want(**c)).map(|(_, v)| *v));
    let map_curr = map_over(&|c| current.contains(&c));
    let map_prev = if t > 1 { map_over(&|c| !current.contains(&c)) } else { None };
    let map_both = map_over(&|_| true);

    let unknown = eval.unknown_id;
    let gt_unknown_count = gts.iter().filter(|g| g.category_id == unknown).count() as u64;
    let u = u_recall(&kept, &gts, unknown, thr);
    if u.is_none() {
        flags.push("no unknown ground truth".into());
    }
    let wi = wilderness_impact(&kept, &gts, unknown, config.wi_recall_level, thr);
    if !wi.recall_reached {
        flags.push(format!(
            "known recall {} not reached; WI uses all detections",
            config.wi_recall_level
        ));
    }
    Ok(TaskEvalResult {
        task: t as u32,
        per_class_ap,
        map_prev,
        map_curr,
        map_both,
        u_recall: u,
        wi: wi.wi,
        a_ose: a_ose(&kept, &gts, unknown, config.a_ose_score_threshold, thr),
        gt_unknown_count,
        known_detections: kept.iter().filter(|p| p.category_id != unknown).count() as u64,
        flags,
    })
}

/// An aggregate score and the caveats met while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub value: f64,
    pub flags: Vec<String>,
}

fn need_two(per_task: &[TaskEvalResult], what: &str) -> Result<()> {
    if per_task.len() < 2 {
        return Err(Error::Domain(format!("{what} needs at least two tasks, got {}", per_task.len())));
    }
    Ok(())
}

/// Forgetting score: mean over `t ≥ 2` of previous-class mAP at `t` relative
/// to the mean mAP those classes had when introduced, in `[0, 100]`.
pub fn fss(per_task: &[TaskEvalResult]) -> Result<Score> {
    need_two(per_task, "FSS")?;
    let mut flags = Vec::new();
    let mut terms = Vec::new();
    for t in 1..per_task.len() {
        let task = per_task[t].task;
        let Some(prev) = per_task[t].map_prev else {
            flags.push(format!("task {task}: no previous-class mAP, FSS term skipped"));
            continue;
        };
        let Some(intro) = mean(per_task[..t].iter().filter_map(|r| r.map_curr)) else {
            flags.push(format!("task {task}: no introduction mAP, FSS term skipped"));
            continue;
        };
        if intro == 0.0 {
            flags.push(format!("task {task}: zero introduction mAP, FSS term skipped"));
            continue;
        }
        terms.push((100.0 * prev / intro).clamp(0.0, 100.0));
    }
    let value = mean(terms.into_iter()).unwrap_or_else(|| {
        flags.push("no FSS terms".into());
        0.0
    });
    Ok(Score { value, flags })
}

/// Openness score over all tasks.
pub fn oss(per_task: &[TaskEvalResult]) -> Result<Score> {
    if per_task.is_empty() {
        return Err(Error::Domain("OSS needs at least one task".into()));
    }
    let mut flags = Vec::new();
    let mut total = 0.0;
    for r in per_task {
        let recall = match r.u_recall {
            Some(u) => u / 100.0,
            None => {
                flags.push(format!("task {}: no unknown gt, U-Recall term set to 1", r.task));
                1.0
            }
        };
        let open = (1.0 - r.wi).max(0.0);
        let ose = if r.gt_unknown_count == 0 {
            if r.u_recall.is_some() {
                flags.push(format!("task {}: GT_unk is 0, A-OSE term set to 1", r.task));
            }
            1.0
        } else {
            1.0 / (1.0 + r.a_ose as f64 / r.gt_unknown_count as f64)
        };
        total += (recall + open + ose) / 3.0;
    }
    Ok(Score {
        value: 100.0 * total / per_task.len() as f64,
        flags,
    })
}

/// Generalisation score: mean current-task mAP over `t ≥ 2`.
pub fn gss(per_task: &[TaskEvalResult]) -> Result<Score> {
    need_two(per_task, "GSS")?;
    let mut flags = Vec::new();
    let terms: Vec<f64> = per_task[1..]
        .iter()
        .filter_map(|r| {
            if r.map_curr.is_none() {
                flags.push(format!("task {}: no current-class mAP, GSS term skipped", r.task));
            }
            r.map_curr
        })
        .collect();
    let value = mean(terms.into_iter()).unwrap_or(0.0);
    Ok(Score { value, flags })
}

pub fn fogs(fss: f64, oss: f64, gss: f64) -> f64 {
    (fss + oss + gss) / 3.0
}

/// Traceability block embedded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(config: &impl Serialize) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&value)?,
            config: value,
        })
    }
}

/// Hex SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogsReport {
    pub fss: Option<f64>,
    pub oss: f64,
    pub gss: Option<f64>,
    pub fogs: Option<f64>,
    pub per_task: Vec<TaskEvalResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl FogsReport {
    /// Aggregates per-task results; single-task runs have no FSS, GSS or FOGS.
    pub fn from_tasks(per_task: Vec<TaskEvalResult>) -> Result<Self> {
        let o = oss(&per_task)?;
        let mut flags = o.flags;
        let (f, g) = if per_task.len() >= 2 {
            let f = fss(&per_task)?;
            let g = gss(&per_task)?;
            flags.extend(f.flags);
            flags.extend(g.flags);
            (Some(f.value), Some(g.value))
        } else {
            flags.push("single task: FSS, GSS and FOGS undefined".into());
            (None, None)
        };
        Ok(Self {
            fss: f,
            oss: o.value,
            gss: g,
            fogs: f.zip(g).map(|(f, g)| fogs(f, o.value, g)),
            per_task,
            flags,
            provenance: None,
        })
    }

    pub fn summary_line(&self) -> String {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        format!(
            "FSS/OSS/GSS/FOGS = {}/{:.2}/{}/{}",
            show(self.fss),
            self.oss,
            show(self.gss),
            show(self.fogs)
        )
    }
}
