//! Ranking, grouping, detection and relevance metrics.
//!
//! Predictions are matched greedily to ground truth by descending relevance
//! at IoU 0.5. A matched detection flagged irrelevant takes the rank just
//! after the last predicted group.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ggu::{postprocess, Prediction, RawPrediction, NMS_IOU};
use crate::scene::{BBox, SceneSample, TaskAnnotation, MAX_LEVEL};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalMatch {
    /// `(detection, gt object)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl EvalMatch {
    pub fn detection_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Greedy one-to-one matching in descending relevance order.
pub fn eval_match(pred: &Prediction, gt: &[BBox], iou_thr: f64) -> EvalMatch {
    let dets = &pred.detections;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].prob.total_cmp(&dets[a].prob));
    let mut taken = vec![false; gt.len()];
    let mut m = EvalMatch::default();
    for d in order {
        let best = (0..gt.len())
            .filter(|&g| !taken[g])
            .map(|g| (g, dets[d].bbox.iou(gt[g])))
            .filter(|&(_, iou)| iou >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((g, _)) => {
                taken[g] = true;
                m.pairs.push((d, g));
            }
            None => m.unmatched_pred.push(d),
        }
    }
    m.unmatched_gt = (0..gt.len()).filter(|&g| !taken[g]).collect();
    m
}

/// Rank used for ordering metrics: the group rank, or one past the last
/// group for detections flagged irrelevant.
pub fn effective_rank(pred: &Prediction, det: usize) -> usize {
    let d = &pred.detections[det];
    if d.relevant {
        d.group_rank
    } else {
        pred.group_order.len() + 1
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    if x == y {
        return Some(1.0);
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// 1-based dense ranks (ties share a rank, no gaps).
pub fn dense_ranks(x: &[f64]) -> Vec<usize> {
    let mut levels: Vec<f64> = x.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    x.iter().map(|v| levels.iter().position(|l| l == v).expect("present") + 1).collect()
}

/// Spearman correlation of predicted and ground-truth ranks over matched
/// objects, mapped to `[0, 1]`.
pub fn ssor(pred_ranks: &[f64], gt_levels: &[f64]) -> Option<f64> {
    spearman(pred_ranks, gt_levels).map(|r| (r + 1.0) / 2.0)
}

/// Pearson correlation over ground-truth relevant objects between
/// salience-style values. `pred_ranks[i]` is `None` for a miss.
pub fn sa_sor(pred_ranks: &[Option<f64>], gt_levels: &[f64]) -> Option<f64> {
    if gt_levels.len() < 2 {
        return None;
    }
    let salience = |dense: &[usize]| {
        let m = dense.iter().copied().max().unwrap_or(0);
        dense.iter().map(|&r| (m + 1 - r) as f64).collect::<Vec<_>>()
    };
    let gt = salience(&dense_ranks(gt_levels));
    let hits: Vec<f64> = pred_ranks.iter().flatten().copied().collect();
    let hit_sal = salience(&dense_ranks(&hits));
    let mut it = hit_sal.into_iter();
    let pred: Vec<f64> = pred_ranks.iter().map(|p| if p.is_some() { it.next().expect("one per hit") } else { 0.0 }).collect();
    pearson(&pred, &gt)
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index; identical partitions give 1.
pub fn ari(a: &[usize], b: &[usize]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Some(if table.len() == ra.len() && table.len() == rb.len() { 1.0 } else { 0.0 });
    }
    if index == sa && index == sb {
        return Some(1.0);
    }
    Some((index - expected) / (max - expected))
}

/// 101-point interpolated average precision of `(score, true positive)`
/// detections against `n_gt` objects.
pub fn average_precision(dets: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut d = dets.to_vec();
    d.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(d.len());
    for (k, &(_, hit)) in d.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        sum += curve.iter().filter(|c| c.0 >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max);
    }
    sum / 101.0
}

/// Relevance accuracy over matched detections and recall over relevant
/// ground truth.
pub fn task_acc_recall(pred: &Prediction, m: &EvalMatch, relevant: &[bool]) -> (Option<f64>, Option<f64>) {
    let acc = if m.pairs.is_empty() {
        None
    } else {
        let ok = m.pairs.iter().filter(|&&(d, g)| pred.detections[d].relevant == relevant[g]).count();
        Some(ok as f64 / m.pairs.len() as f64)
    };
    let n_rel = relevant.iter().filter(|&&r| r).count();
    let recall = if n_rel == 0 {
        None
    } else {
        let hit = m.pairs.iter().filter(|&&(d, g)| relevant[g] && pred.detections[d].relevant).count();
        Some(hit as f64 / n_rel as f64)
    };
    (acc, recall)
}

/// Per-(scene, task) metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub scene_id: String,
    pub affordance: usize,
    pub context: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub n_matched: usize,
    pub ssor: Option<f64>,
    pub sa_sor: Option<f64>,
    pub ari: Option<f64>,
    pub task_acc: Option<f64>,
    pub task_recall: Option<f64>,
}

pub struct ImageEval {
    pub row: ImageMetrics,
    /// `(confidence, true positive)` for every detection.
    pub detections: Vec<(f64, bool)>,
}

pub fn evaluate_image(scene: &SceneSample, task: &TaskAnnotation, pred: &Prediction) -> ImageEval {
    let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let ann = &task.annotation;
    let m = eval_match(pred, &gt, IOU_THRESHOLD);

    let matched_pred: Vec<f64> = m.pairs.iter().map(|&(d, _)| effective_rank(pred, d) as f64).collect();
    let matched_gt: Vec<f64> = m.pairs.iter().map(|&(_, g)| f64::from(ann.ranks[g])).collect();
    let ssor_v = ssor(&matched_pred, &matched_gt);

    let rel: Vec<usize> = (0..gt.len()).filter(|&g| ann.ranks[g] <= MAX_LEVEL).collect();
    let sa = if rel.len() < 2 {
        None
    } else {
        let pr: Vec<Option<f64>> = rel
            .iter()
            .map(|&g| m.detection_for(g).filter(|&d| pred.detections[d].relevant).map(|d| effective_rank(pred, d) as f64))
            .collect();
        let gl: Vec<f64> = rel.iter().map(|&g| f64::from(ann.ranks[g])).collect();
        sa_sor(&pr, &gl)
    };

    let pg: Vec<usize> = m.pairs.iter().map(|&(d, _)| pred.detections[d].group).collect();
    let gg: Vec<usize> = m.pairs.iter().map(|&(_, g)| usize::from(ann.ranks[g])).collect();
    let ari_v = ari(&pg, &gg);
    let (acc, recall) = task_acc_recall(pred, &m, &ann.relevant);

    let mut detections: Vec<(f64, bool)> = pred.detections.iter().map(|d| (d.prob, false)).collect();
    for &(d, _) in &m.pairs {
        detections[d].1 = true;
    }
    ImageEval {
        row: ImageMetrics {
            scene_id: scene.scene_id.clone(),
            affordance: task.task.affordance_id,
            context: task.task.context_id,
            n_gt: gt.len(),
            n_pred: pred.detections.len(),
            n_matched: m.pairs.len(),
            ssor: ssor_v,
            sa_sor: sa,
            ari: ari_v,
            task_acc: acc,
            task_recall: recall,
        },
        detections,
    }
}

/// Mean over valid images with the number skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub valid: usize,
    pub skipped: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut a = Aggregate::default();
        let mut sum = 0.0;
        for v in values {
            match v {
                Some(x) => {
                    sum += x;
                    a.valid += 1;
                }
                None => a.skipped += 1,
            }
        }
        if a.valid > 0 {
            a.mean = Some(sum / a.valid as f64);
        }
        a
    }

    pub fn value(&self) -> f64 {
        self.mean.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub affordance: usize,
    pub context: usize,
    pub images: usize,
    pub ap50: f64,
    pub ssor: Aggregate,
    pub sa_sor: Aggregate,
    pub ari: Aggregate,
    pub task_acc: Aggregate,
    pub task_recall: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssor: Aggregate,
    pub sa_sor: Aggregate,
    pub ari: Aggregate,
    pub map50: f64,
    pub task_acc: Aggregate,
    pub task_recall: Aggregate,
    pub theta_rel: f64,
    pub per_task: Vec<TaskMetrics>,
    pub images: Vec<ImageMetrics>,
}

fn aggregates(rows: &[&ImageMetrics]) -> [Aggregate; 5] {
    [
        Aggregate::of(rows.iter().map(|r| r.ssor)),
        Aggregate::of(rows.iter().map(|r| r.sa_sor)),
        Aggregate::of(rows.iter().map(|r| r.ari)),
        Aggregate::of(rows.iter().map(|r| r.task_acc)),
        Aggregate::of(rows.iter().map(|r| r.task_recall)),
    ]
}

/// Full report over `(scene, task, prediction)` cases.
pub fn evaluate_cases<'a>(cases: impl IntoIterator<Item = (&'a SceneSample, &'a TaskAnnotation, Prediction)>, theta_rel: f64) -> MetricReport {
    let mut images = Vec::new();
    let mut per_task: BTreeMap<(usize, usize), (Vec<usize>, Vec<(f64, bool)>, usize)> = BTreeMap::new();
    for (scene, task, pred) in cases {
        let e = evaluate_image(scene, task, &pred);
        let entry = per_task.entry((task.task.affordance_id, task.task.context_id)).or_default();
        entry.0.push(images.len());
        entry.1.extend(e.detections);
        entry.2 += e.row.n_gt;
        images.push(e.row);
    }
    let mut tasks = Vec::new();
    for ((a, c), (idx, dets, n_gt)) in per_task {
        let rows: Vec<&ImageMetrics> = idx.iter().map(|&i| &images[i]).collect();
        let [ssor, sa_sor, ari, task_acc, task_recall] = aggregates(&rows);
        tasks.push(TaskMetrics {
            affordance: a,
            context: c,
            images: rows.len(),
            ap50: average_precision(&dets, n_gt),
            ssor,
            sa_sor,
            ari,
            task_acc,
            task_recall,
        });
    }
    let all: Vec<&ImageMetrics> = images.iter().collect();
    let [ssor, sa_sor, ari, task_acc, task_recall] = aggregates(&all);
    let map50 = if tasks.is_empty() { 0.0 } else { tasks.iter().map(|t| t.ap50).sum::<f64>() / tasks.len() as f64 };
    MetricReport {
        ssor,
        sa_sor,
        ari,
        map50,
        task_acc,
        task_recall,
        theta_rel,
        per_task: tasks,
        images,
    }
}

/// Ground truth expressed as a prediction: exact boxes, certain relevance,
/// rank score equal to the level and one group per level. Pair with
/// [`REPLAY_THETA_REL`].
pub fn replay_ground_truth(scene: &SceneSample, task: &TaskAnnotation) -> Prediction {
    let levels: Vec<f64> = task.annotation.ranks.iter().map(|&r| f64::from(r)).collect();
    let raw = RawPrediction {
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        probs: vec![1.0; levels.len()],
        scores: levels.clone(),
        groups: dense_ranks(&levels).into_iter().map(|r| r - 1).collect(),
    };
    postprocess(&raw, REPLAY_THETA_REL, 0.5, NMS_IOU)
}

pub const REPLAY_THETA_REL: f64 = MAX_LEVEL as f64 + 0.5;

impl MetricReport {
    /// `(name, value)` for the headline metrics.
    pub fn headline(&self) -> [(&'static str, f64); 6] {
        [
            ("ssor", self.ssor.value()),
            ("sa_sor", self.sa_sor.value()),
            ("ari", self.ari.value()),
            ("map50", self.map50),
            ("task_acc", self.task_acc.value()),
            ("task_recall", self.task_recall.value()),
        ]
    }

    pub fn write_json(&self, w: impl Write) -> std::io::Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(std::io::Error::other)
    }

    /// One row per (scene, task); missing values are empty cells.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "scene_id,affordance,context,n_gt,n_pred,n_matched,ssor,sa_sor,ari,task_acc,task_recall")?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.images {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.scene_id,
                r.affordance,
                r.context,
                r.n_gt,
                r.n_pred,
                r.n_matched,
                f(r.ssor),
                f(r.sa_sor),
                f(r.ari),
                f(r.task_acc),
                f(r.task_recall)
            )?;
        }
        Ok(())
    }
}
