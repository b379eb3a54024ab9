use crate::ggu::{infer, postprocess, raw_predict, NMS_IOU};
use crate::metrics::{eval_match, evaluate_cases, replay_ground_truth, MetricReport, IOU_THRESHOLD, REPLAY_THETA_REL};
use crate::model::Model;
use crate::scene::{BBox, SceneSample};

use super::HarnessError;

/// Scenes used for threshold calibration at most.
const CALIBRATION_SCENES: usize = 200;

/// Threshold on rank scores that best separates relevant from irrelevant
/// objects among matched detections of the first scenes of `scenes`.
/// Accuracy ties go to the larger threshold.
pub fn calibrate_theta_rel(model: &Model, scenes: &[SceneSample], det_thresh: f64) -> Result<f64, HarnessError> {
    let mut samples: Vec<(f64, bool)> = Vec::new();
    for scene in scenes.iter().take(CALIBRATION_SCENES) {
        let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
        for task in &scene.tasks {
            let raw = raw_predict(model, scene, &task.task)?;
            let pred = postprocess(&raw, f64::INFINITY, det_thresh, NMS_IOU);
            let m = eval_match(&pred, &gt, IOU_THRESHOLD);
            samples.extend(m.pairs.iter().map(|&(d, g)| (pred.detections[d].score, task.annotation.relevant[g])));
        }
    }
    Ok(best_threshold(&mut samples))
}

/// Maximizes correct `score <= θ ⇔ relevant` decisions over midpoints
/// between consecutive distinct scores.
fn best_threshold(samples: &mut [(f64, bool)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_irrelevant = samples.iter().filter(|s| !s.1).count();
    // Threshold below everything: every irrelevant object is right.
    let mut correct = n_irrelevant;
    let mut best = (correct, samples[0].0 - 1.0);
    for i in 0..samples.len() {
        correct = if samples[i].1 { correct + 1 } else { correct - 1 };
        let last_of_run = i + 1 == samples.len() || samples[i + 1].0 > samples[i].0;
        if !last_of_run {
            continue;
        }
        let theta = match samples.get(i + 1) {
            Some(next) => 0.5 * (samples[i].0 + next.0),
            None => samples[i].0 + 1.0,
        };
        if correct >= best.0 {
            best = (correct, theta);
        }
    }
    best.1
}

/// Runs inference on every (scene, task) and scores the result.
pub fn evaluate(model: &Model, scenes: &[SceneSample], theta_rel: f64, det_thresh: f64) -> Result<MetricReport, HarnessError> {
    if scenes.is_empty() {
        return Err(HarnessError::Invalid("cannot evaluate an empty dataset".into()));
    }
    let mut cases = Vec::new();
    for scene in scenes {
        for task in &scene.tasks {
            cases.push((scene, task, infer(model, scene, &task.task, theta_rel, det_thresh)?));
        }
    }
    Ok(evaluate_cases(cases, theta_rel))
}

/// Scores the ground truth fed back as predictions.
pub fn evaluate_ground_truth(scenes: &[SceneSample]) -> Result<MetricReport, HarnessError> {
    if scenes.is_empty() {
        return Err(HarnessError::Invalid("cannot evaluate an empty dataset".into()));
    }
    let cases = scenes.iter().flat_map(|s| s.tasks.iter().map(move |t| (s, t, replay_ground_truth(s, t))));
    Ok(evaluate_cases(cases, REPLAY_THETA_REL))
}
