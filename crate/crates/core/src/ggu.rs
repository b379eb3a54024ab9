//! Graph group update: Gumbel-Softmax grouping of decoded objects, group
//! aggregation, context-conditioned message passing, output heads and the
//! inference pipeline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::cell_center;
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn;
use crate::numerics::{sigmoid, Tape, Tensor, Var};
use crate::params::{xavier, Bound, ParamStore};
use crate::scene::{BBox, SceneSample, TaskSpec};

/// How Gumbel noise is shared across objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelNoise {
    /// One draw per (object, group) pair.
    #[default]
    PerPair,
    /// One draw per group, shared by every object.
    PerGroup,
}

/// Noise source for grouping; evaluation uses none.
pub enum Grouping<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng, noise: GumbelNoise },
}

pub struct GroupAssignment {
    /// Pre-noise logits, `K_o × K_g`.
    pub logits: Var,
    pub soft: Var,
    pub hard: Vec<usize>,
    /// Exact one-hot rows; carries soft gradients when straight-through is on.
    pub routing: Var,
    pub straight_through: bool,
}

pub struct GroupedFeatures {
    pub theta: Var,
    pub phi: Var,
    pub sizes: Vec<usize>,
}

pub struct GraphUpdate {
    pub theta_r: Var,
    /// Row `i` holds the weights `w_ji` over senders `j`.
    pub weights: Var,
}

pub struct HeadOutputs {
    /// Relevance logits, `K_o × 1`.
    pub logits: Var,
    /// `(cx, cy, w, h)` in `[0, 1]`, `K_o × 4`.
    pub boxes: Var,
    /// Rank scores, `K_o × 1`; lower is better.
    pub scores: Var,
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Soft and hard group assignment of every decoded object.
pub fn gumbel_group(
    tape: &mut Tape,
    p: &Bound,
    o: Var,
    g: Var,
    tau: f64,
    mode: Grouping<'_>,
    straight_through: bool,
) -> Result<GroupAssignment, ModelError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ModelError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let ow = tape.matmul(o, p.var("ggu.wo")?)?;
    let gw = tape.matmul(g, p.var("ggu.wg")?)?;
    let logits = tape.matmul_t(ow, gw)?;
    let (k_o, k_g) = (tape.value(logits).rows(), tape.value(logits).cols());
    let noisy = match mode {
        Grouping::Eval => logits,
        Grouping::Train { rng, noise } => {
            let pi: Vec<f64> = match noise {
                GumbelNoise::PerPair => (0..k_o * k_g).map(|_| gumbel(rng)).collect(),
                GumbelNoise::PerGroup => {
                    let shared: Vec<f64> = (0..k_g).map(|_| gumbel(rng)).collect();
                    (0..k_o).flat_map(|_| shared.iter().copied()).collect()
                }
            };
            let pi = tape.constant(Tensor::new(vec![k_o, k_g], pi)?);
            tape.add(logits, pi)?
        }
    };
    let scaled = tape.scale(noisy, 1.0 / tau);
    let soft = tape.softmax(scaled, 1)?;
    let s = tape.value(soft);
    let hard: Vec<usize> = (0..k_o)
        .map(|i| {
            let row = s.row(i);
            (0..k_g).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let mut onehot = Tensor::zeros(&[k_o, k_g]);
    for (i, &j) in hard.iter().enumerate() {
        onehot.data_mut()[i * k_g + j] = 1.0;
    }
    let routing = if straight_through {
        tape.straight_through(onehot, soft)?
    } else {
        tape.constant(onehot)
    };
    Ok(GroupAssignment {
        logits,
        soft,
        hard,
        routing,
        straight_through,
    })
}

/// Group means `Φ` (zero for empty groups) and `Θ = Õ + routing·Φ`.
pub fn aggregate(tape: &mut Tape, o: Var, a: &GroupAssignment) -> Result<GroupedFeatures, ModelError> {
    let k_g = tape.value(a.routing).cols();
    let mut sizes = vec![0usize; k_g];
    for &j in &a.hard {
        sizes[j] += 1;
    }
    let mut inv = Tensor::zeros(&[k_g, k_g]);
    for (j, &n) in sizes.iter().enumerate() {
        if n > 0 {
            inv.data_mut()[j * k_g + j] = 1.0 / n as f64;
        }
    }
    let rt = tape.transpose(a.routing)?;
    let sums = tape.matmul(rt, o)?;
    let inv = tape.constant(inv);
    let phi = tape.matmul(inv, sums)?;
    let back = tape.matmul(a.routing, phi)?;
    let theta = tape.add(o, back)?;
    Ok(GroupedFeatures { theta, phi, sizes })
}

/// Fully connected message passing conditioned on the mean context token.
pub fn graph_update(tape: &mut Tape, p: &Bound, theta: Var, t_c: Var) -> Result<GraphUpdate, ModelError> {
    let k = tape.value(theta).rows();
    if tape.value(t_c).rows() == 0 {
        return Err(ModelError::InvalidArgument("empty context features".into()));
    }
    let tc = tape.mean_rows(t_c)?;
    let tc = tape.matmul(tc, p.var("ggu.w6")?)?;
    let ones = tape.constant(Tensor::full(&[k, 1], 1.0));
    let tc = tape.matmul(ones, tc)?;
    let sender = tape.matmul(theta, p.var("ggu.w5")?)?;
    let sender = tape.mul(sender, tc)?;
    let receiver = tape.matmul(theta, p.var("ggu.w7")?)?;
    let scores = tape.matmul_t(receiver, sender)?;
    let weights = tape.softmax(scores, 1)?;
    let msg = tape.matmul(theta, p.var("ggu.w8")?)?;
    let agg = tape.matmul(weights, msg)?;
    let upd = tape.matmul(agg, p.var("ggu.w9")?)?;
    let theta_r = tape.add(theta, upd)?;
    Ok(GraphUpdate { theta_r, weights })
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Relevance and box heads on `Õ`, rank head on `Θ^r`. Box centers are
/// offsets from the source cell center in logit space.
pub fn heads(
    tape: &mut Tape,
    p: &Bound,
    o: Var,
    theta_r: Var,
    sources: &[usize],
    grid: (usize, usize),
) -> Result<HeadOutputs, ModelError> {
    let logits = nn::linear(tape, p, "ggu.cls", o)?;
    let h = nn::linear(tape, p, "ggu.box.l1", o)?;
    let h = tape.relu(h);
    let h = nn::linear(tape, p, "ggu.box.l2", h)?;
    let h = tape.relu(h);
    let delta = nn::linear(tape, p, "ggu.box.l3", h)?;
    let mut reference = Tensor::zeros(&[sources.len(), 4]);
    for (r, &s) in sources.iter().enumerate() {
        let (x, y) = cell_center(s, grid.0, grid.1);
        reference.data_mut()[r * 4] = logit(x);
        reference.data_mut()[r * 4 + 1] = logit(y);
    }
    let reference = tape.constant(reference);
    let shifted = tape.add(delta, reference)?;
    let boxes = tape.sigmoid(shifted);
    let scores = nn::linear(tape, p, "ggu.rank", theta_r)?;
    Ok(HeadOutputs { logits, boxes, scores })
}

pub(crate) fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let d = cfg.d;
    store.insert("ggu.wo", xavier(rng, d, d));
    store.insert("ggu.wg", xavier(rng, d, d));
    for w in ["ggu.w5", "ggu.w6", "ggu.w7", "ggu.w8"] {
        store.insert(w, xavier(rng, d, d));
    }
    let mut w9 = xavier(rng, d, d);
    w9.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    store.insert("ggu.w9", w9);
    nn::register_linear(store, rng, "ggu.cls", d, 1, true);
    store.insert("ggu.cls.b", Tensor::vector(vec![-logit(1.0 - cfg.cls_prior)]));
    nn::register_linear(store, rng, "ggu.box.l1", d, d, true);
    nn::register_linear(store, rng, "ggu.box.l2", d, d, true);
    nn::register_linear(store, rng, "ggu.box.l3", d, 4, true);
    nn::register_linear(store, rng, "ggu.rank", d, 1, true);
}

/// One kept detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Query row the detection came from.
    pub query: usize,
    pub bbox: BBox,
    /// Relevance probability.
    pub prob: f64,
    /// Rank score; lower is better.
    pub score: f64,
    pub group: usize,
    /// 1-based rank of the detection's group.
    pub group_rank: usize,
    /// `score <= θ_rel`.
    pub relevant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    /// `(group, rank)` in rank order.
    pub group_order: Vec<(usize, usize)>,
}

/// Per-query outputs before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub boxes: Vec<BBox>,
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
    pub groups: Vec<usize>,
}

pub const NMS_IOU: f64 = 0.7;

/// Thresholding, non-maximum suppression and group ranking.
pub fn postprocess(raw: &RawPrediction, theta_rel: f64, det_thresh: f64, nms_iou: f64) -> Prediction {
    let mut order: Vec<usize> = (0..raw.probs.len()).filter(|&q| raw.probs[q] >= det_thresh).collect();
    order.sort_by(|&a, &b| raw.probs[b].total_cmp(&raw.probs[a]));
    let mut kept: Vec<usize> = Vec::new();
    for q in order {
        if kept.iter().all(|&k| raw.boxes[k].iou(raw.boxes[q]) <= nms_iou) {
            kept.push(q);
        }
    }

    let mut groups: Vec<(usize, f64, usize)> = Vec::new();
    for &q in &kept {
        match groups.iter_mut().find(|g| g.0 == raw.groups[q]) {
            Some(g) => {
                g.1 += raw.scores[q];
                g.2 += 1;
            }
            None => groups.push((raw.groups[q], raw.scores[q], 1)),
        }
    }
    let mut means: Vec<(usize, f64)> = groups.iter().map(|&(g, s, n)| (g, s / n as f64)).collect();
    means.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let group_order: Vec<(usize, usize)> = means.iter().enumerate().map(|(r, &(g, _))| (g, r + 1)).collect();
    let rank_of = |g: usize| group_order.iter().find(|x| x.0 == g).map_or(0, |x| x.1);

    let detections = kept
        .into_iter()
        .map(|q| Detection {
            query: q,
            bbox: raw.boxes[q],
            prob: raw.probs[q],
            score: raw.scores[q],
            group: raw.groups[q],
            group_rank: rank_of(raw.groups[q]),
            relevant: raw.scores[q] <= theta_rel,
        })
        .collect();
    Prediction { detections, group_order }
}

/// Evaluation-mode raw outputs for one (scene, task).
pub fn raw_predict(model: &Model, scene: &SceneSample, task: &TaskSpec) -> Result<RawPrediction, ModelError> {
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let out = model.forward(&mut tape, &p, scene, task, Grouping::Eval, model.cfg.tau)?;
    let boxes = tape.value(out.heads.boxes);
    Ok(RawPrediction {
        boxes: (0..boxes.rows())
            .map(|r| {
                let b = boxes.row(r);
                BBox::new(b[0], b[1], b[2], b[3])
            })
            .collect(),
        probs: tape.value(out.heads.logits).data().iter().map(|&x| sigmoid(x)).collect(),
        scores: tape.value(out.heads.scores).data().to_vec(),
        groups: out.assignment.hard,
    })
}

/// Full inference without Gumbel noise.
pub fn infer(model: &Model, scene: &SceneSample, task: &TaskSpec, theta_rel: f64, det_thresh: f64) -> Result<Prediction, ModelError> {
    Ok(postprocess(&raw_predict(model, scene, task)?, theta_rel, det_thresh, NMS_IOU))
}
