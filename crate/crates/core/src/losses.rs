//! Set-prediction objective: bipartite matching, focal classification,
//! L1 and generalized-IoU box terms, and the pairwise group ranking loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ggu::HeadOutputs;
use crate::model::ModelError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scene::BBox;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate box {0:?}: width and height must be positive")]
    DegenerateBox([f64; 4]),
    #[error("{queries} queries cannot cover {objects} objects")]
    TooFewQueries { queries: usize, objects: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Generalized IoU of two center-size boxes.
pub fn giou(a: BBox, b: BBox) -> Result<f64, LossError> {
    for x in [a, b] {
        if !(x.w > 0.0 && x.h > 0.0) {
            return Err(LossError::DegenerateBox(x.to_array()));
        }
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Row-wise GIoU between predicted boxes `N × 4` and fixed targets, `N × 1`.
pub fn giou_rows(tape: &mut Tape, pred: Var, target: &[BBox]) -> Result<Var, LossError> {
    let n = target.len();
    if tape.value(pred).shape() != [n, 4] {
        return Err(LossError::InvalidArgument(format!(
            "{:?} predicted boxes for {n} targets",
            tape.value(pred).shape()
        )));
    }
    let col = |tape: &mut Tape, f: &dyn Fn(&BBox) -> f64| tape.constant(Tensor::new(vec![n, 1], target.iter().map(f).collect()).expect("n rows"));
    let gx0 = col(tape, &|b| b.corners().0);
    let gy0 = col(tape, &|b| b.corners().1);
    let gx1 = col(tape, &|b| b.corners().2);
    let gy1 = col(tape, &|b| b.corners().3);
    let garea = col(tape, &|b| b.area());

    let cx = tape.slice_cols(pred, 0, 1)?;
    let cy = tape.slice_cols(pred, 1, 1)?;
    let w = tape.slice_cols(pred, 2, 1)?;
    let h = tape.slice_cols(pred, 3, 1)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px0 = tape.sub(cx, hw)?;
    let px1 = tape.add(cx, hw)?;
    let py0 = tape.sub(cy, hh)?;
    let py1 = tape.add(cy, hh)?;

    let span = |tape: &mut Tape, lo: (Var, Var), hi: (Var, Var), inner: bool| -> Result<Var, NumericsError> {
        let (a, b) = if inner {
            (tape.maximum(lo.0, lo.1)?, tape.minimum(hi.0, hi.1)?)
        } else {
            (tape.minimum(lo.0, lo.1)?, tape.maximum(hi.0, hi.1)?)
        };
        tape.sub(b, a)
    };
    let iw = span(tape, (px0, gx0), (px1, gx1), true)?;
    let iw = tape.relu(iw);
    let ih = span(tape, (py0, gy0), (py1, gy1), true)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(w, h)?;
    let union = tape.add(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let ew = span(tape, (px0, gx0), (px1, gx1), false)?;
    let eh = span(tape, (py0, gy0), (py1, gy1), false)?;
    let earea = tape.mul(ew, eh)?;
    let gap = tape.sub(earea, union)?;
    let gap = tape.div(gap, earea)?;
    Ok(tape.sub(iou, gap)?)
}

/// Mean focal loss over all queries; `targets[q]` marks matched queries.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[bool], alpha: f64, gamma: f64) -> Result<Var, LossError> {
    let n = targets.len();
    if tape.value(logits).len() != n {
        return Err(LossError::InvalidArgument(format!("{} logits for {n} targets", tape.value(logits).len())));
    }
    let shape = tape.value(logits).shape().to_vec();
    // z = -x for positives and x for negatives, so p_t = σ(-z) and
    // -log p_t = softplus(z).
    let sign = tape.constant(Tensor::new(shape.clone(), targets.iter().map(|&t| if t { -1.0 } else { 1.0 }).collect())?);
    let a_t = tape.constant(Tensor::new(shape, targets.iter().map(|&t| if t { alpha } else { 1.0 - alpha }).collect())?);
    let z = tape.mul(logits, sign)?;
    let ce = tape.softplus(z);
    let one_minus_pt = tape.sigmoid(z);
    let modulation = tape.powf(one_minus_pt, gamma);
    let term = tape.mul(modulation, ce)?;
    let term = tape.mul(term, a_t)?;
    Ok(tape.mean(term))
}

/// Focal loss on `affinity / √d` with the cells in `positives` as targets,
/// pulling query selection towards object centers.
pub fn selection_loss(tape: &mut Tape, affinity: Var, positives: &[usize], d: usize, alpha: f64, gamma: f64) -> Result<Var, LossError> {
    let n = tape.value(affinity).len();
    let mut targets = vec![false; n];
    for &c in positives {
        *targets.get_mut(c).ok_or_else(|| LossError::InvalidArgument(format!("cell {c} outside {n} cells")))? = true;
    }
    let logits = tape.scale(affinity, 1.0 / (d as f64).sqrt());
    focal_loss(tape, logits, &targets, alpha, gamma)
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column chosen for each row.
pub fn linear_sum_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>, LossError> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(LossError::InvalidArgument("ragged cost matrix".into()));
    }
    if n > m {
        return Err(LossError::TooFewQueries { queries: m, objects: n });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(LossError::InvalidArgument("non-finite matching cost".into()));
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // virtual column holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Sum of `cost[r][cols[r]]` in row order.
pub fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 2.0,
            giou: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, object)` pairs in object order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

fn l1(a: BBox, b: BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Optimal one-to-one matching of ground-truth objects to queries.
pub fn hungarian_match(boxes: &[BBox], probs: &[f64], gt: &[BBox], w: MatchWeights) -> Result<MatchResult, LossError> {
    if boxes.len() != probs.len() {
        return Err(LossError::InvalidArgument(format!("{} boxes for {} probabilities", boxes.len(), probs.len())));
    }
    if boxes.len() < gt.len() {
        return Err(LossError::TooFewQueries {
            queries: boxes.len(),
            objects: gt.len(),
        });
    }
    let mut cost = Vec::with_capacity(gt.len());
    for &g in gt {
        let mut row = Vec::with_capacity(boxes.len());
        for (&b, &p) in boxes.iter().zip(probs) {
            row.push(-w.cls * p + w.l1 * l1(b, g) + w.giou * (1.0 - giou(b, g)?));
        }
        cost.push(row);
    }
    let cols = linear_sum_assignment(&cost)?;
    let total = assignment_cost(&cost, &cols);
    let pairs: Vec<(usize, usize)> = cols.iter().enumerate().map(|(o, &q)| (q, o)).collect();
    let unmatched = (0..boxes.len()).filter(|q| !cols.contains(q)).collect();
    Ok(MatchResult {
        pairs,
        unmatched,
        cost: total,
    })
}

pub struct RankLoss {
    pub loss: Var,
    /// Fewer than two objects; the loss is a constant zero.
    pub degenerate: bool,
}

/// Pairwise ranking loss with the grouping penalty. Each pair is ordered so
/// that its first member has the larger (worse) ground-truth level.
pub fn group_ranking_loss(tape: &mut Tape, scores: Var, gt: &[u8], rho: f64) -> Result<RankLoss, LossError> {
    let n = gt.len();
    if tape.value(scores).len() != n {
        return Err(LossError::InvalidArgument(format!("{} scores for {n} ranks", tape.value(scores).len())));
    }
    if n < 2 {
        return Ok(RankLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            degenerate: true,
        });
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut gap = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (i, j) = if gt[a] >= gt[b] { (a, b) } else { (b, a) };
            first.push(i);
            second.push(j);
            gap.push(f64::from(gt[i]) - f64::from(gt[j]));
        }
    }
    let total_gap: f64 = gap.iter().sum();
    let p = gap.len();
    let sign: Vec<f64> = gap.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
    let beta: Vec<f64> = gap.iter().map(|&g| if g > 0.0 { g / total_gap } else { rho }).collect();

    let flat = tape.reshape(scores, &[n, 1])?;
    let ri = tape.gather_rows(flat, &first)?;
    let rj = tape.gather_rows(flat, &second)?;
    let dp = tape.sub(rj, ri)?;
    let s = tape.constant(Tensor::new(vec![p, 1], sign.clone())?);
    let not_s = tape.constant(Tensor::new(vec![p, 1], sign.iter().map(|v| 1.0 - v).collect())?);
    let signed = tape.mul(dp, s)?;
    let mag = tape.abs(dp);
    let mag = tape.mul(mag, not_s)?;
    let d = tape.add(signed, mag)?;
    let sp = tape.softplus(d);
    let b = tape.constant(Tensor::new(vec![p, 1], beta)?);
    let weighted = tape.mul(sp, b)?;
    Ok(RankLoss {
        loss: tape.sum(weighted),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// `(λ_ce, λ_l1, λ_giou, λ_rank)`.
    pub weights: [f64; 4],
    pub rho: f64,
    /// Weight of the auxiliary focal loss on query-selection affinities.
    pub selection_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub match_cls: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: [2.0, 2.0, 5.0, 4.0],
            rho: 0.5,
            selection_weight: 2.0,
            alpha: 0.25,
            gamma: 2.0,
            match_cls: 1.0,
        }
    }
}

impl LossConfig {
    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            cls: self.match_cls,
            l1: self.weights[1],
            giou: self.weights[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub rank: f64,
    pub selection: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("ce", self.ce),
            ("l1", self.l1),
            ("giou", self.giou),
            ("rank", self.rank),
            ("selection", self.selection),
            ("total", self.total),
        ]
    }
}

pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub rank_degenerate: bool,
}

/// Weighted objective for one (scene, task). Box and rank terms cover the
/// matched queries; `ranks[o]` is the level of object `o` (8 = irrelevant).
pub fn total_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    gt: &[BBox],
    ranks: &[u8],
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<TotalLoss, LossError> {
    if ranks.len() != gt.len() {
        return Err(LossError::InvalidArgument(format!("{} ranks for {} objects", ranks.len(), gt.len())));
    }
    let k = tape.value(heads.logits).len();
    let mut targets = vec![false; k];
    for &(q, _) in &m.pairs {
        targets[q] = true;
    }
    let ce = focal_loss(tape, heads.logits, &targets, cfg.alpha, cfg.gamma)?;

    let queries: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let objects: Vec<BBox> = m.pairs.iter().map(|p| gt[p.1]).collect();
    let levels: Vec<u8> = m.pairs.iter().map(|p| ranks[p.1]).collect();
    let (l1, gi) = if queries.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let n = queries.len() as f64;
        let pb = tape.gather_rows(heads.boxes, &queries)?;
        let tb = Tensor::from_rows(&objects.iter().map(|b| b.to_array().to_vec()).collect::<Vec<_>>())?;
        let tb = tape.constant(tb);
        let diff = tape.sub(pb, tb)?;
        let diff = tape.abs(diff);
        let l1 = tape.sum(diff);
        let l1 = tape.scale(l1, 1.0 / n);
        let g = giou_rows(tape, pb, &objects)?;
        let g = tape.affine(g, -1.0, 1.0);
        (l1, tape.mean(g))
    };
    let rank = if queries.len() < 2 {
        RankLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            degenerate: true,
        }
    } else {
        let sc = tape.gather_rows(heads.scores, &queries)?;
        group_ranking_loss(tape, sc, &levels, cfg.rho)?
    };

    let [w1, w2, w3, w4] = cfg.weights;
    let t1 = tape.scale(ce, w1);
    let t2 = tape.scale(l1, w2);
    let t3 = tape.scale(gi, w3);
    let t4 = tape.scale(rank.loss, w4);
    let total = tape.add(t1, t2)?;
    let total = tape.add(total, t3)?;
    let total = tape.add(total, t4)?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item(),
        l1: tape.value(l1).item(),
        giou: tape.value(gi).item(),
        rank: tape.value(rank.loss).item(),
        selection: 0.0,
        total: tape.value(total).item(),
    };
    Ok(TotalLoss {
        total,
        breakdown,
        rank_degenerate: rank.degenerate,
    })
}
