use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_scene, encode_task};
use crate::ggu::{self, Grouping};
use crate::losses::{group_ranking_loss, hungarian_match, total_loss, LossConfig, MatchResult};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, opsuite, sigmoid, GradCheckReport, Tape, Tensor, Var};
use crate::params::{normal, Bound, ParamStore};
use crate::scene::{BBox, SceneObject, SceneSample, TaskSpec};
use crate::{trm, ModelError};

use super::HarnessError;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITION_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Model,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ops" => Ok(Scope::Ops),
            "model" => Ok(Scope::Model),
            other => Err(format!("unknown scope '{other}', expected 'ops' or 'model'")),
        }
    }
}

/// Worst result of one check over all sampled points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

impl CheckLine {
    fn from_report(name: &str, points: usize, r: &GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            points,
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            worst: r.non_finite.or(r.worst),
            passed: r.passed,
        }
    }
}

fn worst_of(name: &str, points: usize, mut one: impl FnMut(u64) -> Result<GradCheckReport, HarnessError>, seed: u64) -> Result<CheckLine, HarnessError> {
    let mut worst: Option<GradCheckReport> = None;
    for i in 0..points {
        let r = one(seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        let failed = !r.passed;
        if worst.as_ref().is_none_or(|w| failed || r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
        if failed {
            break;
        }
    }
    let w = worst.ok_or_else(|| HarnessError::Invalid("a gradient check needs at least one point".into()))?;
    Ok(CheckLine::from_report(name, points, &w))
}

fn rand(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    normal(rng, &[r, c], 0.0, 1.0)
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        grid_h: 4,
        grid_w: 4,
        k_o: 6,
        k_g: 3,
        n_blocks: 2,
        heads: 2,
        ffn_hidden: 8,
        n_categories: 4,
        vocab_size: 6,
        noise: 0.0,
        straight_through: false,
        ..ModelConfig::default()
    }
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var, ModelError> {
    let c = tape.constant(w.clone());
    let y = tape.mul(x, c)?;
    Ok(tape.sum(y))
}

/// Input projection, enhancement, fusion and the group decoder, with the
/// query selection held at the one made at the base point.
fn trm_point(seed: u64) -> Result<GradCheckReport, HarnessError> {
    let cfg = tiny_model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = ParamStore::new();
    trm::register(&mut st, &mut rng, &cfg);
    let cells = cfg.grid_h * cfg.grid_w;
    let inputs = vec![rand(&mut rng, cells, cfg.d), rand(&mut rng, 2, cfg.d), rand(&mut rng, 3, cfg.d)];
    let weight = rand(&mut rng, cfg.k_o + cfg.k_g, cfg.d);

    let fused = |tape: &mut Tape, p: &Bound, vs: &[Var]| -> Result<trm::FusedFeatures, ModelError> {
        let (fi, fa, fc) = trm::project_inputs(tape, p, vs[0], vs[1], vs[2])?;
        let e = trm::enhance(tape, p, fi, None, None, fa, fc, cfg.heads)?;
        trm::bidirectional_fuse(tape, p, e.image, e.affordance, e.context)
    };
    let mut point = inputs;
    point.extend(st.tensors().iter().cloned());
    let (o_idx, g_idx) = {
        let mut tape = Tape::new();
        let vs: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let p = st.bind_vars(&vs[3..])?;
        let f = fused(&mut tape, &p, &vs)?;
        let q = trm::select_queries_and_groups(&mut tape, &f, cfg.k_o, cfg.k_g)?;
        (q.o_idx, q.g_idx)
    };
    Ok(grad_check(
        |tape: &mut Tape, vs: &[Var]| -> Result<Var, HarnessError> {
            let p = st.bind_vars(&vs[3..])?;
            let f = fused(tape, &p, vs)?;
            let (o, g) = trm::gather_queries(tape, f.i, &o_idx, &g_idx)?;
            let d = trm::group_decode(tape, &p, o, g, f.t_a, f.i, None, None, cfg.n_blocks, cfg.heads)?;
            let x = tape.concat_rows(&[d.o, d.g])?;
            Ok(weighted_sum(tape, x, &weight)?)
        },
        &point,
        EPS,
        COMPOSITION_TOL,
    )?)
}

/// Hard grouping (no straight-through), aggregation and the graph update.
fn ggu_point(seed: u64) -> Result<GradCheckReport, HarnessError> {
    let cfg = tiny_model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = ParamStore::new();
    ggu::register(&mut st, &mut rng, &cfg);
    let mut point = vec![rand(&mut rng, cfg.k_o, cfg.d), rand(&mut rng, cfg.k_g, cfg.d), rand(&mut rng, 3, cfg.d)];
    point.extend(st.tensors().iter().cloned());
    let weight = rand(&mut rng, cfg.k_o, cfg.d);
    Ok(grad_check(
        |tape: &mut Tape, vs: &[Var]| -> Result<Var, HarnessError> {
            let p = st.bind_vars(&vs[3..])?;
            let a = ggu::gumbel_group(tape, &p, vs[0], vs[1], 1.0, Grouping::Eval, false)?;
            let g = ggu::aggregate(tape, vs[0], &a)?;
            let u = ggu::graph_update(tape, &p, g.theta, vs[2])?;
            Ok(weighted_sum(tape, u.theta_r, &weight)?)
        },
        &point,
        EPS,
        COMPOSITION_TOL,
    )?)
}

fn rank_point(seed: u64) -> Result<GradCheckReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let ranks: Vec<u8> = (0..n).map(|_| rng.random_range(1..=8)).collect();
    let rho = [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)];
    let scores = rand(&mut rng, n, 1);
    Ok(grad_check(
        |tape: &mut Tape, vs: &[Var]| -> Result<Var, HarnessError> { Ok(group_ranking_loss(tape, vs[0], &ranks, rho)?.loss) },
        &[scores],
        EPS,
        COMPOSITION_TOL,
    )?)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3))
}

fn total_point(seed: u64) -> Result<GradCheckReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 6;
    let n = rng.random_range(2..=4);
    let gt: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
    let ranks: Vec<u8> = (0..n).map(|_| rng.random_range(1..=8)).collect();
    let point = vec![rand(&mut rng, k, 1), rand(&mut rng, k, 4), rand(&mut rng, k, 1)];
    let boxes: Vec<BBox> = (0..k)
        .map(|r| {
            let b = point[1].row(r);
            BBox::new(sigmoid(b[0]), sigmoid(b[1]), sigmoid(b[2]), sigmoid(b[3]))
        })
        .collect();
    let probs: Vec<f64> = point[0].data().iter().map(|&x| sigmoid(x)).collect();
    let cfg = LossConfig::default();
    let m = hungarian_match(&boxes, &probs, &gt, cfg.match_weights())?;
    Ok(grad_check(
        |tape: &mut Tape, vs: &[Var]| -> Result<Var, HarnessError> {
            let heads = ggu::HeadOutputs {
                logits: vs[0],
                boxes: tape.sigmoid(vs[1]),
                scores: vs[2],
            };
            Ok(total_loss(tape, &heads, &gt, &ranks, &m, &cfg)?.total)
        },
        &point,
        EPS,
        COMPOSITION_TOL,
    )?)
}

/// Full objective of a `d = 8` model with respect to every parameter, with
/// query selection and matching fixed at the base point.
fn model_point(seed: u64) -> Result<GradCheckReport, HarnessError> {
    let cfg = tiny_model_cfg();
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(2..=4);
    let scene = SceneSample {
        scene_id: "check".into(),
        seed,
        objects: (0..n)
            .map(|_| SceneObject {
                bbox: random_box(&mut rng),
                category_id: rng.random_range(0..cfg.n_categories),
            })
            .collect(),
        tasks: Vec::new(),
    };
    let task = TaskSpec {
        affordance_id: 0,
        context_id: 0,
        affordance_tokens: vec![1],
        context_tokens: vec![3, 4],
    };
    let ranks: Vec<u8> = (0..n).map(|_| rng.random_range(1..=8)).collect();
    let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let loss_cfg = LossConfig::default();

    let (o_idx, g_idx, m) = {
        let mut tape = Tape::new();
        let p = model.params.bind_frozen(&mut tape);
        let f = model.forward(&mut tape, &p, &scene, &task, Grouping::Eval, cfg.tau)?;
        let bv = tape.value(f.heads.boxes);
        let boxes: Vec<BBox> = (0..bv.rows()).map(|r| BBox::from_array(bv.row(r).try_into().expect("4 columns"))).collect();
        let probs: Vec<f64> = tape.value(f.heads.logits).data().iter().map(|&x| sigmoid(x)).collect();
        let m: MatchResult = hungarian_match(&boxes, &probs, &gt, loss_cfg.match_weights())?;
        (f.queries.o_idx, f.queries.g_idx, m)
    };
    Ok(grad_check(
        |tape: &mut Tape, vs: &[Var]| -> Result<Var, HarnessError> {
            let p = model.params.bind_vars(vs)?;
            let fi = encode_scene(tape, &p, &scene, &cfg)?;
            let (fa, fc) = encode_task(tape, &p, &task)?;
            let f = model.forward_features(tape, &p, fi, fa, fc, Grouping::Eval, cfg.tau, Some((&o_idx, &g_idx)))?;
            Ok(total_loss(tape, &f.heads, &gt, &ranks, &m, &loss_cfg)?.total)
        },
        model.params.tensors(),
        EPS,
        COMPOSITION_TOL,
    )?)
}

/// Module-level compositions: the fuse-and-decode path, grouping with the
/// graph update, the ranking loss and the total objective.
pub fn composition_checks(seed: u64, points: usize) -> Result<Vec<CheckLine>, HarnessError> {
    Ok(vec![
        worst_of("trm fuse+decode", points, trm_point, seed)?,
        worst_of("ggu aggregate+graph_update", points, ggu_point, seed)?,
        worst_of("group_ranking_loss", points, rank_point, seed)?,
        worst_of("total_loss", points, total_point, seed)?,
    ])
}

pub fn model_check(seed: u64, points: usize) -> Result<CheckLine, HarnessError> {
    worst_of("model d=8", points, model_point, seed)
}

/// Every op of the numerics suite, or the compositions plus the full model.
pub fn gradcheck(scope: Scope, seed: u64, points: usize) -> Result<Vec<CheckLine>, HarnessError> {
    match scope {
        Scope::Ops => Ok(opsuite::run_suite(seed, points, EPS, OP_TOL)?
            .iter()
            .map(|(name, r)| CheckLine::from_report(name, points, r))
            .collect()),
        Scope::Model => {
            let mut lines = composition_checks(seed, points)?;
            lines.push(model_check(seed, points)?);
            Ok(lines)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parses() {
        assert_eq!("ops".parse::<Scope>(), Ok(Scope::Ops));
        assert_eq!("model".parse::<Scope>(), Ok(Scope::Model));
        assert!("all".parse::<Scope>().is_err());
    }

    #[test]
    fn model_scope_passes_at_one_point() {
        let lines = gradcheck(Scope::Model, 3, 1).unwrap();
        assert_eq!(lines.len(), 5);
        for l in &lines {
            assert!(l.passed, "{l:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails_with_a_coordinate() {
        // Detaching one factor drops half of the product rule.
        let x = Tensor::vector(vec![0.7, -1.3, 2.0]);
        let r = grad_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, HarnessError> {
                let d = t.detach(v[0]);
                let y = t.mul(v[0], d)?;
                Ok(t.sum(y))
            },
            &[x],
            EPS,
            OP_TOL,
        )
        .unwrap();
        let line = CheckLine::from_report("x*x", 1, &r);
        assert!(!line.passed);
        assert!(line.worst.is_some());
    }
}
