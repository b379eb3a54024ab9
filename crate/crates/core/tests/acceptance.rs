//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 4 and 8 are hard requirements and fail the run. The
//! synthetic-convergence criteria 5 to 7 are reported but only fail the run
//! when `CGR_STRICT` is set.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cgr::ggu::{aggregate, graph_update, gumbel_group, infer, Grouping};
use cgr::harness::{calibrate_theta_rel, composition_checks, evaluate, evaluate_ground_truth, gradcheck, train, Checkpoint, RunConfig, Scope, TraceRow, Trainer};
use cgr::losses::{assignment_cost, group_ranking_loss, linear_sum_assignment};
use cgr::metrics::{ari, average_precision, effective_rank, eval_match, ssor, MetricReport, IOU_THRESHOLD};
use cgr::numerics::{Tape, Tensor};
use cgr::scene::{BBox, SceneSample, TaskSpec};
use cgr::trm::{select_queries_and_groups, FusedFeatures};
use cgr::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const COMPOSITION_TOL: f64 = 1e-3;
const GRADCHECK_POINTS: usize = 10;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const RANK_ORACLE_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-9;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_SSOR: f64 = 0.85;
const MIN_ARI: f64 = 0.80;
const MIN_MAP50: f64 = 0.70;
const MIN_TASK_RECALL: f64 = 0.85;
const MIN_ARI_GAIN: f64 = 0.03;
const MIN_CONTEXT_FLIP: f64 = 0.80;
/// Lower detection threshold for an informational line only.
const DIAGNOSTIC_DET_THRESH: f64 = 0.15;

struct Outcome {
    id: u32,
    hard: bool,
    passed: bool,
}

fn report(out: &mut Vec<Outcome>, id: u32, hard: bool, name: &str, passed: bool, detail: String) {
    let mark = if passed { "PASS" } else { "FAIL" };
    println!("[{mark}] criterion {id} {name}: {detail}");
    out.push(Outcome { id, hard, passed });
}

fn gradient_suite(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let ops = gradcheck(Scope::Ops, 0, GRADCHECK_POINTS).unwrap();
    let comps = composition_checks(0, GRADCHECK_POINTS).unwrap();
    let elapsed = t0.elapsed();
    let worst = |ls: &[cgr::harness::CheckLine]| ls.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let ops_ok = ops.iter().all(|l| l.passed && l.max_rel_err <= OP_TOL);
    let comps_ok = comps.iter().all(|l| l.passed && l.max_rel_err <= COMPOSITION_TOL);
    for l in ops.iter().chain(&comps).filter(|l| !l.passed) {
        println!("    failing check {} max rel err {:.3e} at {:?}", l.name, l.max_rel_err, l.worst);
    }
    report(
        out,
        1,
        true,
        "gradient suite",
        ops_ok && comps_ok && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} ops worst {:.2e} (tol {OP_TOL:.0e}), {} compositions worst {:.2e} (tol {COMPOSITION_TOL:.0e}), {GRADCHECK_POINTS} points, {:.1}s",
            ops.len(),
            worst(&ops),
            comps.len(),
            worst(&comps),
            elapsed.as_secs_f64()
        ),
    );
}

/// Literal pair enumeration of the grouped ranking loss.
fn rank_loss_oracle(scores: &[f64], gt: &[u8], rho: f64) -> f64 {
    let n = gt.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (i, j) = if gt[a] >= gt[b] { (a, b) } else { (b, a) };
            pairs.push((i, j));
        }
    }
    let total_gap: f64 = pairs.iter().map(|&(i, j)| f64::from(gt[i]) - f64::from(gt[j])).sum();
    let mut loss = 0.0;
    for (i, j) in pairs {
        let d_p = -scores[i] + scores[j];
        let d_gt = f64::from(gt[i]) - f64::from(gt[j]);
        let sign = if d_gt > 0.0 { 1.0 } else { 0.0 };
        let d = d_p * sign + (1.0 - sign) * d_p.abs();
        let beta = if d_gt == 0.0 { rho } else { d_gt / total_gap };
        loss += beta * (1.0 + d.exp()).ln();
    }
    loss
}

fn tape_rank_loss(scores: &[f64], gt: &[u8], rho: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(scores.to_vec()));
    let l = group_ranking_loss(&mut tape, s, gt, rho).unwrap().loss;
    tape.value(l).data()[0]
}

fn loss_oracles(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let n = rng.random_range(2..=8);
        let gt: Vec<u8> = (0..n).map(|_| rng.random_range(1..=8)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rho = [0.0, 0.25, 0.5, 1.0][k % 4];
        worst = worst.max((tape_rank_loss(&scores, &gt, rho) - rank_loss_oracle(&scores, &gt, rho)).abs());
    }
    let three = (tape_rank_loss(&[0.0, 0.1, 3.0], &[1, 1, 2], 0.5) - rank_loss_oracle(&[0.0, 0.1, 3.0], &[1, 1, 2], 0.5)).abs();
    let closed = tape_rank_loss(&[0.7, 0.7], &[1, 1], 0.5);
    let exact = closed == 0.5 * 2f64.ln();
    report(
        out,
        2,
        true,
        "loss oracles",
        worst <= RANK_ORACLE_TOL && three <= RANK_ORACLE_TOL && exact,
        format!("1000 random instances max abs diff {worst:.2e} (tol {RANK_ORACLE_TOL:.0e}); three-object case diff {three:.2e}; equal pair {closed:.17}"),
    );
}

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
    best
}

fn matching_oracle(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(rows..=7);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let got = assignment_cost(&cost, &linear_sum_assignment(&cost).unwrap());
        if got != brute_force_min(&cost) {
            mismatches += 1;
        }
    }
    report(out, 3, true, "matching oracle", mismatches == 0, format!("{mismatches} of 500 trials differ from exhaustive enumeration"));
}

fn metric_anchors(out: &mut Vec<Outcome>) {
    let mut cfg = RunConfig::default();
    cfg.data.n_eval = 50;
    let scenes = cfg.data.eval_split().unwrap();
    let pairs: usize = scenes.iter().map(|s| s.tasks.len()).sum();
    let r = evaluate_ground_truth(&scenes).unwrap();
    let replay_ok = r.headline().iter().all(|&(_, v)| v == 1.0);
    let spearman = ssor(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let ari_v = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    let ap = average_precision(&[(0.9, false), (0.8, true)], 1);
    let hand_ok = (spearman - 0.75).abs() <= METRIC_TOL && (ari_v + 0.5).abs() <= METRIC_TOL && (ap - 0.5).abs() <= METRIC_TOL;
    let listed: Vec<String> = r.headline().iter().map(|(n, v)| format!("{n}={v}")).collect();
    report(
        out,
        4,
        true,
        "metric anchors",
        pairs == 100 && replay_ok && hand_ok,
        format!("replay over {pairs} pairs: {}; ssor {spearman}, ari {ari_v}, ap {ap}", listed.join(" ")),
    );
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d: 8,
        grid_h: 4,
        grid_w: 4,
        k_o: 6,
        k_g: 3,
        heads: 2,
        ffn_hidden: 8,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn permutation_equivariance(seed: u64) -> f64 {
    let model = small_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let (o, g, tc) = (random(&mut rng, 6, 8), random(&mut rng, 3, 8), random(&mut rng, 2, 8));
    let perm = [4usize, 2, 0, 5, 1, 3];
    let permuted = Tensor::from_rows(&perm.iter().map(|&r| o.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |o: &Tensor| {
        let mut tape = Tape::new();
        let p = model.params.bind_frozen(&mut tape);
        let [o, g, tc] = [o, &g, &tc].map(|t| tape.constant(t.clone()));
        let a = gumbel_group(&mut tape, &p, o, g, 1.0, Grouping::Eval, true).unwrap();
        let gf = aggregate(&mut tape, o, &a).unwrap();
        let up = graph_update(&mut tape, &p, gf.theta, tc).unwrap();
        tape.value(up.theta_r).clone()
    };
    let base = run(&o);
    let moved = run(&permuted);
    perm.iter()
        .enumerate()
        .flat_map(|(k, &r)| moved.row(k).iter().zip(base.row(r)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn topk_dominance(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let i = tape.constant(random(&mut rng, 16, 8));
    let t_a = tape.constant(random(&mut rng, 2, 8));
    let t_c = tape.constant(random(&mut rng, 2, 8));
    let image_attention = tape.constant(Tensor::zeros(&[16, 4]));
    let text_attention = tape.constant(Tensor::zeros(&[4, 16]));
    let f = FusedFeatures {
        i,
        t_a,
        t_c,
        image_attention,
        text_attention,
    };
    let q = select_queries_and_groups(&mut tape, &f, 6, 3).unwrap();
    let dominates = |scores: &[f64], picked: &[usize]| {
        let low = picked.iter().map(|&k| scores[k]).fold(f64::INFINITY, f64::min);
        (0..scores.len()).filter(|k| !picked.contains(k)).all(|k| scores[k] <= low)
    };
    dominates(&q.scores_a, &q.o_idx) && dominates(&q.scores_c, &q.g_idx)
}

fn short_trace() -> Vec<TraceRow> {
    let mut cfg = RunConfig {
        iterations: 5,
        ..RunConfig::default()
    };
    cfg.data.n_train = 10;
    let mut t = Trainer::new(cfg).unwrap();
    t.run(|_| Ok(())).unwrap();
    t.trace
}

fn invariant_suite(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut st_err: f64 = 0.0;
    let mut row_err: f64 = 0.0;
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..10), rng.random_range(1..10));
        let mut tape = Tape::new();
        let mut logits = random(&mut rng, r, c);
        logits.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let x = tape.constant(logits);
        let soft = tape.softmax(x, 1).unwrap();
        let s = tape.value(soft).clone();
        for k in 0..r {
            row_err = row_err.max((s.row(k).iter().sum::<f64>() - 1.0).abs());
        }
        let mut hard = Tensor::zeros(&[r, c]);
        for k in 0..r {
            hard.data_mut()[k * c + rng.random_range(0..c)] = 1.0;
        }
        let st = tape.straight_through(hard.clone(), soft).unwrap();
        st_err = st_err.max(tape.value(st).max_abs_diff(&hard));
    }
    let equivariance = (0..20).map(permutation_equivariance).fold(0.0, f64::max);
    let mut shift_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let gt: Vec<u8> = (0..n).map(|_| rng.random_range(1..=8)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        shift_err = shift_err.max((tape_rank_loss(&scores, &gt, 0.5) - tape_rank_loss(&shifted, &gt, 0.5)).abs());
    }
    let topk = (0..50).all(topk_dominance);
    let deterministic = short_trace() == short_trace();
    let passed = st_err < 1e-12 && row_err < 1e-9 && equivariance < 1e-10 && shift_err < 1e-9 && topk && deterministic;
    report(
        out,
        8,
        true,
        "invariant suite",
        passed,
        format!(
            "straight-through {st_err:.1e}, softmax rows {row_err:.1e}, ggu permutation {equivariance:.1e}, rank shift {shift_err:.1e}, topk dominance {topk}, identical traces {deterministic}"
        ),
    );
}

struct Run {
    ck: Checkpoint,
    report: MetricReport,
    seconds: f64,
}

fn train_and_evaluate(seed: u64, rho: f64, held_out: &[SceneSample]) -> Run {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.loss.rho = rho;
    let t0 = Instant::now();
    let (ck, _) = train(cfg).unwrap();
    let seconds = t0.elapsed().as_secs_f64();
    let model = ck.model().unwrap();
    let report = evaluate(&model, held_out, ck.theta_rel().unwrap(), ck.cfg.det_thresh).unwrap();
    let headline = |r: &MetricReport| r.headline().iter().map(|(n, v)| format!("{n} {v:.3}")).collect::<Vec<_>>().join(", ");
    println!("    seed {seed} rho {rho}: {} ({seconds:.0}s)", headline(&report));
    let theta = calibrate_theta_rel(&model, &ck.cfg.data.train_split().unwrap(), DIAGNOSTIC_DET_THRESH).unwrap();
    let diag = evaluate(&model, held_out, theta, DIAGNOSTIC_DET_THRESH).unwrap();
    println!("      diagnostic at det_thresh {DIAGNOSTIC_DET_THRESH}: {}", headline(&diag));
    Run { ck, report, seconds }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1).max(1) as f64;
    (m, var.sqrt())
}

fn convergence(out: &mut Vec<Outcome>, runs: &[Run]) {
    let metric = |f: fn(&MetricReport) -> f64| runs.iter().map(|r| f(&r.report)).collect::<Vec<f64>>();
    let checks: [(&str, Vec<f64>, f64); 4] = [
        ("ssor", metric(|r| r.ssor.value()), MIN_SSOR),
        ("ari", metric(|r| r.ari.value()), MIN_ARI),
        ("map50", metric(|r| r.map50), MIN_MAP50),
        ("task_recall", metric(|r| r.task_recall.value()), MIN_TASK_RECALL),
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, values, min) in &checks {
        let (m, s) = mean_std(values);
        passed &= m >= *min;
        parts.push(format!("{name} {m:.3}±{s:.3} (need {min})"));
    }
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    passed &= slowest < TRAIN_BUDGET.as_secs_f64();
    parts.push(format!("slowest run {slowest:.0}s"));
    report(out, 5, false, "synthetic convergence", passed, parts.join(", "));
}

fn rho_direction(out: &mut Vec<Outcome>, with_penalty: &[Run], without: &[Run]) {
    let gains: Vec<f64> = with_penalty.iter().zip(without).map(|(a, b)| a.report.ari.value() - b.report.ari.value()).collect();
    let passed = gains.iter().all(|g| *g >= MIN_ARI_GAIN);
    let listed: Vec<String> = gains.iter().map(|g| format!("{g:+.3}")).collect();
    report(out, 6, false, "rho ablation direction", passed, format!("ARI(0.5) - ARI(0) per seed [{}] (need >= {MIN_ARI_GAIN} each)", listed.join(", ")));
}

/// -1, 0 or 1 for the predicted order of the objects `x` and `y`; `None`
/// when either is missed.
fn predicted_order(model: &Model, scene: &SceneSample, task: &TaskSpec, theta: f64, det_thresh: f64, x: usize, y: usize) -> Option<i8> {
    let pred = infer(model, scene, task, theta, det_thresh).unwrap();
    let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let m = eval_match(&pred, &gt, IOU_THRESHOLD);
    let rx = effective_rank(&pred, m.detection_for(x)?);
    let ry = effective_rank(&pred, m.detection_for(y)?);
    Some(rx.cmp(&ry) as i8)
}

fn context_sensitivity(out: &mut Vec<Outcome>, runs: &[Run], held_out: &[SceneSample]) {
    let table = RunConfig::default().data.table().unwrap();
    let vocab = table.vocabulary();
    let mut fractions = Vec::new();
    let mut cases = 0;
    for run in runs {
        let model = run.ck.model().unwrap();
        let theta = run.ck.theta_rel().unwrap();
        let (mut flipped, mut total) = (0usize, 0usize);
        for scene in held_out {
            for a in 0..table.n_affordances() {
                for c1 in 0..table.n_contexts(a) {
                    for c2 in c1 + 1..table.n_contexts(a) {
                        for (cx, cy) in table.inverted_pairs(a, c1, c2) {
                            let find = |k: usize| scene.objects.iter().position(|o| o.category_id == k);
                            let (Some(x), Some(y)) = (find(cx), find(cy)) else { continue };
                            total += 1;
                            let first = predicted_order(&model, scene, &TaskSpec::new(&vocab, a, c1), theta, run.ck.cfg.det_thresh, x, y);
                            let second = predicted_order(&model, scene, &TaskSpec::new(&vocab, a, c2), theta, run.ck.cfg.det_thresh, x, y);
                            if matches!((first, second), (Some(p), Some(q)) if p != q) {
                                flipped += 1;
                            }
                        }
                    }
                }
            }
        }
        cases = total;
        fractions.push(if total > 0 { flipped as f64 / total as f64 } else { 0.0 });
    }
    let (m, s) = mean_std(&fractions);
    report(
        out,
        7,
        false,
        "context sensitivity",
        cases > 0 && fractions.iter().all(|f| *f >= MIN_CONTEXT_FLIP),
        format!("order differs on {m:.3}±{s:.3} of {cases} inverted-pair cases (need >= {MIN_CONTEXT_FLIP} each seed)"),
    );
}

fn main() -> ExitCode {
    let mut out = Vec::new();
    gradient_suite(&mut out);
    loss_oracles(&mut out);
    matching_oracle(&mut out);
    metric_anchors(&mut out);
    invariant_suite(&mut out);

    let held_out = RunConfig::default().data.eval_split().unwrap();
    let with_penalty: Vec<Run> = SEEDS.iter().map(|&s| train_and_evaluate(s, 0.5, &held_out)).collect();
    let without: Vec<Run> = SEEDS.iter().map(|&s| train_and_evaluate(s, 0.0, &held_out)).collect();
    convergence(&mut out, &with_penalty);
    rho_direction(&mut out, &with_penalty, &without);
    context_sensitivity(&mut out, &with_penalty, &held_out);

    out.sort_by_key(|o| o.id);
    let strict = std::env::var_os("CGR_STRICT").is_some();
    let passed = out.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", out.len());
    let blocking: Vec<u32> = out.iter().filter(|o| !o.passed && (o.hard || strict)).map(|o| o.id).collect();
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("blocking failures: {blocking:?}");
        ExitCode::FAILURE
    }
}
