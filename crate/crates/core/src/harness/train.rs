use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ggu::Grouping;
use crate::encoders::cell_at;
use crate::losses::{hungarian_match, selection_loss, total_loss, LossBreakdown};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::numerics::archive::Archive;
use crate::numerics::{sigmoid, Tape, Tensor};
use crate::params::ParamStore;
use crate::scene::{BBox, SceneSample, TaskAnnotation};

use super::eval::{calibrate_theta_rel, evaluate};
use super::{AdamW, HarnessError, RunConfig};

const TRAIN_STREAM: u64 = 0x747261696e;
const PARAM_PREFIX: &str = "param.";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Batch-averaged losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub tau: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub rank: f64,
    pub selection: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Loss and parameter gradients of one (scene, task).
pub(crate) fn sample_gradients(
    model: &Model,
    scene: &SceneSample,
    task: &TaskAnnotation,
    cfg: &RunConfig,
    tau: f64,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(LossBreakdown, Vec<Tensor>), HarnessError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let grouping = Grouping::Train {
        rng,
        noise: model.cfg.gumbel_noise,
    };
    let f = model.forward(&mut tape, &p, scene, &task.task, grouping, tau)?;
    for (component, v) in [("classification head", f.heads.logits), ("box head", f.heads.boxes), ("rank head", f.heads.scores)] {
        if !tape.value(v).is_finite() {
            return Err(HarnessError::NonFinite { component, iteration });
        }
    }
    let bv = tape.value(f.heads.boxes);
    let boxes: Vec<BBox> = (0..bv.rows()).map(|r| BBox::from_array(bv.row(r).try_into().expect("4 columns"))).collect();
    let probs: Vec<f64> = tape.value(f.heads.logits).data().iter().map(|&x| sigmoid(x)).collect();
    let gt: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let m = hungarian_match(&boxes, &probs, &gt, cfg.loss.match_weights())?;
    let loss = total_loss(&mut tape, &f.heads, &gt, &task.annotation.ranks, &m, &cfg.loss)?;
    let mc = &model.cfg;
    let centers: Vec<usize> = gt.iter().map(|b| cell_at(b.cx, b.cy, mc.grid_h, mc.grid_w)).collect();
    let sel = selection_loss(&mut tape, f.affinity, &centers, mc.d, cfg.loss.alpha, cfg.loss.gamma)?;
    let weighted = tape.scale(sel, cfg.loss.selection_weight);
    let total = tape.add(loss.total, weighted)?;
    let mut breakdown = loss.breakdown;
    breakdown.selection = tape.value(sel).item();
    breakdown.total = tape.value(total).item();
    let grads = tape.backward(total)?;
    let out = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((breakdown, out))
}

fn check_finite(b: &LossBreakdown, iteration: usize) -> Result<(), HarnessError> {
    for (name, v) in b.components() {
        if !v.is_finite() {
            return Err(HarnessError::NonFinite { component: name, iteration });
        }
    }
    Ok(())
}

/// Optimizer loop over one training split.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
    rng: ChaCha8Rng,
    scenes: Vec<SceneSample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let scenes = cfg.data.train_split()?;
        Self::with_scenes(cfg, scenes)
    }

    pub fn with_scenes(cfg: RunConfig, scenes: Vec<SceneSample>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if scenes.is_empty() || scenes.iter().any(|s| s.tasks.is_empty()) {
            return Err(HarnessError::Invalid("training needs scenes that each carry a task".into()));
        }
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(cfg.optim, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            cfg,
            model,
            opt,
            iteration: 0,
            trace: Vec::new(),
            rng,
            scenes,
        })
    }

    pub fn scenes(&self) -> &[SceneSample] {
        &self.scenes
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// One optimizer step on a batch of (scene, task) draws.
    pub fn step(&mut self) -> Result<TraceRow, HarnessError> {
        let cfg = &self.cfg;
        let tau = cfg.tau.at(self.iteration, cfg.iterations);
        let iteration = self.iteration + 1;
        let mut grads: Vec<Tensor> = self.model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut sum = LossBreakdown::default();
        for _ in 0..cfg.batch_size {
            let s = self.rng.random_range(0..self.scenes.len());
            let scene = &self.scenes[s];
            let t = self.rng.random_range(0..scene.tasks.len());
            let (b, g) = sample_gradients(&self.model, scene, &scene.tasks[t], cfg, tau, &mut self.rng, iteration)?;
            check_finite(&b, iteration)?;
            for (acc, x) in grads.iter_mut().zip(&g) {
                for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
                    *a += v;
                }
            }
            sum.ce += b.ce;
            sum.l1 += b.l1;
            sum.giou += b.giou;
            sum.rank += b.rank;
            sum.selection += b.selection;
            sum.total += b.total;
        }
        let n = cfg.batch_size as f64;
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        let grad_norm = super::clip_global_norm(&mut grads, cfg.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(HarnessError::NonFinite {
                component: "gradient",
                iteration,
            });
        }
        self.opt.update(&mut self.model.params, &grads);
        self.iteration = iteration;
        let row = TraceRow {
            iteration,
            tau,
            ce: sum.ce / n,
            l1: sum.l1 / n,
            giou: sum.giou / n,
            rank: sum.rank / n,
            selection: sum.selection / n,
            total: sum.total / n,
            grad_norm,
        };
        self.trace.push(row);
        if iteration % cfg.log_every == 0 || iteration == 1 {
            log::info!(
                "iter {iteration} total {:.4} ce {:.4} l1 {:.4} giou {:.4} rank {:.4}",
                row.total,
                row.ce,
                row.l1,
                row.giou,
                row.rank
            );
        }
        Ok(row)
    }

    /// Steps until the configured iteration count. `on_log` runs after every
    /// logged step; a failure leaves whatever it last persisted untouched.
    pub fn run(&mut self, mut on_log: impl FnMut(&Trainer) -> Result<(), HarnessError>) -> Result<(), HarnessError> {
        while !self.done() {
            self.step()?;
            if self.iteration % self.cfg.log_every == 0 {
                on_log(self)?;
            }
        }
        Ok(())
    }

    /// Trace rows at the logging cadence, plus the first step.
    pub fn logged_trace(&self) -> Vec<TraceRow> {
        self.trace
            .iter()
            .filter(|r| r.iteration == 1 || r.iteration % self.cfg.log_every == 0)
            .copied()
            .collect()
    }

    pub fn checkpoint(&self, theta_rel: Option<f64>) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg.clone(),
            iteration: self.iteration,
            params: self.model.params.clone(),
            opt: self.opt.clone(),
            rng: RngState::of(&self.rng),
            theta_rel,
        }
    }

    /// Continues a run from `ck` on the given training scenes.
    pub fn resume(ck: Checkpoint, scenes: Vec<SceneSample>) -> Result<Self, HarnessError> {
        let mut t = Self::with_scenes(ck.cfg, scenes)?;
        t.model.params = ck.params;
        t.opt = ck.opt;
        t.iteration = ck.iteration;
        t.rng = ck.rng.restore();
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn parse(&self) -> Option<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }

    fn restore(&self) -> ChaCha8Rng {
        self.parse().expect("validated when loaded")
    }
}

/// Parameters, optimizer moments, configuration, iteration counter and
/// sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: RunConfig,
    pub iteration: usize,
    pub params: ParamStore,
    pub opt: AdamW,
    rng: RngState,
    pub theta_rel: Option<f64>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut tensors = self.params.to_archive_entries(PARAM_PREFIX);
        for (i, name) in self.params.names().iter().enumerate() {
            tensors.push((format!("{M_PREFIX}{name}"), self.opt.m[i].clone()));
            tensors.push((format!("{V_PREFIX}{name}"), self.opt.v[i].clone()));
        }
        Archive {
            tensors,
            meta: json!({
                "config": self.cfg,
                "iteration": self.iteration,
                "adam_step": self.opt.step,
                "rng": self.rng,
                "theta_rel": self.theta_rel,
            }),
        }
    }

    /// Rebuilds a checkpoint, checking every tensor against the shapes the
    /// stored configuration implies.
    pub fn from_archive(a: &Archive) -> Result<Self, HarnessError> {
        let meta = |k: &str| a.meta.get(k).cloned().ok_or_else(|| HarnessError::Checkpoint(format!("metadata lacks '{k}'")));
        let parse = |e: serde_json::Error| HarnessError::Checkpoint(e.to_string());
        let cfg: RunConfig = serde_json::from_value(meta("config")?).map_err(parse)?;
        let iteration: usize = serde_json::from_value(meta("iteration")?).map_err(parse)?;
        let step: u64 = serde_json::from_value(meta("adam_step")?).map_err(parse)?;
        let rng: RngState = serde_json::from_value(meta("rng")?).map_err(parse)?;
        let theta_rel: Option<f64> = serde_json::from_value(meta("theta_rel")?).map_err(parse)?;
        if rng.parse().is_none() {
            return Err(HarnessError::Checkpoint("malformed sampler state".into()));
        }
        let params = load_params(a, &cfg, PARAM_PREFIX)?;
        let m = load_params(a, &cfg, M_PREFIX)?;
        let v = load_params(a, &cfg, V_PREFIX)?;
        Ok(Self {
            iteration,
            params,
            opt: AdamW {
                cfg: cfg.optim,
                m: m.tensors().to_vec(),
                v: v.tensors().to_vec(),
                step,
            },
            rng,
            theta_rel,
            cfg,
        })
    }

    pub fn model(&self) -> Result<Model, HarnessError> {
        Ok(Model {
            cfg: self.cfg.model.clone(),
            params: self.params.clone(),
        })
    }

    /// Relevance threshold stored with the checkpoint, else the configured one.
    pub fn theta_rel(&self) -> Option<f64> {
        self.theta_rel.or(self.cfg.theta_rel)
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), HarnessError> {
        Ok(self.to_archive().write_to(w)?)
    }

    pub fn read_from(r: impl Read) -> Result<Self, HarnessError> {
        Self::from_archive(&Archive::read_from(r)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Parameters named `prefix + name` for a model built from `cfg`.
fn load_params(a: &Archive, cfg: &RunConfig, prefix: &str) -> Result<ParamStore, HarnessError> {
    let mut store = Model::new(cfg.model.clone(), cfg.seed)?.params;
    store.load_from(a, prefix)?;
    Ok(store)
}

/// Trains from scratch, then calibrates the relevance threshold on the
/// training split unless the configuration fixes one.
pub fn train(cfg: RunConfig) -> Result<(Checkpoint, Vec<TraceRow>), HarnessError> {
    let mut t = Trainer::new(cfg)?;
    t.run(|_| Ok(()))?;
    finish(t)
}

pub(crate) fn finish(t: Trainer) -> Result<(Checkpoint, Vec<TraceRow>), HarnessError> {
    let theta = match t.cfg.theta_rel {
        Some(v) => v,
        None => calibrate_theta_rel(&t.model, t.scenes(), t.cfg.det_thresh)?,
    };
    Ok((t.checkpoint(Some(theta)), t.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rho: f64,
    pub ari: f64,
    pub ssor: f64,
    pub sa_sor: f64,
    pub map50: f64,
    pub final_loss: f64,
}

impl AblationRow {
    fn new(rho: f64, r: &MetricReport, final_loss: f64) -> Self {
        Self {
            rho,
            ari: r.ari.value(),
            ssor: r.ssor.value(),
            sa_sor: r.sa_sor.value(),
            map50: r.map50,
            final_loss,
        }
    }
}

/// One training run per ρ on identical seeds and data, each evaluated on
/// the held-out split.
pub fn ablate_rho(cfg: &RunConfig, values: &[f64]) -> Result<Vec<AblationRow>, HarnessError> {
    if values.len() < 2 {
        return Err(HarnessError::Invalid(format!("the ablation needs at least two values of rho, got {}", values.len())));
    }
    let held_out = cfg.data.eval_split()?;
    let mut rows = Vec::with_capacity(values.len());
    for &rho in values {
        let mut c = cfg.clone();
        c.loss.rho = rho;
        let (ck, trace) = train(c)?;
        let model = ck.model()?;
        let theta = ck.theta_rel().expect("set by train");
        let report = evaluate(&model, &held_out, theta, ck.cfg.det_thresh)?;
        rows.push(AblationRow::new(rho, &report, trace.last().map_or(f64::NAN, |r| r.total)));
    }
    Ok(rows)
}
