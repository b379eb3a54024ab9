//! Model configuration, parameters and the end-to-end forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{encode_scene, encode_task};
use crate::ggu::{self, GroupAssignment, GraphUpdate, GroupedFeatures, Grouping, GumbelNoise, HeadOutputs};
use crate::numerics::{NumericsError, Tape};
use crate::params::{Bound, ParamStore};
use crate::scene::{SceneSample, TaskSpec};
use crate::trm::{self, Decoded, FusedFeatures, QuerySet};
use crate::{encoders, numerics::Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {found:?}, model expects {expected:?}")]
    IncompatibleParam {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k_o: usize,
    pub k_g: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_categories: usize,
    pub vocab_size: usize,
    /// Standard deviation of the fixed per-scene grid noise.
    pub noise: f64,
    /// Per-row spread of signatures and embeddings around their common vector.
    pub init_spread: f64,
    /// Initial relevance probability of every query.
    pub cls_prior: f64,
    pub gumbel_noise: GumbelNoise,
    pub straight_through: bool,
    /// Gumbel-Softmax temperature used at inference.
    pub tau: f64,
    /// Chebyshev radius in grid cells that image attention may reach from
    /// each image cell or query cell. `None` attends globally.
    pub attention_radius: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            grid_h: 16,
            grid_w: 16,
            k_o: 24,
            k_g: 8,
            n_blocks: 2,
            heads: 4,
            ffn_hidden: 64,
            n_categories: 12,
            vocab_size: 16,
            noise: 0.05,
            init_spread: 0.5,
            cls_prior: 0.01,
            gumbel_noise: GumbelNoise::PerPair,
            straight_through: true,
            tau: 1.0,
            attention_radius: Some(1),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d == 0 || self.d % 4 != 0 {
            return bad(format!("d={} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} is not divisible into {} heads", self.d, self.heads));
        }
        let cells = self.grid_h * self.grid_w;
        if cells == 0 || self.k_o == 0 || self.k_g == 0 || self.k_o > cells || self.k_g > self.k_o {
            return bad(format!(
                "need 1 <= k_g ({}) <= k_o ({}) <= grid cells ({cells})",
                self.k_g, self.k_o
            ));
        }
        if self.n_blocks == 0 || self.ffn_hidden == 0 || self.n_categories == 0 || self.vocab_size == 0 {
            return bad("n_blocks, ffn_hidden, n_categories and vocab_size must be positive".into());
        }
        if !(self.noise >= 0.0 && self.init_spread >= 0.0 && self.tau > 0.0) {
            return bad("noise and init_spread must be non-negative and tau positive".into());
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return bad(format!("cls_prior {} outside (0, 1)", self.cls_prior));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
pub struct Forward {
    pub fused: FusedFeatures,
    /// Affordance affinity of every grid cell.
    pub affinity: Var,
    pub queries: QuerySet,
    pub decoded: Decoded,
    pub assignment: GroupAssignment,
    pub grouped: GroupedFeatures,
    pub graph: GraphUpdate,
    pub heads: HeadOutputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoders::register(&mut params, &mut rng, &cfg);
        trm::register(&mut params, &mut rng, &cfg);
        ggu::register(&mut params, &mut rng, &cfg);
        Ok(Self { cfg, params })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        scene: &SceneSample,
        task: &TaskSpec,
        grouping: Grouping<'_>,
        tau: f64,
    ) -> Result<Forward, ModelError> {
        let c = &self.cfg;
        let fi = encode_scene(tape, p, scene, c)?;
        let (fa, fc) = encode_task(tape, p, task)?;
        self.forward_features(tape, p, fi, fa, fc, grouping, tau, None)
    }

    /// Forward from backbone features. `fixed` pins the query and group
    /// indices instead of selecting them.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fi: Var,
        fa: Var,
        fc: Var,
        grouping: Grouping<'_>,
        tau: f64,
        fixed: Option<(&[usize], &[usize])>,
    ) -> Result<Forward, ModelError> {
        let c = &self.cfg;
        let (fi, fa, fc) = trm::project_inputs(tape, p, fi, fa, fc)?;
        let pos = tape.constant(encoders::positional_encoding_2d(c.grid_h, c.grid_w, c.d)?);
        let img_bias = c.attention_radius.map(|r| {
            let all: Vec<usize> = (0..c.grid_h * c.grid_w).collect();
            tape.constant(trm::neighborhood_bias(&all, c.grid_h, c.grid_w, r))
        });
        let e = trm::enhance(tape, p, fi, Some(pos), img_bias, fa, fc, c.heads)?;
        let fused = trm::bidirectional_fuse(tape, p, e.image, e.affordance, e.context)?;
        let affinity = trm::affordance_affinity(tape, &fused)?;
        let queries = match fixed {
            None => trm::select_queries_and_groups(tape, &fused, c.k_o, c.k_g)?,
            Some((o_idx, g_idx)) => {
                let (o, g) = trm::gather_queries(tape, fused.i, o_idx, g_idx)?;
                QuerySet {
                    o,
                    g,
                    o_idx: o_idx.to_vec(),
                    g_idx: g_idx.to_vec(),
                    scores_a: Vec::new(),
                    scores_c: Vec::new(),
                }
            }
        };
        let rows: Vec<usize> = queries.o_idx.iter().chain(&queries.g_idx).copied().collect();
        let dec_pos = Some((tape.gather_rows(pos, &rows)?, pos));
        let dec_bias = c.attention_radius.map(|r| tape.constant(trm::neighborhood_bias(&rows, c.grid_h, c.grid_w, r)));
        let decoded = trm::group_decode(tape, p, queries.o, queries.g, fused.t_a, fused.i, dec_pos, dec_bias, c.n_blocks, c.heads)?;
        let assignment = ggu::gumbel_group(tape, p, decoded.o, decoded.g, tau, grouping, c.straight_through)?;
        let grouped = ggu::aggregate(tape, decoded.o, &assignment)?;
        let graph = ggu::graph_update(tape, p, grouped.theta, fused.t_c)?;
        let heads = ggu::heads(tape, p, decoded.o, graph.theta_r, &queries.o_idx, (c.grid_h, c.grid_w))?;
        Ok(Forward {
            fused,
            affinity,
            queries,
            decoded,
            assignment,
            grouped,
            graph,
            heads,
        })
    }
}
