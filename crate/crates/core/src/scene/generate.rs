use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, RankAnnotation, RankTable, SceneError, SceneObject, SceneSample, TaskAnnotation, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum distance between object centers.
    pub min_sep: f64,
    pub max_tries: usize,
    pub tasks_per_scene: usize,
    /// Probability that an object is drawn from the primary affordance's relevant set.
    pub relevant_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 6,
            min_size: 0.12,
            max_size: 0.26,
            min_sep: 0.22,
            max_tries: 2000,
            tasks_per_scene: 2,
            relevant_fraction: 0.7,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SceneError> {
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(SceneError::Infeasible(format!(
                "object count range [{}, {}] must satisfy 2 <= min <= max",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 1.0) {
            return Err(SceneError::Infeasible("object sizes must satisfy 0 < min <= max < 1".into()));
        }
        if self.tasks_per_scene == 0 || self.max_tries == 0 {
            return Err(SceneError::Infeasible("tasks_per_scene and max_tries must be positive".into()));
        }
        Ok(())
    }
}

fn annotate(table: &RankTable, task: TaskSpec, objects: &[SceneObject]) -> Result<TaskAnnotation, SceneError> {
    let ranks = objects
        .iter()
        .map(|o| super::rank_lookup(table, &task, o.category_id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TaskAnnotation {
        task,
        annotation: RankAnnotation::from_ranks(ranks),
    })
}

/// Generates one scene as a pure function of `(seed, table, cfg)`.
pub fn generate_scene(seed: u64, table: &RankTable, cfg: &SceneConfig) -> Result<SceneSample, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = table.vocabulary();
    let n_cat = table.n_categories();

    // Categories first: every context of the primary affordance must see at
    // least two distinct relevant levels.
    let mut chosen = None;
    for _ in 0..cfg.max_tries {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let a = rng.random_range(0..table.n_affordances());
        let relevant = table.relevant_categories(a);
        let others: Vec<usize> = (0..n_cat).filter(|k| !relevant.contains(k)).collect();
        let cats: Vec<usize> = (0..n)
            .map(|_| {
                if others.is_empty() || rng.random_bool(cfg.relevant_fraction) {
                    relevant[rng.random_range(0..relevant.len())]
                } else {
                    others[rng.random_range(0..others.len())]
                }
            })
            .collect();
        let placeholder: Vec<SceneObject> = cats
            .iter()
            .map(|&k| SceneObject {
                bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
                category_id: k,
            })
            .collect();
        let ok = (0..table.n_contexts(a)).all(|c| {
            annotate(table, TaskSpec::new(&vocab, a, c), &placeholder)
                .map(|t| t.annotation.relevant_levels() >= 2)
                .unwrap_or(false)
        });
        if ok {
            chosen = Some((a, cats));
            break;
        }
    }
    let (primary, cats) = chosen.ok_or(SceneError::Placement {
        constraint: "two distinct relevant rank levels",
        tries: cfg.max_tries,
    })?;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(cats.len());
    for &category_id in &cats {
        let mut placed = false;
        for _ in 0..cfg.max_tries {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let far = objects
                .iter()
                .all(|o| ((o.bbox.cx - cx).powi(2) + (o.bbox.cy - cy).powi(2)).sqrt() >= cfg.min_sep);
            if far {
                objects.push(SceneObject {
                    bbox: BBox::new(cx, cy, w, h),
                    category_id,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Placement {
                constraint: "min_sep",
                tries: cfg.max_tries,
            });
        }
    }

    let mut order: Vec<(usize, usize)> = (0..table.n_contexts(primary)).map(|c| (primary, c)).collect();
    for a in (0..table.n_affordances()).filter(|&a| a != primary) {
        order.extend((0..table.n_contexts(a)).map(|c| (a, c)));
    }
    let mut tasks = Vec::new();
    for (a, c) in order {
        if tasks.len() == cfg.tasks_per_scene {
            break;
        }
        let t = annotate(table, TaskSpec::new(&vocab, a, c), &objects)?;
        if t.annotation.relevant_levels() >= 2 {
            tasks.push(t);
        }
    }

    Ok(SceneSample {
        scene_id: format!("s{seed:016x}"),
        seed,
        objects,
        tasks,
    })
}

/// `n` scenes whose seeds are drawn from a stream keyed by `seed`.
pub fn generate_dataset(seed: u64, n: usize, table: &RankTable, cfg: &SceneConfig) -> Result<Vec<SceneSample>, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_scene(rng.next_u64(), table, cfg)).collect()
}
