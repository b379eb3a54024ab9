//! Seeded synthetic scenes with task-conditioned rank annotations.
//!
//! A scene is a handful of boxed objects drawn from a category vocabulary.
//! Each attached task (affordance, context) annotates every object with a
//! rank level: `1..=7` for task-relevant objects, smaller meaning higher
//! priority, and [`IRRELEVANT`] for everything else. Objects sharing a level
//! under a task form one functional group.

mod generate;
mod io;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{generate_dataset, generate_scene, SceneConfig};
pub use io::{load_dataset, parse_dataset, save_dataset, validate_sample, write_dataset};
pub use table::{build_rank_table, rank_lookup, RankTable};

/// Worst relevant rank level.
pub const MAX_LEVEL: u8 = 7;
/// Level assigned to task-irrelevant objects.
pub const IRRELEVANT: u8 = 8;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("placement failed after {tries} tries: constraint `{constraint}` could not be met")]
    Placement { constraint: &'static str, tries: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record ({reason})")]
    Invalid { line: usize, reason: String },
    #[error("unknown affordance {0}")]
    UnknownAffordance(usize),
    #[error("unknown context {context} for affordance {affordance}")]
    UnknownContext { affordance: usize, context: usize },
    #[error("rank table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids follow one word-slot per token: id 0 is reserved, affordance
/// verbs come next, then one id per (affordance, context) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_affordances: usize,
    pub max_contexts: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        1 + self.n_affordances + self.n_affordances * self.max_contexts
    }

    pub fn affordance_token(&self, affordance: usize) -> usize {
        1 + affordance
    }

    pub fn context_token(&self, affordance: usize, context: usize) -> usize {
        1 + self.n_affordances + affordance * self.max_contexts + context
    }
}

/// One task instance: an affordance verb qualified by a context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub affordance_id: usize,
    pub context_id: usize,
    pub affordance_tokens: Vec<usize>,
    pub context_tokens: Vec<usize>,
}

impl TaskSpec {
    pub fn new(vocab: &Vocabulary, affordance_id: usize, context_id: usize) -> Self {
        Self {
            affordance_id,
            context_id,
            affordance_tokens: vec![vocab.affordance_token(affordance_id)],
            context_tokens: vec![vocab.context_token(affordance_id, context_id)],
        }
    }
}

/// Axis-aligned box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn iou(self, other: BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub category_id: usize,
}

/// Per-object rank levels of one (scene, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAnnotation {
    pub ranks: Vec<u8>,
    pub relevant: Vec<bool>,
}

impl RankAnnotation {
    pub fn from_ranks(ranks: Vec<u8>) -> Self {
        let relevant = ranks.iter().map(|&r| r <= MAX_LEVEL).collect();
        Self { ranks, relevant }
    }

    /// Number of distinct levels among relevant objects.
    pub fn relevant_levels(&self) -> usize {
        let mut levels: Vec<u8> = self
            .ranks
            .iter()
            .zip(&self.relevant)
            .filter(|(_, &rel)| rel)
            .map(|(&r, _)| r)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAnnotation {
    pub task: TaskSpec,
    pub annotation: RankAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene_id: String,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub tasks: Vec<TaskAnnotation>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        assert!((b.iou(b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let b = BBox::new(0.8, 0.8, 0.1, 0.1);
        assert_eq!(a.iou(b), 0.0);
    }

    #[test]
    fn vocabulary_ids_are_distinct() {
        let v = Vocabulary {
            n_affordances: 3,
            max_contexts: 2,
        };
        let mut ids = vec![];
        for a in 0..3 {
            ids.push(v.affordance_token(a));
            for c in 0..2 {
                ids.push(v.context_token(a, c));
            }
        }
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 9);
        assert!(ids.iter().all(|&i| i > 0 && i < v.size()));
    }
}
