//! Line-delimited JSON dataset files.
//!
//! One scene per line:
//! `{"scene_id", "seed", "objects": [{"bbox": [cx,cy,w,h], "category"}],
//!   "tasks": [{"affordance", "context", "ranks", "relevant"}]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BBox, RankAnnotation, SceneError, SceneObject, SceneSample, TaskAnnotation, TaskSpec, Vocabulary, IRRELEVANT,
    MAX_LEVEL,
};

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    bbox: [f64; 4],
    category: usize,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    affordance: usize,
    context: usize,
    ranks: Vec<u8>,
    relevant: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    seed: u64,
    objects: Vec<ObjectRecord>,
    tasks: Vec<TaskRecord>,
}

impl From<&SceneSample> for SceneRecord {
    fn from(s: &SceneSample) -> Self {
        Self {
            scene_id: s.scene_id.clone(),
            seed: s.seed,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    bbox: o.bbox.to_array(),
                    category: o.category_id,
                })
                .collect(),
            tasks: s
                .tasks
                .iter()
                .map(|t| TaskRecord {
                    affordance: t.task.affordance_id,
                    context: t.task.context_id,
                    ranks: t.annotation.ranks.clone(),
                    relevant: t.annotation.relevant.clone(),
                })
                .collect(),
        }
    }
}

pub fn save_dataset(samples: &[SceneSample], mut w: impl Write) -> Result<(), SceneError> {
    for s in samples {
        let line = serde_json::to_string(&SceneRecord::from(s)).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, samples: &[SceneSample]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    save_dataset(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Checks the annotation invariants of one scene; `line` is used in errors.
pub fn validate_sample(s: &SceneSample, line: usize) -> Result<(), SceneError> {
    let invalid = |reason: String| SceneError::Invalid { line, reason };
    if s.objects.len() < 2 {
        return Err(invalid(format!("{} objects, at least 2 required", s.objects.len())));
    }
    for (i, o) in s.objects.iter().enumerate() {
        let b = o.bbox;
        let in_unit = [b.cx, b.cy, b.w, b.h].iter().all(|v| (0.0..=1.0).contains(v));
        if !(b.w > 0.0 && b.h > 0.0 && in_unit) {
            return Err(invalid(format!("object {i}: bbox {:?} outside the unit square", b.to_array())));
        }
    }
    for (ti, t) in s.tasks.iter().enumerate() {
        let a = &t.annotation;
        if a.ranks.len() != s.objects.len() || a.relevant.len() != s.objects.len() {
            return Err(invalid(format!("task {ti}: annotation does not cover every object")));
        }
        for (&r, &rel) in a.ranks.iter().zip(&a.relevant) {
            if r == 0 || r > IRRELEVANT {
                return Err(invalid(format!("task {ti}: rank {r} outside 1..=8")));
            }
            if rel != (r <= MAX_LEVEL) {
                return Err(invalid(format!("task {ti}: relevance flag disagrees with rank {r}")));
            }
        }
        if a.relevant_levels() < 2 {
            return Err(invalid(format!(
                "task {ti}: fewer than two distinct rank levels among relevant objects"
            )));
        }
    }
    Ok(())
}

fn from_record(r: SceneRecord, vocab: &Vocabulary, line: usize) -> Result<SceneSample, SceneError> {
    let objects = r
        .objects
        .into_iter()
        .map(|o| SceneObject {
            bbox: BBox::from_array(o.bbox),
            category_id: o.category,
        })
        .collect();
    let mut tasks = Vec::with_capacity(r.tasks.len());
    for t in r.tasks {
        if t.affordance >= vocab.n_affordances || t.context >= vocab.max_contexts {
            return Err(SceneError::Invalid {
                line,
                reason: format!("task ({}, {}) outside the vocabulary", t.affordance, t.context),
            });
        }
        tasks.push(TaskAnnotation {
            task: TaskSpec::new(vocab, t.affordance, t.context),
            annotation: RankAnnotation {
                ranks: t.ranks,
                relevant: t.relevant,
            },
        });
    }
    let s = SceneSample {
        scene_id: r.scene_id,
        seed: r.seed,
        objects,
        tasks,
    };
    validate_sample(&s, line)?;
    Ok(s)
}

/// Parses and validates a dataset; line numbers in errors start at 1.
pub fn parse_dataset(r: impl BufRead, vocab: &Vocabulary) -> Result<Vec<SceneSample>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(from_record(rec, vocab, i + 1)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<SceneSample>, SceneError> {
    parse_dataset(BufReader::new(File::open(path)?), vocab)
}
