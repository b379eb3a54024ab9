//! Synthetic stand-ins for the image and text backbones.
//!
//! The image grid is rendered from scene geometry: every object deposits its
//! category signature on the cells around it, weighted by a Gaussian kernel
//! whose bandwidth is half the larger box side. Task tokens are looked up in
//! one embedding table shared by affordance and context sequences.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal, Bound, ParamStore};
use crate::scene::{SceneSample, TaskSpec};

pub const SIGNATURES: &str = "enc.signatures";
pub const EMBEDDINGS: &str = "enc.tokens";

const NOISE_STREAM: u64 = 0x6e6f697365;

/// Sinusoidal `(h·w) × d` encoding. Channels `[0, d/2)` encode the row and
/// `[d/2, d)` the column, as interleaved sin/cos pairs of the normalized
/// cell-center coordinate. Frequencies grow geometrically from one cycle
/// per axis up to half the axis length.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Tensor, ModelError> {
    if d == 0 || d % 4 != 0 {
        return Err(ModelError::InvalidConfig(format!("positional encoding width {d} is not a positive multiple of 4")));
    }
    let half = d / 2;
    let n_freq = half / 2;
    let axis = |pos: usize, extent: usize, out: &mut [f64]| {
        let p = 2.0 * PI * (pos as f64 + 0.5) / extent as f64;
        let top = (extent as f64 / 2.0).max(1.0);
        for k in 0..n_freq {
            let f = if n_freq > 1 { top.powf(k as f64 / (n_freq - 1) as f64) } else { 1.0 };
            out[2 * k] = (p * f).sin();
            out[2 * k + 1] = (p * f).cos();
        }
    };
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            let (ry, cx) = row.split_at_mut(half);
            axis(r, h, ry);
            axis(c, w, cx);
        }
    }
    Ok(Tensor::new(vec![h * w, d], data)?)
}

/// Index of the grid cell containing `(x, y)`.
pub fn cell_at(x: f64, y: f64, h: usize, w: usize) -> usize {
    let r = ((y * h as f64) as usize).min(h - 1);
    let c = ((x * w as f64) as usize).min(w - 1);
    r * w + c
}

/// Center of grid cell `i` as `(x, y)` in unit coordinates.
pub fn cell_center(i: usize, h: usize, w: usize) -> (f64, f64) {
    let (r, c) = (i / w, i % w);
    ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)
}

/// `(h·w) × n_objects` matrix of Gaussian kernel weights.
pub fn object_kernels(scene: &SceneSample, h: usize, w: usize) -> Tensor {
    let n = scene.objects.len();
    let mut data = vec![0.0; h * w * n];
    for i in 0..h * w {
        let (x, y) = cell_center(i, h, w);
        for (j, o) in scene.objects.iter().enumerate() {
            let b = o.bbox;
            let sigma = 0.5 * b.w.max(b.h);
            let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            data[i * n + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::new(vec![h * w, n], data).expect("shape product")
}

/// Positional encoding plus the scene's fixed noise draw.
fn grid_offsets(scene: &SceneSample, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    let mut t = positional_encoding_2d(cfg.grid_h, cfg.grid_w, cfg.d)?;
    if cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(NOISE_STREAM);
        let dist = Normal::new(0.0, cfg.noise).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        for v in t.data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok(t)
}

/// Image feature grid `F_I`, `(H·W) × d`.
pub fn encode_scene(tape: &mut Tape, p: &Bound, scene: &SceneSample, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let cats: Vec<usize> = scene.objects.iter().map(|o| o.category_id).collect();
    let sig = tape.gather_rows(p.var(SIGNATURES)?, &cats)?;
    let k = tape.constant(object_kernels(scene, cfg.grid_h, cfg.grid_w));
    let deposit = tape.matmul(k, sig)?;
    let offsets = tape.constant(grid_offsets(scene, cfg)?);
    Ok(tape.add(deposit, offsets)?)
}

/// Token features `(F_a, F_c)` from the shared embedding table.
pub fn encode_task(tape: &mut Tape, p: &Bound, task: &TaskSpec) -> Result<(Var, Var), ModelError> {
    if task.affordance_tokens.is_empty() || task.context_tokens.is_empty() {
        return Err(ModelError::InvalidArgument("task token sequences must be non-empty".into()));
    }
    let table = p.var(EMBEDDINGS)?;
    let fa = tape.gather_rows(table, &task.affordance_tokens)?;
    let fc = tape.gather_rows(table, &task.context_tokens)?;
    Ok((fa, fc))
}

/// Signatures and embeddings share a common direction so that object cells
/// and task tokens start out aligned.
pub(crate) fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let common = normal(rng, &[cfg.d], 0.0, 1.0);
    let mut table = |rows: usize| {
        let mut t = normal(rng, &[rows, cfg.d], 0.0, cfg.init_spread);
        for r in 0..rows {
            for (v, c) in t.data_mut()[r * cfg.d..(r + 1) * cfg.d].iter_mut().zip(common.data()) {
                *v += c;
            }
        }
        t
    };
    let sig = table(cfg.n_categories);
    let emb = table(cfg.vocab_size);
    store.insert(SIGNATURES, sig);
    store.insert(EMBEDDINGS, emb);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BBox, SceneObject};

    #[test]
    fn cell_at_inverts_cell_center() {
        for i in 0..12 {
            let (x, y) = cell_center(i, 3, 4);
            assert_eq!(cell_at(x, y, 3, 4), i);
        }
        assert_eq!(cell_at(1.0, 1.0, 3, 4), 11);
        assert_eq!(cell_at(0.0, 0.0, 3, 4), 0);
    }

    fn scene(objects: Vec<(f64, f64, f64, f64, usize)>) -> SceneSample {
        SceneSample {
            scene_id: "t".into(),
            seed: 3,
            objects: objects
                .into_iter()
                .map(|(cx, cy, w, h, k)| SceneObject {
                    bbox: BBox::new(cx, cy, w, h),
                    category_id: k,
                })
                .collect(),
            tasks: Vec::new(),
        }
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            noise: 0.0,
            n_categories: 4,
            vocab_size: 6,
            ..ModelConfig::default()
        }
    }

    fn grid(s: &SceneSample, c: &ModelConfig, store: &ParamStore) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let v = encode_scene(&mut tape, &p, s, c).unwrap();
        tape.value(v).clone()
    }

    fn store(c: &ModelConfig) -> ParamStore {
        let mut s = ParamStore::new();
        register(&mut s, &mut ChaCha8Rng::seed_from_u64(0), c);
        s
    }

    #[test]
    fn pe_rejects_width_not_multiple_of_four() {
        assert!(positional_encoding_2d(4, 4, 6).is_err());
        assert!(positional_encoding_2d(4, 4, 0).is_err());
    }

    #[test]
    fn pe_single_cell_and_row_sharing() {
        let one = positional_encoding_2d(1, 1, 8).unwrap();
        assert_eq!(one.shape(), &[1, 8]);
        assert!(one.is_finite());
        let pe = positional_encoding_2d(5, 7, 16).unwrap();
        for c in 1..7 {
            assert_eq!(&pe.row(2 * 7 + c)[..8], &pe.row(2 * 7)[..8]);
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn pe_cells_are_distinct_up_to_64() {
        // Cells on different rows differ in the row half and cells on the same
        // row differ in the column half, so per-axis injectivity suffices.
        for d in [4, 8, 32] {
            for n in 1..=64 {
                let pe = positional_encoding_2d(n, 1, d).unwrap();
                for a in 0..n {
                    for b in a + 1..n {
                        let diff = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                        assert!(diff > 1e-6, "d={d} n={n} rows {a},{b}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_object_peaks_at_its_cell() {
        let s = scene(vec![(0.41, 0.77, 0.2, 0.1, 0)]);
        let k = object_kernels(&s, 16, 16);
        let best = (0..256).max_by(|&a, &b| k.at(a, 0).total_cmp(&k.at(b, 0))).unwrap();
        assert_eq!((best / 16, best % 16), ((0.77 * 16.0) as usize, (0.41 * 16.0) as usize));
    }

    #[test]
    fn mirrored_objects_give_mirrored_deposit() {
        let c = cfg();
        let st = store(&c);
        let s = scene(vec![(0.2, 0.4, 0.2, 0.2, 1), (0.8, 0.4, 0.2, 0.2, 1)]);
        let g = grid(&s, &c, &st);
        let pe = positional_encoding_2d(c.grid_h, c.grid_w, c.d).unwrap();
        let w = c.grid_w;
        for r in 0..c.grid_h {
            for col in 0..w {
                let a = r * w + col;
                let b = r * w + (w - 1 - col);
                for ch in 0..c.d {
                    let da = g.at(a, ch) - pe.at(a, ch);
                    let db = g.at(b, ch) - pe.at(b, ch);
                    assert!((da - db).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_injective_on_category_swap() {
        let c = ModelConfig { noise: 0.1, ..cfg() };
        let st = store(&c);
        let s = scene(vec![(0.2, 0.3, 0.2, 0.2, 1), (0.7, 0.6, 0.15, 0.2, 2)]);
        assert_eq!(grid(&s, &c, &st), grid(&s, &c, &st));
        let mut swapped = s.clone();
        swapped.objects[0].category_id = 2;
        swapped.objects[1].category_id = 1;
        assert!(grid(&s, &c, &st).max_abs_diff(&grid(&swapped, &c, &st)) > 1e-6);
    }

    #[test]
    fn task_lookup_shares_the_table() {
        let c = cfg();
        let st = store(&c);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let task = TaskSpec {
            affordance_id: 0,
            context_id: 0,
            affordance_tokens: vec![3],
            context_tokens: vec![3, 1],
        };
        let (fa, fc) = encode_task(&mut tape, &p, &task).unwrap();
        let table = st.get(EMBEDDINGS).unwrap();
        assert_eq!(tape.value(fa).row(0), table.row(3));
        assert_eq!(tape.value(fc).row(0), table.row(3));
        assert_eq!(tape.value(fc).row(1), table.row(1));

        let bad = TaskSpec {
            affordance_tokens: vec![c.vocab_size],
            ..task
        };
        assert!(encode_task(&mut tape, &p, &bad).is_err());
    }
}
