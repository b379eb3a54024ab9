//! Task relation mining: modality enhancement, bidirectional image/text
//! fusion, task-guided query selection and the multimodal group decoder.

use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ModelError};
use crate::nn::{self, attention, attention_full, attention_with_pos};
use crate::numerics::{topk_indices, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Image and text features after enhancement.
pub struct Enhanced {
    pub image: Var,
    pub affordance: Var,
    pub context: Var,
    pub attention: Vec<Var>,
}

pub struct FusedFeatures {
    pub i: Var,
    pub t_a: Var,
    pub t_c: Var,
    /// Image-to-text weights, `(H·W) × (n_a + n_c)`.
    pub image_attention: Var,
    /// Text-to-image weights, `(n_a + n_c) × (H·W)`.
    pub text_attention: Var,
}

pub struct QuerySet {
    pub o: Var,
    pub g: Var,
    pub o_idx: Vec<usize>,
    pub g_idx: Vec<usize>,
    pub scores_a: Vec<f64>,
    pub scores_c: Vec<f64>,
}

pub struct Decoded {
    pub o: Var,
    pub g: Var,
    pub attention: Vec<Var>,
}

/// Maps backbone features to the shared width.
pub fn project_inputs(tape: &mut Tape, p: &Bound, fi: Var, fa: Var, fc: Var) -> Result<(Var, Var, Var), ModelError> {
    let i = nn::linear(tape, p, "trm.proj_img", fi)?;
    let a = nn::linear(tape, p, "trm.proj_txt", fa)?;
    let c = nn::linear(tape, p, "trm.proj_txt", fc)?;
    Ok((i, a, c))
}

/// One self-attention layer with a residual per modality. The two text
/// sequences share weights but attend only within themselves.
/// Additive attention bias keeping each row within Chebyshev distance
/// `radius` of its own grid cell.
pub fn neighborhood_bias(rows: &[usize], h: usize, w: usize, radius: usize) -> Tensor {
    let mut t = Tensor::full(&[rows.len(), h * w], -1e9);
    for (r, &cell) in rows.iter().enumerate() {
        let (y0, x0) = ((cell / w) as isize, (cell % w) as isize);
        for y in (y0 - radius as isize).max(0)..=(y0 + radius as isize).min(h as isize - 1) {
            for x in (x0 - radius as isize).max(0)..=(x0 + radius as isize).min(w as isize - 1) {
                t.data_mut()[r * h * w + y as usize * w + x as usize] = 0.0;
            }
        }
    }
    t
}

pub fn enhance(tape: &mut Tape, p: &Bound, fi: Var, pos: Option<Var>, bias: Option<Var>, fa: Var, fc: Var, heads: usize) -> Result<Enhanced, ModelError> {
    let d = tape.value(fi).cols();
    for (name, v) in [("affordance", fa), ("context", fc)] {
        let w = tape.value(v).cols();
        if w != d {
            return Err(ModelError::InvalidArgument(format!("{name} features have width {w}, image features {d}")));
        }
    }
    let mut weights = Vec::new();
    let mut block = |tape: &mut Tape, prefix: &str, x: Var, pos: Option<Var>, bias: Option<Var>| -> Result<Var, ModelError> {
        let a = attention_full(tape, p, prefix, x, pos, x, pos, bias, heads)?;
        weights.extend(a.weights);
        Ok(tape.add(x, a.out)?)
    };
    let image = block(tape, "trm.sa_img", fi, pos, bias)?;
    let affordance = block(tape, "trm.sa_txt", fa, None, None)?;
    let context = block(tape, "trm.sa_txt", fc, None, None)?;
    Ok(Enhanced {
        image,
        affordance,
        context,
        attention: weights,
    })
}

/// Cross-attention in both directions. The query projections of each side
/// also serve as the keys of the other side.
pub fn bidirectional_fuse(tape: &mut Tape, p: &Bound, fi: Var, fa: Var, fc: Var) -> Result<FusedFeatures, ModelError> {
    let n_a = tape.value(fa).rows();
    let n_c = tape.value(fc).rows();
    let ft = tape.concat_rows(&[fa, fc])?;
    let iq = tape.matmul(fi, p.var("trm.w1")?)?;
    let iv = tape.matmul(fi, p.var("trm.w2")?)?;
    let tq = tape.matmul(ft, p.var("trm.w3")?)?;
    let tv = tape.matmul(ft, p.var("trm.w4")?)?;

    let (i_att, image_attention) = tape.attention_with_weights(iq, tq, tv)?;
    let i = tape.add(i_att, fi)?;
    let (t_att, text_attention) = tape.attention_with_weights(tq, iq, iv)?;
    let t = tape.add(t_att, ft)?;
    let t_a = tape.slice_rows(t, 0, n_a)?;
    let t_c = tape.slice_rows(t, n_a, n_c)?;
    Ok(FusedFeatures {
        i,
        t_a,
        t_c,
        image_attention,
        text_attention,
    })
}

/// `Max(I·T_aᵀ)` on the tape, one row per grid cell. Its values order the
/// cells exactly as query selection does.
pub fn affordance_affinity(tape: &mut Tape, fused: &FusedFeatures) -> Result<Var, ModelError> {
    let s = tape.matmul_t(fused.i, fused.t_a)?;
    Ok(tape.rowmax(s)?)
}

/// Row-wise maximum of `x·yᵀ`.
fn max_affinity(x: &Tensor, y: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|r| {
            (0..y.rows())
                .map(|t| x.row(r).iter().zip(y.row(t)).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Picks object queries by affordance affinity and group tokens by context
/// affinity. The chosen indices are constants of the pass.
pub fn select_queries_and_groups(tape: &mut Tape, fused: &FusedFeatures, k_o: usize, k_g: usize) -> Result<QuerySet, ModelError> {
    let i = tape.value(fused.i);
    let n = i.rows();
    if k_o > n || k_g > n {
        return Err(ModelError::InvalidArgument(format!("cannot select {k_o} queries and {k_g} groups from {n} tokens")));
    }
    let scores_a = max_affinity(i, tape.value(fused.t_a));
    let scores_c = max_affinity(i, tape.value(fused.t_c));
    let o_idx = topk_indices(&scores_a, k_o)?;
    let g_idx = topk_indices(&scores_c, k_g)?;
    let (o, g) = gather_queries(tape, fused.i, &o_idx, &g_idx)?;
    Ok(QuerySet {
        o,
        g,
        o_idx,
        g_idx,
        scores_a,
        scores_c,
    })
}

/// Gathers query and group rows at fixed indices.
pub fn gather_queries(tape: &mut Tape, i: Var, o_idx: &[usize], g_idx: &[usize]) -> Result<(Var, Var), ModelError> {
    Ok((tape.gather_rows(i, o_idx)?, tape.gather_rows(i, g_idx)?))
}

/// Decoder blocks over `[O; G]`. Object queries additionally attend to the
/// affordance tokens; group tokens skip that stage.
pub fn group_decode(
    tape: &mut Tape,
    p: &Bound,
    o: Var,
    g: Var,
    t_a: Var,
    i: Var,
    pos: Option<(Var, Var)>,
    bias: Option<Var>,
    n_blocks: usize,
    heads: usize,
) -> Result<Decoded, ModelError> {
    if n_blocks == 0 {
        return Err(ModelError::InvalidConfig("at least one decoder block is required".into()));
    }
    let k_o = tape.value(o).rows();
    let k_g = tape.value(g).rows();
    let mut weights = Vec::new();
    let mut x = tape.concat_rows(&[o, g])?;
    for b in 0..n_blocks {
        let pre = format!("trm.dec{b}");
        let h = nn::layer_norm(tape, p, &format!("{pre}.ln1"), x)?;
        let xp = pos.map(|p| p.0);
        let sa = attention_with_pos(tape, p, &format!("{pre}.self"), h, xp, h, xp, heads)?;
        weights.extend(sa.weights);
        x = tape.add(x, sa.out)?;

        let ob = tape.slice_rows(x, 0, k_o)?;
        let gb = tape.slice_rows(x, k_o, k_g)?;
        let h = nn::layer_norm(tape, p, &format!("{pre}.ln2"), ob)?;
        let ca = attention(tape, p, &format!("{pre}.cross_txt"), h, t_a, heads)?;
        weights.extend(ca.weights);
        let ob = tape.add(ob, ca.out)?;

        x = tape.concat_rows(&[ob, gb])?;
        let h = nn::layer_norm(tape, p, &format!("{pre}.ln3"), x)?;
        let ci = attention_full(tape, p, &format!("{pre}.cross_img"), h, xp, i, pos.map(|p| p.1), bias, heads)?;
        weights.extend(ci.weights);
        x = tape.add(x, ci.out)?;

        let h = nn::layer_norm(tape, p, &format!("{pre}.ln4"), x)?;
        let f = nn::ffn(tape, p, &format!("{pre}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    let x = nn::layer_norm(tape, p, "trm.dec_out", x)?;
    Ok(Decoded {
        o: tape.slice_rows(x, 0, k_o)?,
        g: tape.slice_rows(x, k_o, k_g)?,
        attention: weights,
    })
}

/// Initial scale of the decoder's attention output projections.
const DECODER_BRANCH_SCALE: f64 = 0.1;

pub(crate) fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let d = cfg.d;
    for name in ["trm.proj_img", "trm.proj_txt"] {
        store.insert(format!("{name}.w"), Tensor::identity(d));
        store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    }
    nn::register_attention(store, rng, "trm.sa_img", d);
    nn::register_attention(store, rng, "trm.sa_txt", d);
    for w in ["trm.w1", "trm.w2", "trm.w3", "trm.w4"] {
        store.insert(w, crate::params::xavier(rng, d, d));
    }
    for b in 0..cfg.n_blocks {
        let pre = format!("trm.dec{b}");
        for a in ["self", "cross_txt", "cross_img"] {
            nn::register_attention(store, rng, &format!("{pre}.{a}"), d);
            let wo = store.get_mut(&format!("{pre}.{a}.wo")).expect("just registered");
            wo.data_mut().iter_mut().for_each(|v| *v *= DECODER_BRANCH_SCALE);
        }
        for l in ["ln1", "ln2", "ln3", "ln4"] {
            nn::register_layer_norm(store, &format!("{pre}.{l}"), d);
        }
        nn::register_ffn(store, rng, &format!("{pre}.ffn"), d, cfg.ffn_hidden);
    }
    nn::register_layer_norm(store, "trm.dec_out", d);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::params::normal;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            grid_h: 4,
            grid_w: 4,
            k_o: 6,
            k_g: 3,
            n_blocks: 2,
            heads: 2,
            ffn_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        register(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), cfg);
        s
    }

    fn rand(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        normal(rng, &[r, c], 0.0, 1.0)
    }

    fn zero_matching(store: &mut ParamStore, needle: &str) {
        let names: Vec<String> = store.names().iter().filter(|n| n.contains(needle)).cloned().collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.insert(n, Tensor::zeros(&shape));
        }
    }

    #[test]
    fn enhance_with_zero_attention_is_identity() {
        let cfg = small_cfg();
        let mut st = store(&cfg, 1);
        zero_matching(&mut st, "trm.sa_");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let fi = tape.constant(rand(&mut rng, 16, 8));
        let fa = tape.constant(rand(&mut rng, 2, 8));
        let fc = tape.constant(rand(&mut rng, 3, 8));
        let e = enhance(&mut tape, &p, fi, None, None, fa, fc, cfg.heads).unwrap();
        assert_eq!(tape.value(e.image), tape.value(fi));
        assert_eq!(tape.value(e.affordance), tape.value(fa));
        assert_eq!(tape.value(e.context), tape.value(fc));
    }

    #[test]
    fn enhance_single_token_copies_value() {
        let cfg = small_cfg();
        let st = store(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let fi = tape.constant(rand(&mut rng, 16, 8));
        let x = rand(&mut rng, 1, 8);
        let fa = tape.constant(x.clone());
        let e = enhance(&mut tape, &p, fi, None, None, fa, fa, cfg.heads).unwrap();
        let wv = st.get("trm.sa_txt.wv").unwrap();
        let wo = st.get("trm.sa_txt.wo").unwrap();
        let mut expect = x.data().to_vec();
        for (c, e) in expect.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..8 {
                let v: f64 = (0..8).map(|k| x.data()[k] * wv.at(k, m)).sum();
                acc += v * wo.at(m, c);
            }
            *e += acc;
        }
        for (a, b) in tape.value(e.affordance).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = tape.constant(rand(&mut rng, 1, 4));
        assert!(enhance(&mut tape, &p, fi, None, None, bad, fa, cfg.heads).is_err());
    }

    #[test]
    fn fuse_single_key_case() {
        let cfg = small_cfg();
        let st = store(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let fi = tape.constant(rand(&mut rng, 1, 8));
        let fa = tape.constant(rand(&mut rng, 1, 8));
        let fc = tape.constant(rand(&mut rng, 1, 8));
        let f = bidirectional_fuse(&mut tape, &p, fi, fa, fc).unwrap();
        // Two text keys for the single image token; one image key per text token.
        let w4 = st.get("trm.w4").unwrap();
        let w2 = st.get("trm.w2").unwrap();
        let img = tape.value(fi).row(0).to_vec();
        let proj = |x: &[f64], w: &Tensor| (0..8).map(|c| (0..8).map(|k| x[k] * w.at(k, c)).sum::<f64>()).collect::<Vec<_>>();
        let iv = proj(&img, w2);
        for (t, src) in [(f.t_a, fa), (f.t_c, fc)] {
            let row = tape.value(src).row(0).to_vec();
            for c in 0..8 {
                assert!((tape.value(t).at(0, c) - (iv[c] + row[c])).abs() < 1e-12);
            }
        }
        let att = tape.value(f.image_attention);
        let tva = proj(tape.value(fa).row(0), w4);
        let tvc = proj(tape.value(fc).row(0), w4);
        for c in 0..8 {
            let expect = att.at(0, 0) * tva[c] + att.at(0, 1) * tvc[c] + img[c];
            assert!((tape.value(f.i).at(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let mut i = rand(&mut rng, 16, 8);
        let ta = rand(&mut rng, 1, 8);
        for c in 0..8 {
            i.data_mut()[5 * 8 + c] = 10.0 * ta.data()[c];
        }
        let fused = FusedFeatures {
            i: tape.constant(i),
            t_a: tape.constant(ta.clone()),
            t_c: tape.constant(ta),
            image_attention: tape.constant(Tensor::zeros(&[1, 1])),
            text_attention: tape.constant(Tensor::zeros(&[1, 1])),
        };
        let q = select_queries_and_groups(&mut tape, &fused, 16, 4).unwrap();
        assert_eq!(q.o_idx[0], 5);
        let mut sorted = q.scores_a.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let picked: Vec<f64> = q.o_idx.iter().map(|&j| q.scores_a[j]).collect();
        assert_eq!(picked, sorted);
        assert_eq!(&q.o_idx[..4], &q.g_idx[..]);
        assert!(select_queries_and_groups(&mut tape, &fused, 17, 4).is_err());
    }

    #[test]
    fn zero_value_decoder_reduces_to_residual_streams() {
        let cfg = small_cfg();
        let mut st = store(&cfg, 7);
        for a in ["self", "cross_txt", "cross_img"] {
            zero_matching(&mut st, &format!("dec0.{a}.wv"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let o = tape.constant(rand(&mut rng, 6, 8));
        let g = tape.constant(rand(&mut rng, 3, 8));
        let ta = tape.constant(rand(&mut rng, 2, 8));
        let i = tape.constant(rand(&mut rng, 16, 8));
        let out = group_decode(&mut tape, &p, o, g, ta, i, None, None, 1, cfg.heads).unwrap();

        let mut t2 = Tape::new();
        let p2 = st.bind_frozen(&mut t2);
        let (o2, g2) = (t2.constant(tape.value(o).clone()), t2.constant(tape.value(g).clone()));
        let x = t2.concat_rows(&[o2, g2]).unwrap();
        let h = nn::layer_norm(&mut t2, &p2, "trm.dec0.ln4", x).unwrap();
        let f = nn::ffn(&mut t2, &p2, "trm.dec0.ffn", h).unwrap();
        let r = t2.add(x, f).unwrap();
        let y = nn::layer_norm(&mut t2, &p2, "trm.dec_out", r).unwrap();
        let full = t2.value(y);
        for r in 0..9 {
            let got = if r < 6 { tape.value(out.o).row(r) } else { tape.value(out.g).row(r - 6) };
            for (a, b) in got.iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let st = store(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let fi = tape.constant(rand(&mut rng, 16, 8));
        let fa = tape.constant(rand(&mut rng, 2, 8));
        let fc = tape.constant(rand(&mut rng, 3, 8));
        let e = enhance(&mut tape, &p, fi, None, None, fa, fc, cfg.heads).unwrap();
        let f = bidirectional_fuse(&mut tape, &p, e.image, e.affordance, e.context).unwrap();
        let q = select_queries_and_groups(&mut tape, &f, 6, 3).unwrap();
        let dcd = group_decode(&mut tape, &p, q.o, q.g, f.t_a, f.i, None, None, cfg.n_blocks, cfg.heads).unwrap();
        let all: Vec<Var> = e.attention.iter().chain(&dcd.attention).copied().chain([f.image_attention, f.text_attention]).collect();
        for w in all {
            let t = tape.value(w);
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(tape.value(dcd.o).shape(), &[6, 8]);
        assert_eq!(tape.value(dcd.g).shape(), &[3, 8]);
    }

    #[test]
    fn neighborhood_bias_opens_a_clipped_window() {
        let b = neighborhood_bias(&[0, 5, 15], 4, 4, 1);
        assert_eq!(b.shape(), &[3, 16]);
        let open: Vec<usize> = b.data().chunks(16).map(|r| r.iter().filter(|&&v| v == 0.0).count()).collect();
        assert_eq!(open, vec![4, 9, 4]);
        assert_eq!(b.row(1)[10], 0.0);
        assert_eq!(b.row(1)[11], -1e9);
        assert!(neighborhood_bias(&[6], 4, 4, 3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affinity_orders_cells_like_selection() {
        let cfg = small_cfg();
        let st = store(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new();
        let p = st.bind_frozen(&mut tape);
        let fi = tape.constant(rand(&mut rng, 16, 8));
        let fa = tape.constant(rand(&mut rng, 2, 8));
        let fc = tape.constant(rand(&mut rng, 2, 8));
        let f = bidirectional_fuse(&mut tape, &p, fi, fa, fc).unwrap();
        let aff = affordance_affinity(&mut tape, &f).unwrap();
        let q = select_queries_and_groups(&mut tape, &f, 5, 2).unwrap();
        let a = tape.value(aff).data().to_vec();
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&x, &y| a[y].total_cmp(&a[x]));
        let mut picked = q.o_idx.clone();
        picked.sort_unstable();
        let mut top = order[..5].to_vec();
        top.sort_unstable();
        assert_eq!(picked, top);
    }

    #[test]
    fn masked_positional_attention_gradient_check() {
        let cfg = small_cfg();
        let st = store(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inputs = vec![rand(&mut rng, 16, 8), rand(&mut rng, 2, 8), rand(&mut rng, 1, 8)];
        let weight = rand(&mut rng, 9, 8);
        let pos = crate::encoders::positional_encoding_2d(4, 4, 8).unwrap();
        let (o_idx, g_idx) = (vec![0usize, 3, 5, 9, 10, 15], vec![2usize, 12, 7]);
        let rows: Vec<usize> = o_idx.iter().chain(&g_idx).copied().collect();
        let n_inputs = inputs.len();
        let mut point = inputs.clone();
        point.extend(st.tensors().iter().cloned());
        let report = grad_check(
            |tape: &mut Tape, vs: &[Var]| -> Result<Var, ModelError> {
                let p = st.bind_vars(&vs[n_inputs..])?;
                let pv = tape.constant(pos.clone());
                let all: Vec<usize> = (0..16).collect();
                let ib = tape.constant(neighborhood_bias(&all, 4, 4, 1));
                let e = enhance(tape, &p, vs[0], Some(pv), Some(ib), vs[1], vs[2], cfg.heads)?;
                let f = bidirectional_fuse(tape, &p, e.image, e.affordance, e.context)?;
                let (o, g) = gather_queries(tape, f.i, &o_idx, &g_idx)?;
                let qp = tape.gather_rows(pv, &rows)?;
                let db = tape.constant(neighborhood_bias(&rows, 4, 4, 1));
                let d = group_decode(tape, &p, o, g, f.t_a, f.i, Some((qp, pv)), Some(db), cfg.n_blocks, cfg.heads)?;
                let x = tape.concat_rows(&[d.o, d.g])?;
                let w = tape.constant(weight.clone());
                let y = tape.mul(x, w)?;
                Ok(tape.sum(y))
            },
            &point,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fuse_decode_gradient_check() {
        let cfg = small_cfg();
        let st = store(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![rand(&mut rng, 16, 8), rand(&mut rng, 2, 8), rand(&mut rng, 1, 8)];
        let weight = rand(&mut rng, 9, 8);
        let n_inputs = inputs.len();
        let mut point = inputs.clone();
        point.extend(st.tensors().iter().cloned());

        // Fix the selection at the base point.
        let (o_idx, g_idx) = {
            let mut tape = Tape::new();
            let p = st.bind_frozen(&mut tape);
            let vs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let e = enhance(&mut tape, &p, vs[0], None, None, vs[1], vs[2], cfg.heads).unwrap();
            let f = bidirectional_fuse(&mut tape, &p, e.image, e.affordance, e.context).unwrap();
            let q = select_queries_and_groups(&mut tape, &f, cfg.k_o, cfg.k_g).unwrap();
            (q.o_idx, q.g_idx)
        };
        let report = grad_check(
            |tape: &mut Tape, vs: &[Var]| -> Result<Var, ModelError> {
                let p = st.bind_vars(&vs[n_inputs..])?;
                let e = enhance(tape, &p, vs[0], None, None, vs[1], vs[2], cfg.heads)?;
                let f = bidirectional_fuse(tape, &p, e.image, e.affordance, e.context)?;
                let (o, g) = gather_queries(tape, f.i, &o_idx, &g_idx)?;
                let d = group_decode(tape, &p, o, g, f.t_a, f.i, None, None, cfg.n_blocks, cfg.heads)?;
                let x = tape.concat_rows(&[d.o, d.g])?;
                let w = tape.constant(weight.clone());
                let y = tape.mul(x, w)?;
                Ok(tape.sum(y))
            },
            &point,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn decode_is_equivariant_in_object_rows(seed in 0u64..1000) {
            let cfg = small_cfg();
            let st = store(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let o = rand(&mut rng, 6, 8);
            let g = rand(&mut rng, 3, 8);
            let ta = rand(&mut rng, 2, 8);
            let i = rand(&mut rng, 16, 8);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let o_perm = Tensor::from_rows(&perm.iter().map(|&r| o.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
            let run = |o: &Tensor| {
                let mut tape = Tape::new();
                let p = st.bind_frozen(&mut tape);
                let vs = [o, &g, &ta, &i].map(|t| tape.constant(t.clone()));
                let d = group_decode(&mut tape, &p, vs[0], vs[1], vs[2], vs[3], None, None, 2, cfg.heads).unwrap();
                (tape.value(d.o).clone(), tape.value(d.g).clone())
            };
            let (a_o, a_g) = run(&o);
            let (b_o, b_g) = run(&o_perm);
            for (k, &r) in perm.iter().enumerate() {
                for (x, y) in b_o.row(k).iter().zip(a_o.row(r)) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
            prop_assert!(a_g.max_abs_diff(&b_g) < 1e-10);
        }

        #[test]
        fn fuse_is_equivariant_in_image_rows(seed in 0u64..1000) {
            let cfg = small_cfg();
            let st = store(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let fi = rand(&mut rng, 16, 8);
            let fa = rand(&mut rng, 2, 8);
            let fc = rand(&mut rng, 2, 8);
            let perm: Vec<usize> = (0..16).map(|r| (r * 5 + 3) % 16).collect();
            let fi_perm = Tensor::from_rows(&perm.iter().map(|&r| fi.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
            let run = |fi: &Tensor| {
                let mut tape = Tape::new();
                let p = st.bind_frozen(&mut tape);
                let vs = [fi, &fa, &fc].map(|t| tape.constant(t.clone()));
                let f = bidirectional_fuse(&mut tape, &p, vs[0], vs[1], vs[2]).unwrap();
                (tape.value(f.i).clone(), tape.value(f.t_a).clone(), tape.value(f.t_c).clone())
            };
            let (i0, a0, c0) = run(&fi);
            let (i1, a1, c1) = run(&fi_perm);
            for (k, &r) in perm.iter().enumerate() {
                for (x, y) in i1.row(k).iter().zip(i0.row(r)) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
            prop_assert!(a0.max_abs_diff(&a1) < 1e-10);
            prop_assert!(c0.max_abs_diff(&c1) < 1e-10);
        }
    }
}
