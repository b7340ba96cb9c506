//! Audio semantic attraction point: GRU over word embeddings, then
//! single-head attention whose values are patch center coordinates.
//!
//! The key/value table for word `i` is the `N²` grid patches plus one special
//! row for the patch grounded to that word. Words without grounding get a zero
//! embedding and center `(0, 0)` in that row.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Point, SceneBundle};
use crate::dynamics::{mlp_forward, MlpVars};
use crate::error::Result;

/// GRU cell weights; `w_*` act on the input, `u_*` on the previous state.
#[derive(Clone, Copy)]
pub struct GruVars<'t> {
    pub w_z: Var<'t>,
    pub u_z: Var<'t>,
    pub b_z: Var<'t>,
    pub w_r: Var<'t>,
    pub u_r: Var<'t>,
    pub b_r: Var<'t>,
    pub w_h: Var<'t>,
    pub u_h: Var<'t>,
    pub b_h: Var<'t>,
}

/// Optional residual MLP applied to the attention output.
#[derive(Clone, Copy)]
pub struct HeadVars<'t> {
    pub mlp: MlpVars<'t>,
}

#[derive(Clone, Copy)]
pub struct EncoderVars<'t> {
    pub w_in: Var<'t>,
    pub b_in: Var<'t>,
    pub gru: Option<GruVars<'t>>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub head: Option<HeadVars<'t>>,
}

/// Keys and values for one word: `N² + 1` embeddings and normalized centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTable {
    pub embeddings: Tensor,
    pub centers: Tensor,
}

impl PatchTable {
    pub fn rows(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Builds the patch table for word `word` (0-based).
pub fn build_patch_table(scene: &SceneBundle, word: usize) -> PatchTable {
    let d = scene.embed_dim;
    let rows = scene.patches.len() + 1;
    let mut emb = Vec::with_capacity(rows * d);
    let mut centers = Vec::with_capacity(rows * 2);
    for p in &scene.patches {
        emb.extend_from_slice(&p.embedding);
        let c = scene.normalize(p.center);
        centers.extend([c.x, c.y]);
    }
    match &scene.transcript[word].grounded_patch {
        Some(g) => {
            emb.extend_from_slice(&g.embedding);
            let c = scene.normalize(g.center);
            centers.extend([c.x, c.y]);
        }
        None => {
            emb.extend(std::iter::repeat(0.0).take(d));
            centers.extend([0.0, 0.0]);
        }
    }
    PatchTable {
        embeddings: Tensor::matrix(rows, d, emb).expect("patch table"),
        centers: Tensor::matrix(rows, 2, centers).expect("patch table"),
    }
}

fn gru_update<'t>(
    h_prev: Var<'t>,
    xz: Var<'t>,
    xr: Var<'t>,
    xh: Var<'t>,
    gru: &GruVars<'t>,
) -> Result<Var<'t>> {
    let z = xz.add(h_prev.matmul(gru.u_z)?)?.sigmoid();
    let r = xr.add(h_prev.matmul(gru.u_r)?)?.sigmoid();
    let cand = xh.add(r.mul(h_prev)?.matmul(gru.u_h)?)?.tanh();
    z.one_minus().mul(h_prev)?.add(z.mul(cand)?)
}

/// One GRU step on a projected word embedding `x` (`[1, h]`).
///
/// Returns `(h, e_w)`; the output equals the new hidden state.
pub fn gru_step<'t>(h_prev: Var<'t>, x: Var<'t>, gru: &GruVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let xz = x.matmul(gru.w_z)?.add(gru.b_z)?;
    let xr = x.matmul(gru.w_r)?.add(gru.b_r)?;
    let xh = x.matmul(gru.w_h)?.add(gru.b_h)?;
    let h = gru_update(h_prev, xz, xr, xh, gru)?;
    Ok((h, h))
}

/// Attention over one word's patch table; returns `s_sem` as a `[1, 2]` row.
pub fn semantic_attraction<'t>(
    e_w: Var<'t>,
    table: &PatchTable,
    enc: &EncoderVars<'t>,
) -> Result<Var<'t>> {
    let tape = e_w.tape();
    let k = enc.w_k.shape()[1] as f64;
    let keys = tape.constant(table.embeddings.clone()).matmul(enc.w_k)?;
    let q = e_w.matmul(enc.w_q)?;
    let weights = q.matmul(keys.transpose()?)?.scale(1.0 / k.sqrt()).softmax();
    let s = weights.matmul(tape.constant(table.centers.clone()))?;
    apply_head(s, enc)
}

fn apply_head<'t>(s: Var<'t>, enc: &EncoderVars<'t>) -> Result<Var<'t>> {
    match &enc.head {
        Some(head) => s.add(mlp_forward(s, &head.mlp)?),
        None => Ok(s),
    }
}

/// Encoder outputs for every word of a scene.
pub struct SceneEncoding<'t> {
    /// `[n, 2]` semantic attraction points (normalized).
    pub s_sem: Var<'t>,
    /// `[n, h]` word encodings.
    pub e_w: Var<'t>,
    /// `[n, N² + 1]` attention weights.
    pub attention: Var<'t>,
}

/// Runs the transcript branch and attention for all words of `scene`.
///
/// Equivalent to calling [`gru_step`] then [`semantic_attraction`] word by
/// word, with the input and key projections batched across words.
pub fn encode_scene<'t>(
    tape: &'t Tape,
    scene: &SceneBundle,
    enc: &EncoderVars<'t>,
) -> Result<SceneEncoding<'t>> {
    let n = scene.n_words();
    let d = scene.embed_dim;
    let h = enc.w_in.shape()[1];
    let k = enc.w_k.shape()[1] as f64;
    let g = scene.patches.len();

    let words: Vec<&[f64]> = scene.transcript.iter().map(|w| w.embedding.as_slice()).collect();
    let x = tape.constant(Tensor::from_rows(&words, d)?);
    let proj = x.matmul(enc.w_in)?.add(enc.b_in.repeat_rows(n)?)?;

    let e_w = match &enc.gru {
        Some(gru) => {
            let xz = proj.matmul(gru.w_z)?.add(gru.b_z.repeat_rows(n)?)?;
            let xr = proj.matmul(gru.w_r)?.add(gru.b_r.repeat_rows(n)?)?;
            let xh = proj.matmul(gru.w_h)?.add(gru.b_h.repeat_rows(n)?)?;
            let mut state = tape.constant(Tensor::zeros(&[1, h]));
            let mut outs = Vec::with_capacity(n);
            for i in 0..n {
                state = gru_update(
                    state,
                    xz.slice(0, i, i + 1)?,
                    xr.slice(0, i, i + 1)?,
                    xh.slice(0, i, i + 1)?,
                    gru,
                )?;
                outs.push(state);
            }
            Var::concat(&outs, 0)?
        }
        None => proj,
    };

    let grid_emb: Vec<&[f64]> = scene.patches.iter().map(|p| p.embedding.as_slice()).collect();
    let grid_keys = tape
        .constant(Tensor::from_rows(&grid_emb, d)?)
        .matmul(enc.w_k)?;
    let mut special = Vec::with_capacity(n * d);
    let mut special_centers = Vec::with_capacity(n * 2);
    for w in &scene.transcript {
        match &w.grounded_patch {
            Some(p) => {
                special.extend_from_slice(&p.embedding);
                let c = scene.normalize(p.center);
                special_centers.extend([c.x, c.y]);
            }
            None => {
                special.extend(std::iter::repeat(0.0).take(d));
                special_centers.extend([0.0, 0.0]);
            }
        }
    }
    let special_keys = tape
        .constant(Tensor::matrix(n, d, special)?)
        .matmul(enc.w_k)?;

    let q = e_w.matmul(enc.w_q)?;
    let grid_logits = q.matmul(grid_keys.transpose()?)?;
    let kw = enc.w_k.shape()[1];
    let special_logits = q
        .mul(special_keys)?
        .matmul(tape.constant(Tensor::filled(&[kw, 1], 1.0)))?;
    let attention = Var::concat(&[grid_logits, special_logits], 1)?
        .scale(1.0 / k.sqrt())
        .softmax();

    let centers: Vec<[f64; 2]> = scene
        .patches
        .iter()
        .map(|p| {
            let c = scene.normalize(p.center);
            [c.x, c.y]
        })
        .collect();
    let grid_centers = tape.constant(Tensor::from_rows(&centers, 2)?);
    let from_grid = attention.slice(1, 0, g)?.matmul(grid_centers)?;
    let special_w = attention
        .slice(1, g, g + 1)?
        .matmul(tape.constant(Tensor::filled(&[1, 2], 1.0)))?;
    let from_special = special_w.mul(tape.constant(Tensor::matrix(n, 2, special_centers)?))?;
    let s_sem = apply_head(from_grid.add(from_special)?, enc)?;
    Ok(SceneEncoding {
        s_sem,
        e_w,
        attention,
    })
}

/// Semantic attraction points of a scene as plain normalized points.
pub fn semantic_points(
    scene: &SceneBundle,
    params: &crate::model::ModelParams,
) -> Result<Vec<Point>> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false)?;
    let enc = encode_scene(&tape, scene, &vars.encoder)?;
    let v = enc.s_sem.value();
    Ok((0..scene.n_words())
        .map(|i| Point::new(v.at(i, 0), v.at(i, 1)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::model::{ModelConfig, ModelParams, Variant};
    use crate::synthetic::{generate, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_scene() -> SceneBundle {
        let cfg = SynthConfig {
            n_scenes: 1,
            words_per_scene: 5,
            subjects: 3,
            embed_dim: 6,
            seed: 4,
            ..Default::default()
        };
        generate(&cfg).unwrap().remove(0).bundle
    }

    fn small_params(variant: Variant, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 6,
            hidden: 5,
            key_dim: 4,
            mlp_width: 3,
            variant,
            ..Default::default()
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    #[test]
    fn zero_gru_is_fixed_point() {
        let tape = Tape::new();
        let z = |s: &[usize]| tape.constant(Tensor::zeros(s));
        let h = 4;
        let gru = GruVars {
            w_z: z(&[h, h]),
            u_z: z(&[h, h]),
            b_z: z(&[1, h]),
            w_r: z(&[h, h]),
            u_r: z(&[h, h]),
            b_r: z(&[1, h]),
            w_h: z(&[h, h]),
            u_h: z(&[h, h]),
            b_h: z(&[1, h]),
        };
        let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0, 0.5]));
        let (hn, e) = gru_step(z(&[1, h]), x, &gru).unwrap();
        assert_eq!(hn.value().data(), &[0.0; 4]);
        assert_eq!(e.value().data(), &[0.0; 4]);
        let gate = x.matmul(gru.w_z).unwrap().add(gru.b_z).unwrap().sigmoid();
        assert_eq!(gate.value().data(), &[0.5; 4]);
    }

    #[test]
    fn gru_output_stays_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 8;
        let mut rand_t = |s: &[usize], scale: f64| {
            let n = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
        };
        let weights: Vec<Tensor> = (0..9)
            .map(|k| if k % 3 == 2 { rand_t(&[1, h], 2.0) } else { rand_t(&[h, h], 2.0) })
            .collect();
        let inputs: Vec<Tensor> = (0..10_000).map(|_| rand_t(&[1, h], 5.0)).collect();
        let mut state = Tensor::zeros(&[1, h]);
        for x in inputs {
            let t = Tape::new();
            let rebind: Vec<Var<'_>> = weights.iter().map(|w| t.constant(w.clone())).collect();
            let g = GruVars {
                w_z: rebind[0],
                u_z: rebind[1],
                b_z: rebind[2],
                w_r: rebind[3],
                u_r: rebind[4],
                b_r: rebind[5],
                w_h: rebind[6],
                u_h: rebind[7],
                b_h: rebind[8],
            };
            let (hn, _) = gru_step(t.constant(state), t.constant(x), &g).unwrap();
            state = hn.value();
            assert!(state.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 4;
        let mut params: Vec<Tensor> = (0..9)
            .map(|k| {
                let s = if k % 3 == 2 { vec![1, h] } else { vec![h, h] };
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        params.push(Tensor::row((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        params.push(Tensor::row((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let err = grad_check_many(
            |v| {
                let gru = GruVars {
                    w_z: v[0],
                    u_z: v[1],
                    b_z: v[2],
                    w_r: v[3],
                    u_r: v[4],
                    b_r: v[5],
                    w_h: v[6],
                    u_h: v[7],
                    b_h: v[8],
                };
                let (h1, _) = gru_step(v[9], v[10], &gru)?;
                let (h2, _) = gru_step(h1, v[10], &gru)?;
                Ok(h2.sum())
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn patch_table_normalizes_and_falls_back() {
        let mut scene = crate::data::tests_support::minimal_bundle();
        let table = build_patch_table(&scene, 1);
        assert_eq!(table.rows(), 17);
        assert_eq!(table.centers.row_slice(16), &[0.5, 0.5]);
        let table0 = build_patch_table(&scene, 0);
        assert_eq!(table0.centers.row_slice(16), &[0.0, 0.0]);
        assert!(table0.embeddings.row_slice(16).iter().all(|v| *v == 0.0));
        scene.transcript[1].grounded_patch = None;
        assert_eq!(build_patch_table(&scene, 1), table0);
    }

    fn table_with(keys: Vec<Vec<f64>>, centers: Vec<[f64; 2]>) -> PatchTable {
        let d = keys[0].len();
        PatchTable {
            embeddings: Tensor::from_rows(&keys, d).unwrap(),
            centers: Tensor::from_rows(&centers, 2).unwrap(),
        }
    }

    fn attn_vars<'t>(tape: &'t Tape, wq: Tensor, wk: Tensor) -> EncoderVars<'t> {
        let dummy = tape.constant(Tensor::zeros(&[1, 1]));
        EncoderVars {
            w_in: dummy,
            b_in: dummy,
            gru: None,
            w_q: tape.constant(wq),
            w_k: tape.constant(wk),
            head: None,
        }
    }

    #[test]
    fn identical_keys_give_mean_center() {
        let tape = Tape::new();
        let centers = vec![[0.1, 0.2], [0.9, 0.3], [0.4, 0.8], [0.0, 0.0]];
        let table = table_with(vec![vec![1.0, -2.0]; 4], centers.clone());
        let enc = attn_vars(
            &tape,
            Tensor::matrix(3, 2, vec![0.3, 0.1, -0.5, 2.0, 1.0, 0.0]).unwrap(),
            Tensor::matrix(2, 2, vec![1.0, 0.5, 0.2, -0.3]).unwrap(),
        );
        let e_w = tape.constant(Tensor::row(vec![0.7, -0.2, 1.1]));
        let s = semantic_attraction(e_w, &table, &enc).unwrap().value();
        let mx = centers.iter().map(|c| c[0]).sum::<f64>() / 4.0;
        let my = centers.iter().map(|c| c[1]).sum::<f64>() / 4.0;
        assert!((s.data()[0] - mx).abs() < 1e-12 && (s.data()[1] - my).abs() < 1e-12);
    }

    #[test]
    fn dominant_key_selects_its_center() {
        // With identity projections and k = 1 the logits are q·key; key 2 wins by 20.
        let tape = Tape::new();
        let centers = vec![[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]];
        let table = table_with(vec![vec![0.0], vec![0.0], vec![20.0]], centers);
        let enc = attn_vars(&tape, Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let e_w = tape.constant(Tensor::row(vec![1.0]));
        let s = semantic_attraction(e_w, &table, &enc).unwrap().value();
        assert!((s.data()[0] - 0.4).abs() < 1e-6 && (s.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rt = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let table = PatchTable {
            embeddings: rt(5, 3),
            centers: rt(5, 2),
        };
        let e_w = rt(1, 4);
        let params = vec![rt(4, 2), rt(3, 2)];
        let err = grad_check_many(
            |v| {
                let tape = v[0].tape();
                let enc = EncoderVars {
                    w_in: v[0],
                    b_in: v[0],
                    gru: None,
                    w_q: v[0],
                    w_k: v[1],
                    head: None,
                };
                let s = semantic_attraction(tape.constant(e_w.clone()), &table, &enc)?;
                Ok(s.square().sum())
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batched_encoding_matches_word_by_word() {
        let scene = small_scene();
        let params = small_params(Variant::Full, 1);
        let tape = Tape::new();
        let vars = params.bind(&tape, false).unwrap();
        let batched = encode_scene(&tape, &scene, &vars.encoder).unwrap();
        let enc = &vars.encoder;
        let gru = enc.gru.as_ref().unwrap();
        let mut h = tape.constant(Tensor::zeros(&[1, 5]));
        for i in 0..scene.n_words() {
            let x = tape
                .constant(Tensor::row(scene.transcript[i].embedding.clone()))
                .matmul(enc.w_in)
                .unwrap()
                .add(enc.b_in)
                .unwrap();
            let (hn, e_w) = gru_step(h, x, gru).unwrap();
            h = hn;
            let s = semantic_attraction(e_w, &build_patch_table(&scene, i), enc)
                .unwrap()
                .value();
            let b = batched.s_sem.value();
            assert!((s.data()[0] - b.at(i, 0)).abs() < 1e-12);
            assert!((s.data()[1] - b.at(i, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_points_lie_in_center_hull_box() {
        let scene = small_scene();
        for seed in 0..5 {
            let params = small_params(Variant::Full, seed);
            for p in semantic_points(&scene, &params).unwrap() {
                assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            }
        }
    }

    #[test]
    fn permuting_grid_rows_leaves_output_unchanged() {
        let mut scene = small_scene();
        let params = small_params(Variant::Full, 3);
        let before = semantic_points(&scene, &params).unwrap();
        scene.patches.reverse();
        scene.patches.swap(0, 5);
        let after = semantic_points(&scene, &params).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(a.dist(*b) < 1e-12);
        }
    }

    #[test]
    fn encoding_is_causal() {
        let scene = small_scene();
        let params = small_params(Variant::Full, 7);
        let full = semantic_points(&scene, &params).unwrap();
        let mut changed = scene.clone();
        let last = changed.n_words() - 1;
        changed.transcript[last].embedding.iter_mut().for_each(|v| *v = -*v + 0.3);
        let perturbed = semantic_points(&changed, &params).unwrap();
        assert_eq!(full[..last], perturbed[..last]);
        assert_ne!(full[last], perturbed[last]);
    }
}
