mod common;

use common::*;
use proptest::prelude::*;

use pmt_core::bottom_up::{decompose_spatial, decompose_temporal, mca_head, residual_merge, transformer_block};
use pmt_core::config::{ModelConfig, Task, TopDown};
use pmt_core::decoders::Mode;
use pmt_core::params::Linear;
use pmt_core::top_down::{cmb, direct_attention, readout, upsample_add};
use pmt_core::{Example, Graph, Pmt};
use pmt_tensor::rng::{seeded, uniform};
use pmt_tensor::{ParamStore, Tape, Tensor};

fn grid_shape() -> impl Strategy<Value = ([usize; 4], usize, Vec<f64>)> {
    (prop::sample::select(vec![1usize, 2, 4]), 1usize..=8, 1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(
        |(r, t, h, w, d)| {
            // Round extents down to multiples of the window, at least one window.
            let fit = |n: usize| (n / r).max(1) * r;
            let shape = [fit(t), fit(h), fit(w), d];
            let n: usize = shape.iter().product();
            (Just(shape), Just(r), prop::collection::vec(-10.0f64..10.0, n))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decomposition_matches_nested_loops((shape, r, data) in grid_shape()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&shape, data.clone()).unwrap());
        let s = decompose_spatial(&mut tape, x, r).unwrap();
        let m = decompose_temporal(&mut tape, x, r).unwrap();
        prop_assert_eq!(tape.shape(s), &[shape[1] / r, shape[2] / r, shape[3]]);
        prop_assert_eq!(tape.shape(m), &[shape[0] / r, shape[3]]);
        prop_assert_eq!(tape.value(s).data(), &spatial_oracle(&data, shape, r)[..]);
        prop_assert_eq!(tape.value(m).data(), &temporal_oracle(&data, shape, r)[..]);
    }

    /// A coarse window equals a second pooling of the unit-window streams.
    #[test]
    fn decomposition_commutes_with_pooling((shape, r, data) in grid_shape()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&shape, data).unwrap());
        let s = decompose_spatial(&mut tape, x, r).unwrap();
        let s1 = decompose_spatial(&mut tape, x, 1).unwrap();
        let s1r = tape.max_pool_windows(s1, &[r, r, 1]).unwrap();
        prop_assert_eq!(tape.value(s).data(), tape.value(s1r).data());
        let m = decompose_temporal(&mut tape, x, r).unwrap();
        let m1 = decompose_temporal(&mut tape, x, 1).unwrap();
        let m1r = tape.max_pool_windows(m1, &[r, 1]).unwrap();
        prop_assert_eq!(tape.value(m).data(), tape.value(m1r).data());
    }

    #[test]
    fn residual_merge_adds_pooled_previous(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let mut tape = Tape::<f64>::new();
        let raw_t = uniform(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let prev_t = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
        let raw = tape.constant(raw_t.clone());
        let prev = tape.constant(prev_t.clone());
        let out = residual_merge(&mut tape, raw, prev, 2).unwrap();
        let p = prev_t.data();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            best = best.max(p[((2 * i + a) * 4 + 2 * j + b) * 3 + c]);
                        }
                    }
                    let k = (i * 2 + j) * 3 + c;
                    prop_assert_eq!(tape.value(out).data()[k], raw_t.data()[k] + best);
                }
            }
        }
    }
}

fn tiny_model(seed: u64) -> Pmt<f64> {
    Pmt::new(ModelConfig::tiny(Task::OpenEnded), seed).unwrap()
}

/// Reference attention head: queries from visual rows, keys and values
/// from language rows.
fn head_oracle(s_ln: &Mat, l_ln: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, div: f64) -> (Mat, Mat) {
    let q = matmul(s_ln, wq);
    let k = matmul(l_ln, wk);
    let v = matmul(l_ln, wv);
    let a = softmax_rows(&scale(&matmul(&q, &transpose(&k)), 1.0 / div));
    (matmul(&a, &v), a)
}

#[test]
fn attention_head_matches_oracle() {
    let model = tiny_model(3);
    let head = model.params.blocks[0].heads[1];
    let mut rng = seeded(9);
    let s = uniform::<f64>(&mut rng, &[6, 8], -2.0, 2.0);
    let l = uniform::<f64>(&mut rng, &[5, 8], -2.0, 2.0);
    let mut g = model.graph();
    let sv = g.tape.constant(s.clone());
    let lv = g.tape.constant(l.clone());
    let (out, attn) = mca_head(&mut g, sv, lv, &head, 2.5).unwrap();
    let st = &model.store;
    let (eo, ea) = head_oracle(&mat(&s), &mat(&l), &param(st, head.w_q), &param(st, head.w_k), &param(st, head.w_v), 2.5);
    assert_eq!(g.tape.shape(attn), &[6, 5]);
    assert!(max_abs_diff(&eo, g.tape.value(out).data()) < 1e-10);
    assert!(max_abs_diff(&ea, g.tape.value(attn).data()) < 1e-10);
}

#[test]
fn transformer_block_matches_oracle() {
    let model = tiny_model(4);
    let cfg = &model.cfg;
    let block = &model.params.blocks[1];
    let sp = block.temporal;
    let st = &model.store;
    let mut rng = seeded(10);
    let x = uniform::<f64>(&mut rng, &[2, 2, 8], -1.0, 1.0);
    let lang = uniform::<f64>(&mut rng, &[4, 8], -1.0, 1.0);
    let mut g = model.graph();
    let xv = g.tape.constant(x.clone());
    let lv = g.tape.constant(lang.clone());
    let out = transformer_block(&mut g, xv, lv, block, &sp, cfg.attention_divisor()).unwrap();
    assert_eq!(g.tape.shape(out), &[2, 2, 8]);

    let rows = mat(&x.clone().reshape(&[4, 8]).unwrap());
    let s_ln = layer_norm(&rows, &vector(st, sp.ln_attn.gain), &vector(st, sp.ln_attn.bias));
    let l_ln = layer_norm(&mat(&lang), &vector(st, block.ln_lang.gain), &vector(st, block.ln_lang.bias));
    let heads: Vec<Mat> = block
        .heads
        .iter()
        .map(|h| {
            head_oracle(&s_ln, &l_ln, &param(st, h.w_q), &param(st, h.w_k), &param(st, h.w_v), cfg.attention_divisor()).0
        })
        .collect();
    let attended = add(&matmul(&hcat(&heads), &param(st, sp.mixer)), &rows);
    let f_ln = layer_norm(&attended, &vector(st, sp.ln_ffn.gain), &vector(st, sp.ln_ffn.bias));
    let h = elu(&affine(&f_ln, &param(st, sp.ffn_in.w), &vector(st, sp.ffn_in.b)));
    let f = elu(&affine(&h, &param(st, sp.ffn_out.w), &vector(st, sp.ffn_out.b)));
    let expect = add(&f, &attended);
    assert!(max_abs_diff(&expect, g.tape.value(out).data()) < 1e-10);
}

#[test]
fn zeroed_mixer_and_ffn_make_block_identity() {
    let mut model = tiny_model(5);
    let block = model.params.blocks[0].clone();
    for sp in [block.spatial, block.temporal] {
        for id in [sp.mixer, sp.ffn_in.w, sp.ffn_in.b, sp.ffn_out.w, sp.ffn_out.b] {
            model.store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut rng = seeded(11);
    let x = uniform::<f64>(&mut rng, &[2, 2, 8], -3.0, 3.0);
    let lang = uniform::<f64>(&mut rng, &[3, 8], -1.0, 1.0);
    let mut g = model.graph();
    let xv = g.tape.constant(x.clone());
    let lv = g.tape.constant(lang);
    let s = transformer_block(&mut g, xv, lv, &block, &block.spatial, 2.0).unwrap();
    assert_eq!(g.tape.value(s), &x);
}

fn random_affine(store: &mut ParamStore<f64>, d: usize, seed: u64) -> Linear {
    let mut rng = seeded(seed);
    Linear {
        w: store.add("f.w", "t", uniform(&mut rng, &[d, d], -0.8, 0.8)),
        b: store.add("f.b", "t", uniform(&mut rng, &[d], -0.3, 0.3)),
    }
}

#[test]
fn cmb_matches_matrix_chain() {
    let mut store = ParamStore::new();
    let f = random_affine(&mut store, 4, 1);
    let mut rng = seeded(2);
    let t = uniform::<f64>(&mut rng, &[6, 4], -1.0, 1.0);
    let s = uniform::<f64>(&mut rng, &[3, 4], -1.0, 1.0);
    let o = uniform::<f64>(&mut rng, &[5, 4], -1.0, 1.0);
    let mut g = Graph::new(&store);
    let (tv, sv, ov) = (g.tape.constant(t.clone()), g.tape.constant(s.clone()), g.tape.constant(o.clone()));
    let c = cmb(&mut g, tv, sv, ov, &f).unwrap();

    let (w, b) = (param(&store, f.w), vector(&store, f.b));
    let fx = |x: &Mat| elu(&affine(x, &w, &b));
    let (t, s, o) = (mat(&t), mat(&s), mat(&o));
    let w1 = softmax_rows(&matmul(&fx(&o), &transpose(&fx(&s))));
    let bridge = matmul(&w1, &s);
    let w2 = softmax_rows(&matmul(&fx(&t), &transpose(&fx(&o))));
    let expect = add(&t, &matmul(&w2, &bridge));
    assert!(max_abs_diff(&w1, g.tape.value(c.w1).data()) < 1e-12);
    assert!(max_abs_diff(&w2, g.tape.value(c.w2).data()) < 1e-12);
    assert!(max_abs_diff(&expect, g.tape.value(c.out).data()) < 1e-12);
}

#[test]
fn direct_attention_matches_oracle() {
    let mut store = ParamStore::new();
    let f = random_affine(&mut store, 4, 3);
    let mut rng = seeded(4);
    let t = uniform::<f64>(&mut rng, &[4, 4], -1.0, 1.0);
    let s = uniform::<f64>(&mut rng, &[2, 4], -1.0, 1.0);
    let mut g = Graph::new(&store);
    let (tv, sv) = (g.tape.constant(t.clone()), g.tape.constant(s.clone()));
    let (out, _) = direct_attention(&mut g, tv, sv, &f).unwrap();
    let (w, b) = (param(&store, f.w), vector(&store, f.b));
    let fx = |x: &Mat| elu(&affine(x, &w, &b));
    let (t, s) = (mat(&t), mat(&s));
    let a = softmax_rows(&matmul(&fx(&t), &transpose(&fx(&s))));
    assert!(max_abs_diff(&add(&t, &matmul(&a, &s)), g.tape.value(out).data()) < 1e-12);
}

#[test]
fn upsample_add_repeats_coarse_cells() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let t = g.tape.constant(Tensor::zeros(&[4, 4, 1]));
    let a = g.tape.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = upsample_add(&mut g, t, a).unwrap();
    let v = g.tape.value(out).data();
    assert_eq!(&v[..4], &[1.0, 1.0, 2.0, 2.0]);
    assert_eq!(&v[8..12], &[3.0, 3.0, 4.0, 4.0]);
}

#[test]
fn readout_matches_oracle() {
    let mut store = ParamStore::new();
    let mix = store.add("mix", "t", Tensor::new(&[2], vec![0.3, -0.4]).unwrap());
    let mut rng = seeded(6);
    let s = uniform::<f64>(&mut rng, &[5, 4], -1.0, 1.0);
    let m = uniform::<f64>(&mut rng, &[3, 4], -1.0, 1.0);
    let gb = uniform::<f64>(&mut rng, &[1, 4], -1.0, 1.0);
    let mut g = Graph::new(&store);
    let (sv, mv, gv) = (g.tape.constant(s.clone()), g.tape.constant(m.clone()), g.tape.constant(gb.clone()));
    let r = readout(&mut g, sv, mv, gv, mix).unwrap();

    let (s, m, gb) = (mat(&s), mat(&m), mat(&gb));
    let eta = softmax_rows(&matmul(&gb, &transpose(&s)));
    let gamma = softmax_rows(&matmul(&gb, &transpose(&m)));
    let ab = softmax_rows(&vec![vec![0.3, -0.4]]);
    let expect = add(&scale(&matmul(&eta, &s), ab[0][0]), &scale(&matmul(&gamma, &m), ab[0][1]));
    assert!(max_abs_diff(&eta, g.tape.value(r.eta).data()) < 1e-12);
    assert!(max_abs_diff(&gamma, g.tape.value(r.gamma).data()) < 1e-12);
    assert!(max_abs_diff(&expect, g.tape.value(r.o).data()) < 1e-12);
}

fn stream_extents(cfg: &ModelConfig) -> Vec<(Vec<usize>, Vec<usize>)> {
    let model = Pmt::<f64>::new(cfg.clone(), 0).unwrap();
    let mut rng = seeded(1);
    let ex = Example {
        frames: uniform(&mut rng, &[cfg.frames, cfg.height, cfg.width, 3], 0.0, 1.0),
        questions: vec![vec![1, 2, 3]],
    };
    let mut g = model.graph();
    let fwd = model.forward(&mut g, &[ex.clone(), ex], Mode::Train).unwrap();
    fwd.pyramids[0]
        .levels
        .iter()
        .map(|l| (g.tape.shape(l.s_hat).to_vec(), g.tape.shape(l.m_hat).to_vec()))
        .collect()
}

#[test]
fn stream_extents_follow_closed_forms() {
    for topdown in [TopDown::Cmb, TopDown::Upsample, TopDown::Attention, TopDown::None] {
        let cfg = ModelConfig {
            frames: 8,
            height: 16,
            width: 16,
            d_model: 8,
            heads: 2,
            levels: 3,
            channels: [2, 2, 2],
            topdown,
            ..ModelConfig::default()
        };
        for (l, (s, m)) in stream_extents(&cfg).iter().enumerate() {
            let r = 1 << l;
            assert_eq!(s, &vec![4 / r, 4 / r, 8], "{topdown:?} level {}", l + 1);
            assert_eq!(m, &vec![8 / r, 8], "{topdown:?} level {}", l + 1);
        }
    }
}

#[test]
fn no_decomposition_keeps_full_resolution() {
    let cfg = ModelConfig {
        no_decomposition: true,
        levels: 2,
        ..ModelConfig::tiny(Task::Count)
    };
    for (s, m) in stream_extents(&cfg) {
        assert_eq!(s, vec![2, 2, 8]);
        assert_eq!(m, vec![4, 8]);
    }
}
