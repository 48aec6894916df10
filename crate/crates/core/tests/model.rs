mod common;

use common::*;
use cvtn_core::autodiff::Graph;
use cvtn_core::cte::{cross_time_block, fds, CteFrame};
use cvtn_core::cve::{multi_head_attention, tokenize, transformer_block, Pass, LAYER_NORM_EPS};
use cvtn_core::{Activation, CvtnModel, Error, Group, ModelConfig, Tensor};

fn small(lookback: usize, horizon: usize, c: usize) -> ModelConfig {
    ModelConfig {
        heads: 2,
        d_ff: 2 * lookback,
        ..ModelConfig::new(lookback, horizon, c)
    }
}

#[test]
fn tokenize_transposes_history() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec([1, 2, 3], vec![1., 2., 3., 4., 5., 6.]));
    let v = tokenize(&mut g, x).unwrap();
    assert_eq!(g.shape(v), &[1, 3, 2]);
    let vt = g.value(v);
    for c in 0..3 {
        for t in 0..2 {
            assert_eq!(vt.at3(0, c, t), g.value(x).at3(0, t, c));
        }
    }
    let back = tokenize(&mut g, v).unwrap();
    assert_eq!(g.value(back), g.value(x));

    let x = g.constant(Tensor::zeros([1, 96, 7]));
    let v = tokenize(&mut g, x).unwrap();
    assert_eq!(g.shape(v), &[1, 7, 96]);
}

#[test]
fn single_token_block_matches_closed_form() {
    let cfg = ModelConfig { dropout: 0.0, ..small(8, 4, 1) };
    let model = CvtnModel::new(cfg, 3).unwrap();
    let p = model.cve().params();
    let ids = model.cve().blocks()[0];
    let mut r = rng(5);
    let token = random(&[1, 1, 8], -1.5, 1.5, &mut r);

    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let v = g.constant(token.clone());
    let out = transformer_block(&mut g, &bound, &ids, v, 2, Activation::Gelu, &mut Pass::eval()).unwrap();

    // with one token every attention weight is 1, so attention is Out(Value(LN(v)))
    let t = token.data();
    let h = naive_layer_norm(t, 8, p.get(ids.norm_attn.gamma), p.get(ids.norm_attn.beta), LAYER_NORM_EPS);
    let vv = naive_linear(&h, 1, p.get(ids.value.weight), p.get(ids.value.bias));
    let a = naive_linear(&vv, 1, p.get(ids.out.weight), p.get(ids.out.bias));
    let mid: Vec<f64> = t.iter().zip(&a).map(|(x, y)| x + y).collect();
    let h2 = naive_layer_norm(&mid, 8, p.get(ids.norm_ffn.gamma), p.get(ids.norm_ffn.beta), LAYER_NORM_EPS);
    let f1: Vec<f64> = naive_linear(&h2, 1, p.get(ids.ffn_in.weight), p.get(ids.ffn_in.bias))
        .into_iter()
        .map(naive_gelu)
        .collect();
    let f2 = naive_linear(&f1, 1, p.get(ids.ffn_out.weight), p.get(ids.ffn_out.bias));
    let want: Vec<f64> = mid.iter().zip(&f2).map(|(x, y)| x + y).collect();
    let got = g.value(out).data();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn attention_matches_naive_reference_on_small_input() {
    let model = CvtnModel::new(small(8, 4, 4), 9).unwrap();
    let p = model.cve().params();
    let ids = model.cve().blocks()[1];
    let mut r = rng(10);
    let h = random(&[1, 4, 8], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let hv = g.constant(h.clone());
    let a = multi_head_attention(&mut g, &bound, &ids, hv, 2, &mut Pass::eval()).unwrap();
    let want = naive_attention(
        h.data(),
        4,
        8,
        2,
        (p.get(ids.query.weight), p.get(ids.query.bias)),
        (p.get(ids.key.weight), p.get(ids.key.bias)),
        (p.get(ids.value.weight), p.get(ids.value.bias)),
        (p.get(ids.out.weight), p.get(ids.out.bias)),
    );
    let got = g.value(a).data();
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn heads_must_divide_token_width() {
    let cfg = ModelConfig { heads: 5, ..ModelConfig::new(96, 96, 3) };
    assert!(matches!(CvtnModel::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn block_permutes_with_its_tokens() {
    let model = CvtnModel::new(small(8, 4, 5), 1).unwrap();
    let p = model.cve().params();
    let ids = model.cve().blocks()[0];
    let mut r = rng(2);
    let v = random(&[1, 5, 8], -2.0, 2.0, &mut r);
    let perm = [3, 0, 4, 1, 2];
    let pv = Tensor::from_fn([1, 5, 8], |i| v.data()[perm[i / 8] * 8 + i % 8]);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let (a, b) = (g.constant(v), g.constant(pv));
    let oa = transformer_block(&mut g, &bound, &ids, a, 2, Activation::Gelu, &mut Pass::eval()).unwrap();
    let ob = transformer_block(&mut g, &bound, &ids, b, 2, Activation::Gelu, &mut Pass::eval()).unwrap();
    let (oa, ob) = (g.value(oa).data(), g.value(ob).data());
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((ob[row * 8 + j] - oa[src * 8 + j]).abs() < 1e-9);
        }
    }
}

#[test]
fn cve_output_shape_follows_horizon() {
    let model = CvtnModel::new(ModelConfig::new(96, 192, 7), 0).unwrap();
    let x = Tensor::from_fn([96, 7], |i| ((i * 37) % 11) as f64 * 0.1);
    assert_eq!(model.predict_cve(&x).unwrap().shape(), &[192, 7]);
}

#[test]
fn trend_only_cve_reproduces_decoded_history() {
    let cfg = ModelConfig {
        cve_layers: 0,
        ..small(8, 8, 3)
    };
    let mut model = CvtnModel::new(cfg, 4).unwrap();
    let ids = model.cve().projection();
    let trend = model.cve().trend().unwrap();
    let p = model.group_mut(Group::Cve);
    *p.get_mut(ids.weight) = Tensor::zeros([8, 8]);
    *p.get_mut(ids.bias) = Tensor::zeros([8]);
    *p.get_mut(trend.weight) = Tensor::eye(8);
    *p.get_mut(trend.bias) = Tensor::zeros([8]);
    let mut r = rng(6);
    let x = random(&[8, 3], -3.0, 3.0, &mut r);
    let z = model.predict_cve(&x).unwrap();
    assert!(z.max_abs_diff(&x) < 1e-10);
}

#[test]
fn cve_parameter_count_ignores_variable_count() {
    let a = CvtnModel::new(ModelConfig::new(96, 96, 7), 0).unwrap();
    let b = CvtnModel::new(ModelConfig::new(96, 96, 321), 0).unwrap();
    // only the per-variable RevIN affine depends on C
    let strip = |m: &CvtnModel| m.cve().params().num_scalars() - 2 * m.config().n_vars;
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn cve_commutes_with_variable_permutation() {
    let cfg = ModelConfig { dropout: 0.0, ..small(16, 8, 6) };
    let model = CvtnModel::new(cfg, 12).unwrap();
    let mut r = rng(13);
    let x = random(&[16, 6], -2.0, 2.0, &mut r);
    let perm = [5, 2, 0, 4, 1, 3];
    let px = Tensor::from_fn([16, 6], |i| x.data()[(i / 6) * 6 + perm[i % 6]]);
    let (za, zb) = (model.predict_cve(&x).unwrap(), model.predict_cve(&px).unwrap());
    for t in 0..8 {
        for (c, &src) in perm.iter().enumerate() {
            assert!((zb.at2(t, c) - za.at2(t, src)).abs() < 1e-9);
        }
    }
}

#[test]
fn cve_gradients_match_finite_differences() {
    let cfg = ModelConfig { dropout: 0.0, ..small(16, 8, 3) };
    let model = CvtnModel::new(cfg, 21).unwrap();
    let mut r = rng(22);
    let x = random(&[2, 16, 3], -2.0, 2.0, &mut r);
    let y = random(&[2, 8, 3], -1.0, 1.0, &mut r);
    let (worst, n) = model_gradcheck(&model, Group::Cve, &x, &y, 50, 23);
    assert_eq!(n, 50);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn zero_layer_cve_is_a_linear_forecaster() {
    let cfg = ModelConfig {
        cve_layers: 0,
        ..small(8, 4, 2)
    };
    let model = CvtnModel::new(cfg, 1).unwrap();
    assert!(model.cve().blocks().is_empty());
    // linearity in the encoded history: with RevIN statistics fixed by a
    // shifted+scaled copy, the decoded forecast shifts and scales alike
    let mut r = rng(2);
    let x = random(&[8, 2], -1.0, 1.0, &mut r);
    let x2 = Tensor::from_fn([8, 2], |i| 3.0 * x.data()[i] + 5.0);
    let (z, z2) = (model.predict_cve(&x).unwrap(), model.predict_cve(&x2).unwrap());
    for (a, b) in z.data().iter().zip(z2.data()) {
        assert!((3.0 * a + 5.0 - b).abs() < 1e-4);
    }
}

#[test]
fn target_projection_examples() {
    let cfg = small(8, 8, 3);
    let mut model = CvtnModel::new(cfg, 0).unwrap();
    let ids = model.cte().target_projection_ids();
    let p = model.group_mut(Group::Cte);
    *p.get_mut(ids.weight) = Tensor::eye(8);
    *p.get_mut(ids.bias) = Tensor::zeros([8]);
    let mut r = rng(1);
    let x = random(&[1, 8, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let b = model.cte().params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let z = model.cte().target_projection(&mut g, &b, xv).unwrap();
    assert_eq!(g.value(z), &x);

    let p = model.group_mut(Group::Cte);
    *p.get_mut(ids.weight) = Tensor::zeros([8, 8]);
    *p.get_mut(ids.bias) = Tensor::from_fn([8], |i| i as f64);
    let b = model.cte().params().bind(&mut g, false);
    let z = model.cte().target_projection(&mut g, &b, xv).unwrap();
    assert_eq!(g.value(z).at3(0, 5, 2), 5.0);

    let wide = CvtnModel::new(ModelConfig::new(96, 336, 21), 0).unwrap();
    let mut g = Graph::new();
    let b = wide.cte().params().bind(&mut g, false);
    let xv = g.constant(Tensor::zeros([1, 96, 21]));
    let z = wide.cte().target_projection(&mut g, &b, xv).unwrap();
    assert_eq!(g.shape(z), &[1, 336, 21]);
}

#[test]
fn cross_time_block_keeps_its_input_as_prefix() {
    let cfg = ModelConfig { growth: 4, ..small(8, 6, 7) };
    let mut model = CvtnModel::new(cfg, 0).unwrap();
    let ids = model.cte().layers()[0];
    let mut r = rng(3);
    let t = random(&[2, 7, 6], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let b = model.cte().params().bind(&mut g, false);
    let tv = g.constant(t.clone());
    let out = cross_time_block(&mut g, &b, &ids, tv, Activation::Gelu).unwrap();
    assert_eq!(g.shape(out), &[2, 11, 6]);
    let o = g.value(out);
    for s in 0..2 {
        for c in 0..7 {
            for k in 0..6 {
                assert_eq!(o.at3(s, c, k).to_bits(), t.at3(s, c, k).to_bits());
            }
        }
    }
    // zero conv: the new channels are act(0) = 0
    let p = model.group_mut(Group::Cte);
    *p.get_mut(ids.conv_weight) = Tensor::zeros([4, 7, 3]);
    *p.get_mut(ids.conv_bias) = Tensor::zeros([4]);
    let b = model.cte().params().bind(&mut g, false);
    let out = cross_time_block(&mut g, &b, &ids, tv, Activation::Gelu).unwrap();
    let o = g.value(out);
    for s in 0..2 {
        for c in 7..11 {
            for k in 0..6 {
                assert_eq!(o.at3(s, c, k), 0.0);
            }
        }
    }
}

#[test]
fn fds_halves_the_added_channels() {
    let cfg = ModelConfig { growth: 8, cte_layers: 3, ..small(8, 5, 7) };
    let model = CvtnModel::new(cfg, 0).unwrap();
    let ids = model.cte().layers()[0];
    let mut g = Graph::new();
    let b = model.cte().params().bind(&mut g, false);
    let cat = g.constant(Tensor::zeros([1, 15, 5]));
    let out = fds(&mut g, &b, &ids, cat).unwrap();
    assert_eq!(g.shape(out), &[1, 11, 5]);
    assert_eq!(model.cte().channels_at(3), 19);
    for n in 0..3 {
        let l = model.cte().layers()[n];
        assert_eq!(l.in_channels, 7 + n * 4);
        assert!(l.in_channels + 4 < l.in_channels + 8);
    }
    let odd = ModelConfig { growth: 3, ..small(8, 5, 7) };
    assert!(matches!(CvtnModel::new(odd, 0), Err(Error::Config(_))));
}

#[test]
fn zero_cte_is_a_residual_identity() {
    for frame in [CteFrame::Normalized, CteFrame::Raw] {
        let cfg = ModelConfig { cte_frame: frame, ..small(16, 12, 3) };
        let model = CvtnModel::new(cfg, 30).unwrap();
        let mut r = rng(31);
        let x = random(&[4, 16, 3], -2.0, 2.0, &mut r);
        let p = model.predict(&x).unwrap();
        assert_eq!(p.y, p.z_cve, "{frame}");
    }
    // fully zeroed CTE behaves the same
    let mut model = CvtnModel::new(small(16, 12, 3), 30).unwrap();
    for t in model.group_mut(Group::Cte).tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = random(&[16, 3], -2.0, 2.0, &mut rng(1));
    let p = model.predict(&x).unwrap();
    assert_eq!(p.y, p.z_cve);
}

#[test]
fn long_horizon_shapes() {
    let cfg = ModelConfig { cte_layers: 2, growth: 8, ..ModelConfig::new(96, 720, 7) };
    let model = CvtnModel::new(cfg, 0).unwrap();
    let mut g = Graph::new();
    let x = Tensor::zeros([1, 96, 7]);
    let f = model.forward_full(&mut g, &x, false, false).unwrap();
    assert_eq!(g.shape(f.y), &[1, 720, 7]);
    assert_eq!(f.cte.channels, vec![7, 11, 15]);
}

#[test]
fn cte_gradients_match_finite_differences() {
    for frame in [CteFrame::Normalized, CteFrame::Raw] {
        let cfg = ModelConfig { cte_frame: frame, dropout: 0.0, ..small(16, 8, 3) };
        let mut model = CvtnModel::new(cfg, 40).unwrap();
        randomize_group(&mut model, Group::Cte, 0.3, 41);
        let mut r = rng(42);
        let x = random(&[2, 16, 3], -2.0, 2.0, &mut r);
        let y = random(&[2, 8, 3], -1.0, 1.0, &mut r);
        let (worst, _) = model_gradcheck(&model, Group::Cte, &x, &y, 50, 43);
        assert!(worst < 1e-4, "{frame}: {worst}");
    }
}

#[test]
fn frozen_cve_receives_no_gradient_in_full_forward() {
    let model = CvtnModel::new(small(8, 4, 2), 0).unwrap();
    let mut g = Graph::new();
    let x = random(&[2, 8, 2], -1.0, 1.0, &mut rng(0));
    let f = model.forward_full(&mut g, &x, false, true).unwrap();
    let l = g.mse_loss(f.y, &Tensor::zeros([2, 4, 2])).unwrap();
    g.backward(l).unwrap();
    assert!(f.cve_bound.vars().iter().all(|&v| g.grad(v).is_none()));
    assert!(f.cte_bound.vars().iter().all(|&v| g.grad(v).is_some()));
}

#[test]
fn config_round_trips_through_key_values() {
    let cfg = ModelConfig { cte_frame: CteFrame::Raw, trend: false, activation: Activation::Relu, ..ModelConfig::new(48, 24, 5) };
    let kv = cfg.to_kv().into_iter().collect();
    assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
}
