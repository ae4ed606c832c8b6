use fedprompt::autograd::Graph;
use fedprompt::checks::GradcheckCase;
use fedprompt::tensor::Tensor;
use fedprompt::translator::{generate_context, init_params, BoundTranslator, TranslatorConfig, FFN_OUT, QUERIES, W_K, W_O, W_Q, W_V};
use fedprompt::ParameterSet;

fn set(params: &mut ParameterSet, name: &str, rows: &[Vec<f64>]) {
    let t = Tensor::from_rows(rows).unwrap();
    params.get_mut(name).unwrap().value = t;
}

fn fill(params: &mut ParameterSet, name: &str, salt: usize) {
    let p = params.get_mut(name).unwrap();
    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
        *v = (((i + salt) * 2654435761) % 1000) as f64 / 5000.0 - 0.1;
    }
}

fn attend(cfg: &TranslatorConfig, params: &ParameterSet, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Tensor {
    let mut g = Graph::new();
    let bound = BoundTranslator::bind(&mut g, cfg, params).unwrap();
    let q = g.constant(Tensor::from_rows(q).unwrap()).unwrap();
    let kv = g.constant(Tensor::from_rows(kv).unwrap()).unwrap();
    let out = bound.cross_attention(&mut g, q, kv).unwrap();
    g.value(out).clone()
}

#[test]
fn single_head_attention_matches_hand_computation() {
    let cfg = TranslatorConfig {
        d_model: 2,
        n_ctx: 1,
        n_heads: 1,
        ffn_mult: 1,
        kv_len: 2,
    };
    let mut p = init_params(&cfg, 0).unwrap();
    set(&mut p, W_Q, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    set(&mut p, W_K, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    set(&mut p, W_V, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
    set(&mut p, W_O, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let out = attend(&cfg, &p, &[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    // Scores [1/√2, 0]; weight on the second key is 1/(1+e^{1/√2}).
    let w2 = 1.0 / (1.0 + (0.5f64).sqrt().exp());
    let expected = [1.0 + 2.0 * w2, 2.0 + 2.0 * w2];
    assert!((out.data()[0] - expected[0]).abs() < 1e-12);
    assert!((out.data()[1] - expected[1]).abs() < 1e-12);
    assert!((expected[0] - 1.66048).abs() < 1e-5);
}

#[test]
fn identical_keys_give_projected_value_everywhere() {
    let cfg = TranslatorConfig::default();
    let d = cfg.d_model;
    let mut p = init_params(&cfg, 8).unwrap();
    fill(&mut p, W_O, 3);
    let row: Vec<f64> = (0..d).map(|j| (j as f64).cos()).collect();
    let queries: Vec<Vec<f64>> = (0..cfg.n_ctx).map(|i| (0..d).map(|j| ((i + 2 * j) as f64).sin()).collect()).collect();
    let out = attend(&cfg, &p, &queries, &vec![row.clone(); 3]);

    let times = |x: &[f64], w: &Tensor| -> Vec<f64> {
        (0..d).map(|j| (0..d).map(|i| x[i] * w.data()[i * d + j]).sum()).collect()
    };
    let expected = times(&times(&row, p.value(W_V).unwrap()), p.value(W_O).unwrap());
    for i in 0..cfg.n_ctx {
        for (a, b) in out.row_slice(i).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_key_makes_query_and_key_projections_irrelevant() {
    let cfg = TranslatorConfig::default();
    let p = {
        let mut p = init_params(&cfg, 2).unwrap();
        fill(&mut p, W_O, 1);
        fill(&mut p, FFN_OUT, 2);
        p
    };
    let mut other = p.clone();
    fill(&mut other, W_Q, 11);
    fill(&mut other, W_K, 12);
    let emb = Tensor::new(vec![2, cfg.d_model], (0..2 * cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let a = generate_context(&cfg, &p, &emb).unwrap();
    let b = generate_context(&cfg, &other, &emb).unwrap();
    assert!(a.values.max_abs_diff(&b.values) < 1e-12);
}

#[test]
fn batch_items_are_independent_and_equivariant() {
    let cfg = TranslatorConfig::default();
    let d = cfg.d_model;
    let mut p = init_params(&cfg, 4).unwrap();
    fill(&mut p, W_O, 5);
    fill(&mut p, FFN_OUT, 6);
    let rows: Vec<Vec<f64>> = (0..3).map(|b| (0..d).map(|j| ((b * d + j) as f64 * 0.61).sin()).collect()).collect();
    let batch = Tensor::from_rows(&rows).unwrap();
    let out = generate_context(&cfg, &p, &batch).unwrap();
    assert_eq!(out.values.shape(), &[3, 4, 32]);

    let permuted = Tensor::from_rows(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap();
    let perm_out = generate_context(&cfg, &p, &permuted).unwrap();
    assert!(perm_out.item(0).bit_eq(&out.item(2)));
    assert!(perm_out.item(1).bit_eq(&out.item(0)));
    assert!(perm_out.item(2).bit_eq(&out.item(1)));

    let twins = Tensor::from_rows(&[rows[1].clone(), rows[1].clone()]).unwrap();
    let twin_out = generate_context(&cfg, &p, &twins).unwrap();
    assert!(twin_out.item(0).bit_eq(&twin_out.item(1)));
    assert!(twin_out.item(0).bit_eq(&out.item(1)));
}

#[test]
fn fresh_parameters_produce_query_context() {
    // Output projections start at zero, so the context equals the queries.
    let cfg = TranslatorConfig::default();
    let p = init_params(&cfg, 13).unwrap();
    let emb = Tensor::new(vec![1, cfg.d_model], vec![0.5; cfg.d_model]).unwrap();
    let ctx = generate_context(&cfg, &p, &emb).unwrap();
    assert!(ctx.item(0).bit_eq(p.value(QUERIES).unwrap()));
}

#[test]
fn loss_gradient_reaches_every_connected_parameter() {
    // With one key the attention weights are identically 1, which cuts
    // the query path: w_q, w_k and the first layer norm get exact zeros.
    let case = GradcheckCase::standard(0, 0.05).unwrap();
    let mut p = case.params.clone();
    case.loss(&mut p, true).unwrap();
    for (name, param) in p.iter() {
        let norm = param.grad.as_ref().unwrap().norm();
        if matches!(name.as_str(), "w_q" | "w_k" | "ln1_gain" | "ln1_bias") {
            assert_eq!(norm, 0.0, "{name}");
        } else {
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }
}

#[test]
fn query_gradient_is_nonzero_from_fresh_init() {
    let case = GradcheckCase::standard(1, 0.01).unwrap();
    let mut p = init_params(&case.translator, 1).unwrap();
    case.loss(&mut p, true).unwrap();
    assert!(p.get(QUERIES).unwrap().grad.as_ref().unwrap().norm() > 0.0);
    assert!(p.get(W_O).unwrap().grad.as_ref().unwrap().norm() > 0.0);
}

/// The pinned check passes at 1e-6 relative. Over many seeds the worst
/// coordinate is sometimes a near-zero gradient where central differences
/// lose relative accuracy, so this sweep bounds the error relative to the
/// gradient's scale instead.
#[test]
fn gradient_check_across_seeds() {
    for seed in 0..6u64 {
        for tau in [0.01, 0.05, 0.5] {
            let case = GradcheckCase::standard(seed, tau).unwrap();
            let mut analytic = case.params.clone();
            case.loss(&mut analytic, true).unwrap();
            let mut probe = case.params.clone();
            let names: Vec<String> = probe.names().map(str::to_string).collect();
            for name in names {
                let grad = analytic.get(&name).unwrap().grad.clone().unwrap();
                let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
                for i in (0..grad.len()).step_by(7) {
                    let orig = probe.value(&name).unwrap().data()[i];
                    let h = 1e-5;
                    probe.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
                    let up = case.loss(&mut probe, false).unwrap();
                    probe.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
                    let down = case.loss(&mut probe, false).unwrap();
                    probe.get_mut(&name).unwrap().value.data_mut()[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - grad.data()[i]).abs() / scale;
                    assert!(err < 1e-4, "seed {seed} tau {tau} {name}[{i}]: {} vs {fd}", grad.data()[i]);
                }
            }
        }
    }
}
