mod common;

use common::{dense_masked_attention, layer_norm_rows, naive_matmul, DenseLinear};
use neural_scoring::nsnet::{init_extractor, init_scorer, ModelConfig};
use neural_scoring::substrate::{
    grad_check, masked_mha, read_checkpoint, write_checkpoint, ConvGeom, GradCheckConfig, Graph, Linear, MhaWeights,
    ParamStore, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dense(store: &ParamStore<f64>, l: Linear) -> DenseLinear {
    DenseLinear {
        weight: store.tensor(l.weight).data().to_vec(),
        bias: store.tensor(l.bias).data().to_vec(),
    }
}

/// Random mask with at least one open key per row.
fn random_mask(rng: &mut ChaCha8Rng, s: usize) -> Vec<bool> {
    let mut allow: Vec<bool> = (0..s * s).map(|_| rng.random_bool(0.5)).collect();
    for i in 0..s {
        let j = rng.random_range(0..s);
        allow[i * s + j] = true;
    }
    allow
}

proptest! {
    #[test]
    fn matmul_equals_triple_loop(n in 1usize..7, k in 1usize..7, m in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, n * k), random(&mut rng, k * m));
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let av = g.constant(Tensor::new(vec![n, k], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![k, m], b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b, n, k, m);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..6, m in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = random(&mut rng, n * m).iter().map(|v| v * scale).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::new(vec![n, m], x).unwrap());
        let p = g.softmax_rows(xv).unwrap();
        for row in g.value(p).data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn masked_attention_equals_dense_oracle(s in 1usize..9, heads in 1usize..4, seed in any::<u64>()) {
        let d = 4 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let w = MhaWeights::new(&mut store, "attn", d, &mut rng).unwrap();
        let x = random(&mut rng, s * d);
        let allow = random_mask(&mut rng, s);
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::new(vec![s, d], x.clone()).unwrap());
        let out = masked_mha(&mut g, xv, &allow, heads, 0..s, &w).unwrap().out;
        let want = dense_masked_attention(
            &x, s, d, &allow, heads,
            &dense(&store, w.query), &dense(&store, w.key), &dense(&store, w.value), &dense(&store, w.output),
        );
        for (a, b) in g.value(out).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_equals_oracle(n in 1usize..5, d in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, gamma, beta) = (random(&mut rng, n * d), random(&mut rng, d), random(&mut rng, d));
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::new(vec![n, d], x.clone()).unwrap());
        let gv = g.constant(Tensor::new(vec![d], gamma.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![d], beta.clone()).unwrap());
        let y = g.layer_norm(xv, gv, bv).unwrap();
        let want = layer_norm_rows(&x, d, &gamma, &beta, 1e-5);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trips_f32_values(values in prop::collection::vec(-1e6f32..1e6, 1..40), seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let n = values.len();
        store.insert("b.weight", Tensor::new(vec![n], values.iter().map(|&v| v as f64).collect()).unwrap()).unwrap();
        store.insert("a.bias", Tensor::new(vec![1, 1], vec![seed as f32 as f64]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        let back: ParamStore<f64> = read_checkpoint(&bytes[..], std::path::Path::new("mem")).unwrap();
        for name in ["a.bias", "b.weight"] {
            prop_assert_eq!(back.by_name(name).unwrap().tensor.data(), store.by_name(name).unwrap().tensor.data());
        }
    }
}

#[test]
fn disallowed_keys_cannot_influence_a_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (s, d, heads) = (6, 8, 2);
    let mut store = ParamStore::<f64>::new();
    let w = MhaWeights::new(&mut store, "attn", d, &mut rng).unwrap();
    for trial in 0..50 {
        let allow = random_mask(&mut rng, s);
        let x = random(&mut rng, s * d);
        let run = |x: &[f64]| {
            let mut g = Graph::new(&store);
            let xv = g.constant(Tensor::new(vec![s, d], x.to_vec()).unwrap());
            let out = masked_mha(&mut g, xv, &allow, heads, 0..s, &w).unwrap().out;
            g.value(out).data().to_vec()
        };
        let base = run(&x);
        for j in 0..s {
            let mut y = x.clone();
            for c in 0..d {
                y[j * d + c] += 100.0 * (c as f64 + 1.0);
            }
            let moved = run(&y);
            for i in (0..s).filter(|&i| i != j && !allow[i * s + j]) {
                assert_eq!(
                    &moved[i * d..(i + 1) * d],
                    &base[i * d..(i + 1) * d],
                    "trial {trial}, row {i}, key {j}"
                );
            }
        }
    }
}

#[test]
fn query_subset_matches_full_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (s, d) = (7, 8);
    let mut store = ParamStore::<f64>::new();
    let w = MhaWeights::new(&mut store, "attn", d, &mut rng).unwrap();
    let allow = random_mask(&mut rng, s);
    let x = random(&mut rng, s * d);
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::new(vec![s, d], x).unwrap());
    let full = masked_mha(&mut g, xv, &allow, 2, 0..s, &w).unwrap().out;
    let part = masked_mha(&mut g, xv, &allow, 2, 0..3, &w).unwrap().out;
    let head = &g.value(full).data()[..3 * d];
    for (a, b) in head.iter().zip(g.value(part).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

/// A miniature of every op the scorer uses, checked against central
/// differences.
#[test]
fn composite_graph_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let conv_w = store
        .insert_uniform("conv.weight", vec![3, 3, 3, 1], 9, 1.0, &mut rng)
        .unwrap();
    let conv_b = store.insert_uniform("conv.bias", vec![3], 3, 0.1, &mut rng).unwrap();
    let proj = Linear::new(&mut store, "proj", 9, 8, 1.0, &mut rng).unwrap();
    let attn = MhaWeights::new(&mut store, "attn", 8, &mut rng).unwrap();
    let gamma = store.insert_filled("ln.gamma", vec![8], 1.0).unwrap();
    let beta = store.insert_zeros("ln.beta", vec![8]).unwrap();
    let head = Linear::new(&mut store, "head", 16, 2, 1.0, &mut rng).unwrap();
    let input = Tensor::new(vec![6, 5, 1], random(&mut rng, 30)).unwrap();
    let geom = ConvGeom {
        kernel: (3, 3),
        stride: (2, 2),
        pad: (1, 1),
    };
    let allow: Vec<bool> = (0..9).map(|k| k % 4 != 1).collect();

    let forward = |g: &mut Graph<'_, f64>| {
        let x = g.constant(input.clone());
        let (w, b) = (g.param(conv_w), g.param(conv_b));
        let c = g.conv2d(x, w, b, geom).unwrap();
        let c = g.relu(c);
        let c = g.reshape(c, vec![3, 9]).unwrap();
        let h = proj.forward(g, c).unwrap();
        let a = masked_mha(g, h, &allow, 2, 0..3, &attn).unwrap().out;
        let r = g.add(h, a).unwrap();
        let (gm, bt) = (g.param(gamma), g.param(beta));
        let n = g.layer_norm(r, gm, bt).unwrap();
        let pooled = g.stats_pool(n).unwrap();
        let z = head.forward(g, pooled).unwrap();
        let z = g.reshape(z, vec![2, 1]).unwrap();
        let p = g.sigmoid(z);
        g.bce(p, &[1.0, 0.0], 0.9, 0.1, 2.0).unwrap()
    };
    let report = grad_check(
        &store,
        |s| {
            let mut g = Graph::new(s);
            let l = forward(&mut g);
            Ok(g.value(l).data()[0])
        },
        |s| {
            let mut g = Graph::new(s);
            let l = forward(&mut g);
            Ok(g.backward(l)?.into_params())
        },
        GradCheckConfig {
            coords: 400,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(
        report.passed(),
        "max rel err {} failures {:?}",
        report.max_rel_err,
        &report.failures[..report.failures.len().min(3)]
    );
    assert!(report.checked >= 200);
}

#[test]
fn initialization_is_seed_deterministic() {
    let cfg = ModelConfig::default();
    let make = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ext = init_extractor::<f64, _>(&cfg, 24, &mut rng).unwrap();
        ext.set_frozen(true);
        let sc = init_scorer(&cfg, &ext, 24, &mut rng).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&ext, &mut bytes).unwrap();
        write_checkpoint(&sc, &mut bytes).unwrap();
        bytes
    };
    assert_eq!(make(5), make(5));
    assert_ne!(make(5), make(6));
}
