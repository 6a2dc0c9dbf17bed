//! Layer and model oracles with hand-set weights.

use hmdd::model::kernels::gelu;
use hmdd::model::{
    build_model, evaluate, train, Graph, Model, ModelConfig, ParamStore, Samples, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore<f64>, index: usize, f: impl Fn(&[usize], usize) -> f64) {
    let t = &mut store.params[index].value;
    let shape = t.shape.clone();
    for (i, v) in t.data.iter_mut().enumerate() {
        *v = f(&shape, i);
    }
}

#[test]
fn inverted_residual_with_identity_convs_is_x_plus_gelu_x() {
    let c = 3;
    let mut store = ParamStore::<f64>::new(0);
    let ir = store.invres("ir", c, 1);
    // 1x1 identity: weight [c, c, 1, 1]
    let eye = |s: &[usize], i: usize| if i / s[1] == i % s[1] { 1.0 } else { 0.0 };
    set(&mut store, ir.expand.w, eye);
    set(&mut store, ir.project.w, eye);
    // depthwise 3x3 with only the centre tap
    set(&mut store, ir.depthwise.w, |_, i| if i % 9 == 4 { 1.0 } else { 0.0 });

    let x = random_tensor(&[2, c, 5, 4], 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let xv = g.input(x.clone()).unwrap();
    let y = ir.forward(&mut g, &p, xv).unwrap();
    for (a, b) in g.value(y).data.iter().zip(&x.data) {
        assert!((a - (b + gelu(*b))).abs() < 1e-12);
    }
}

#[test]
fn inverted_residual_with_zero_projection_is_identity() {
    let mut store = ParamStore::<f64>::new(4);
    let ir = store.invres("ir", 4, 2);
    set(&mut store, ir.project.w, |_, _| 0.0);
    let x = random_tensor(&[1, 4, 3, 3], 2);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let xv = g.input(x.clone()).unwrap();
    let y = ir.forward(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(y).data, x.data);
}

#[test]
fn attention_with_zero_queries_is_uniform() {
    let (c, l) = (8, 5);
    let mut store = ParamStore::<f64>::new(1);
    let mha = store.mha("mha", c, 4);
    set(&mut store, mha.q.w, |_, _| 0.0);
    let tokens = random_tensor(&[2, l, c], 3);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let t = g.input(tokens.clone()).unwrap();
    let (out, weights) = mha.attend(&mut g, &p, t).unwrap();
    assert_eq!(g.shape(weights), &[2 * 4, l, l]);
    assert!(g.value(weights).data.iter().all(|w| (w - 1.0 / l as f64).abs() < 1e-15));

    // uniform weights average the values, so every token gets the same output
    let o = g.value(out);
    for n in 0..2 {
        for tok in 1..l {
            for ch in 0..c {
                let a = o.data[(n * l + tok) * c + ch];
                let b = o.data[n * l * c + ch];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_token_attention_is_output_of_values() {
    let c = 4;
    let mut store = ParamStore::<f64>::new(2);
    let mha = store.mha("mha", c, 2);
    let tokens = random_tensor(&[1, 1, c], 5);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let t = g.input(tokens.clone()).unwrap();
    let (out, weights) = mha.attend(&mut g, &p, t).unwrap();
    assert!(g.value(weights).data.iter().all(|&w| w == 1.0));
    let v = mha.v.forward(&mut g, &p, t).unwrap();
    let expect = mha.o.forward(&mut g, &p, v).unwrap();
    for (a, b) in g.value(out).data.iter().zip(&g.value(expect).data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn feature_block_maps_zero_to_zero() {
    let cfg = ModelConfig::toy();
    let c = cfg.stage_channels[0];
    let hw = cfg.spatial_sizes()[1];
    let mut store = ParamStore::<f64>::new(9);
    let block = store.feature_block("blk", c, hw, &cfg);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let x = g.input(Tensor::new(&[1, c, hw.0, hw.1], vec![0.0; c * hw.0 * hw.1]).unwrap()).unwrap();
    let y = block.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(y), &[1, c, hw.0, hw.1]);
    assert!(g.value(y).data.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_classifier_head_predicts_uniformly() {
    let cfg = ModelConfig::toy();
    let mut model: Model<f64> = build_model(&cfg, 3).unwrap();
    let w = model.fc.w;
    model.params_mut()[w].value.data.iter_mut().for_each(|v| *v = 0.0);
    let (h, w) = cfg.input_size;
    let probs = model.predict_proba(&random_tensor(&[3, 1, h, w], 4)).unwrap();
    assert_eq!(probs.shape, vec![3, 8]);
    assert!(probs.data.iter().all(|&p| (p - 0.125).abs() < 1e-15));
}

#[test]
fn f32_and_f64_models_agree() {
    let cfg = ModelConfig::toy();
    let m64: Model<f64> = build_model(&cfg, 8).unwrap();
    let m32: Model<f32> = m64.cast();
    let (h, w) = cfg.input_size;
    let x = random_tensor(&[2, 1, h, w], 6);
    let x32 = Tensor::new(&x.shape, x.data.iter().map(|&v| v as f32).collect()).unwrap();
    let a = m64.predict_proba(&x).unwrap();
    let b = m32.predict_proba(&x32).unwrap();
    for (p, q) in a.data.iter().zip(&b.data) {
        assert!((p - f64::from(*q)).abs() < 1e-4);
    }
}

fn tiny_set(seed: u64, n: usize) -> Samples<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Samples::new(64, 64);
    for i in 0..n {
        let label = i % 8;
        // gratings: four frequencies times two orientations, random phase
        let cycles = [1.0, 2.0, 4.0, 8.0][label % 4];
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let img: Vec<f32> = (0..64 * 64)
            .map(|p| {
                let t = if label < 4 { p / 64 } else { p % 64 } as f32 / 64.0;
                (std::f32::consts::TAU * cycles * t + phase).sin() + rng.gen_range(-0.1..0.1)
            })
            .collect();
        s.push(&img, label).unwrap();
    }
    s
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_set(1, 32);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::toy() };
    let run = |seed: u64| {
        let mut m = build_model::<f32>(&ModelConfig::toy(), seed).unwrap();
        let report = train(&mut m, &data, None, &TrainConfig { seed, ..cfg.clone() }).unwrap();
        (m, report)
    };
    let (a, ra) = run(5);
    let (b, rb) = run(5);
    let (c, _) = run(6);
    assert_eq!(ra, rb);
    assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value));
    assert!(a.params().iter().zip(c.params()).any(|(p, q)| p.value != q.value));
}

#[test]
fn learns_a_separable_toy_task() {
    let train_set = tiny_set(2, 256);
    let val_set = tiny_set(3, 32);
    let mut m = build_model::<f32>(&ModelConfig::toy(), 1).unwrap();
    let report = train(&mut m, &train_set, Some(&val_set), &TrainConfig { epochs: 10, ..TrainConfig::toy() }).unwrap();
    assert!(report.epochs.last().unwrap().train_loss < report.initial_loss);
    assert!(evaluate(&m, &val_set).unwrap().accuracy() >= 0.9);
}
