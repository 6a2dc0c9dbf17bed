//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hmdd::model::{build_model, Graph, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_batch(seed: u64, n: usize, h: usize, w: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..8)).collect();
    (Tensor::new(&[n, 1, h, w], x).unwrap(), labels)
}

fn loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let logits = model.forward(&mut g, xv).unwrap();
    let l = g.softmax_cross_entropy(logits, labels).unwrap();
    g.value(l).data[0]
}

pub struct GradReport {
    pub checked: usize,
    pub tensors: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Layer kinds (second-to-last name component) that had coordinates checked.
    pub kinds: BTreeSet<String>,
}

pub const LAYER_KINDS: [&str; 13] =
    ["expand", "dw", "project", "q", "k", "v", "o", "convt", "b_pw", "fuse", "embed", "fc", "norm"];

/// Backprop against central differences with step `h` on at least
/// `min_coords` coordinates spread evenly over every parameter tensor of the
/// toy model in f64.
pub fn gradcheck(min_coords: usize, h: f64) -> GradReport {
    let cfg = ModelConfig::toy();
    let mut model: Model<f64> = build_model(&cfg, 11).unwrap();
    // Non-zero biases and norm offsets so every parameter gets a generic gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in model.params_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("beta") {
            p.value.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let (x, labels) = random_batch(13, 2, cfg.input_size.0, cfg.input_size.1);
    let (_, _, grads) = model.loss_and_grads(&x, &labels).unwrap();

    let tensors = model.params().len();
    let per_tensor = min_coords.div_ceil(tensors) + 1;
    let mut report = GradReport { checked: 0, tensors, worst: 0.0, worst_at: String::new(), kinds: BTreeSet::new() };
    for t in 0..tensors {
        let len = model.params()[t].value.len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let orig = model.params()[t].value.data[i];
            model.params_mut()[t].value.data[i] = orig + h;
            let up = loss(&model, &x, &labels);
            model.params_mut()[t].value.data[i] = orig - h;
            let down = loss(&model, &x, &labels);
            model.params_mut()[t].value.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(fd, grads[t].data[i]);
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{}[{i}]: fd {fd:e} vs bp {:e}", model.params()[t].name, grads[t].data[i]);
            }
            report.checked += 1;
        }
        let name = &model.params()[t].name;
        report.kinds.insert(name.rsplit('.').nth(1).unwrap_or(name).to_string());
    }
    report
}
