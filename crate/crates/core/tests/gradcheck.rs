//! Finite-difference gradient checks for every differentiable op and for
//! the full transformer loss.

mod support;

use mtkit_core::model::{attention, AttentionMask, ModelConfig, TransformerModel};
use mtkit_core::rng::Rng;
use mtkit_core::tensor::{cross_entropy, embedding_lookup, layer_norm, Tensor};
use support::check_gradients;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).requires_grad()
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

#[test]
fn add_with_broadcast() {
    let mut rng = Rng::new(1);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4], &mut rng);
    let params = named(vec![("a", a.clone()), ("b", b.clone())]);
    check_gradients(&params, &|| a.add(&b).unwrap().sum());
}

#[test]
fn mul_with_broadcast() {
    let mut rng = Rng::new(2);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let params = named(vec![("a", a.clone()), ("b", b.clone())]);
    check_gradients(&params, &|| a.mul(&b).unwrap().sum());
}

#[test]
fn sub_and_scale() {
    let mut rng = Rng::new(3);
    let a = randn(&[4, 4], &mut rng);
    let b = randn(&[4, 4], &mut rng);
    let params = named(vec![("a", a.clone()), ("b", b.clone())]);
    check_gradients(&params, &|| a.sub(&b).unwrap().scale(2.5).sum());
}

#[test]
fn relu_away_from_kink() {
    let mut rng = Rng::new(4);
    // keep inputs off zero so the subgradient is unambiguous
    let raw = Tensor::randn(&[5, 5], 1.0, &mut rng).value();
    let data: Vec<f64> = raw
        .iter()
        .map(|&x| if x.abs() < 1e-3 { x + 0.5 } else { x })
        .collect();
    let a = Tensor::from_vec(&[5, 5], data).requires_grad();
    let params = named(vec![("a", a.clone())]);
    check_gradients(&params, &|| a.relu().sum());
}

#[test]
fn mean_reduction() {
    let mut rng = Rng::new(5);
    let a = randn(&[3, 7], &mut rng);
    let params = named(vec![("a", a.clone())]);
    check_gradients(&params, &|| a.mean());
}

#[test]
fn matmul_batched() {
    let mut rng = Rng::new(6);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[2, 4, 5], &mut rng);
    let params = named(vec![("a", a.clone()), ("b", b.clone())]);
    check_gradients(&params, &|| a.matmul(&b).unwrap().sum());
}

#[test]
fn matmul_rhs_broadcast() {
    let mut rng = Rng::new(7);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[4, 5], &mut rng);
    let params = named(vec![("a", a.clone()), ("b", b.clone())]);
    check_gradients(&params, &|| a.matmul(&b).unwrap().sum());
}

#[test]
fn softmax_jacobian() {
    let mut rng = Rng::new(8);
    let a = randn(&[3, 5], &mut rng);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let params = named(vec![("a", a.clone())]);
    // weighted sum makes the check sensitive to off-diagonal jacobian terms
    check_gradients(&params, &|| {
        a.softmax(1).unwrap().mul(&w).unwrap().sum()
    });
}

#[test]
fn reshape_and_permute() {
    let mut rng = Rng::new(9);
    let a = randn(&[2, 3, 4], &mut rng);
    let w = Tensor::randn(&[4, 3, 2], 1.0, &mut rng);
    let params = named(vec![("a", a.clone())]);
    check_gradients(&params, &|| {
        a.permute(&[2, 1, 0]).unwrap().mul(&w).unwrap().sum()
    });
}

#[test]
fn layer_norm_grads() {
    let mut rng = Rng::new(10);
    let x = randn(&[4, 8], &mut rng);
    let gain = randn(&[8], &mut rng);
    let bias = randn(&[8], &mut rng);
    let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let params = named(vec![
        ("x", x.clone()),
        ("gain", gain.clone()),
        ("bias", bias.clone()),
    ]);
    check_gradients(&params, &|| {
        layer_norm(&x, &gain, &bias, 1e-5)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
    });
}

#[test]
fn cross_entropy_with_label_smoothing() {
    let mut rng = Rng::new(11);
    let logits = randn(&[6, 11], &mut rng);
    let targets: Vec<u32> = vec![3, 0, 7, 10, 1, 5];
    let params = named(vec![("logits", logits.clone())]);
    check_gradients(&params, &|| {
        cross_entropy(&logits, &targets, 0.1, 0).unwrap()
    });
}

#[test]
fn embedding_lookup_grads() {
    let mut rng = Rng::new(12);
    let table = randn(&[7, 4], &mut rng);
    let ids: Vec<u32> = vec![1, 3, 3, 0, 6, 2];
    let w = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let params = named(vec![("table", table.clone())]);
    check_gradients(&params, &|| {
        embedding_lookup(&table, &ids, &[2, 3])
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
    });
}

#[test]
fn attention_with_mask() {
    let mut rng = Rng::new(13);
    let q = randn(&[1, 2, 3, 4], &mut rng);
    let k = randn(&[1, 2, 4, 4], &mut rng);
    let v = randn(&[1, 2, 4, 4], &mut rng);
    let mask = AttentionMask::padding(&[vec![true, true, true, false]], 3);
    let params = named(vec![("q", q.clone()), ("k", k.clone()), ("v", v.clone())]);
    check_gradients(&params, &|| {
        attention(&q, &k, &v, Some(&mask)).unwrap().sum()
    });
}

/// The headline check: every parameter of a small encoder-decoder model
/// against finite differences of the teacher-forced loss on a [2,5] batch.
#[test]
fn full_transformer_loss() {
    let cfg = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 8,
        d_ff: 16,
        dropout: 0.0,
        max_len: 8,
        vocab_size: 11,
        label_smoothing: 0.1,
        tie_embeddings: true,
        shared_embeddings: true,
    };
    let model = TransformerModel::new(cfg, 21).unwrap();
    let src = vec![vec![2, 5, 6, 7, 3], vec![2, 8, 9, 3, 0]];
    let src_mask = vec![vec![true; 5], vec![true, true, true, true, false]];
    let tgt_in = vec![vec![2, 4, 5, 6, 7], vec![2, 9, 10, 3, 0]];
    let tgt_mask = vec![vec![true; 5], vec![true, true, true, true, false]];
    let labels: Vec<u32> = vec![4, 5, 6, 7, 3, 9, 10, 3, 0, 0];
    let params = model.named_parameters();
    check_gradients(&params, &|| {
        let logits = model.forward(&src, &src_mask, &tgt_in, &tgt_mask).unwrap();
        let flat = logits.reshape(&[10, 11]).unwrap();
        cross_entropy(&flat, &labels, 0.1, 0).unwrap()
    });
}
