mod common;

use sparsetrain::{ForwardOptions, Graph, KeepRatio, ModelSpec, SiteActivation, Tensor, WideResNet32};

use common::rng;

fn images(n: usize, seed: u64) -> Tensor<f32> {
    common::random_tensor(&mut rng(seed), &[n, 3, 32, 32], 2.0).cast()
}

#[test]
fn residual_shapes_across_depths_and_widths() {
    for depth in [10, 16, 28] {
        for widen in [1, 2, 4] {
            let model = WideResNet32::build(ModelSpec::wrn(depth, widen), 0).unwrap();
            let (logits, report) = model.predict(images(1, 1), ForwardOptions::topk(KeepRatio::new(0.3).unwrap())).unwrap();
            let blocks = (depth - 4) / 6;
            assert_eq!(model.count_sparsity_sites(), 2 * 3 * blocks + 1);
            assert_eq!(report.sites.len(), model.count_sparsity_sites());
            assert_eq!(
                report.group_shapes,
                vec![vec![1, 16 * widen, 32, 32], vec![1, 32 * widen, 16, 16], vec![1, 64 * widen, 8, 8]]
            );
            assert_eq!(report.pooled_shape, vec![1, 64 * widen]);
            assert_eq!(logits.shape(), &[1, 10]);
        }
    }
}

#[test]
fn wrn_28_4_shape_trace() {
    let model = WideResNet32::build(ModelSpec::wrn(28, 4), 3).unwrap();
    let (_, report) = model.predict(images(2, 2), ForwardOptions::topk(KeepRatio::DENSE)).unwrap();
    assert_eq!(report.group_shapes, vec![vec![2, 64, 32, 32], vec![2, 128, 16, 16], vec![2, 256, 8, 8]]);
    assert_eq!(report.pooled_shape, vec![2, 256]);
}

#[test]
fn dense_sites_equal_plain_relu() {
    let model = WideResNet32::build(ModelSpec::wrn(16, 2), 4).unwrap();
    let x = images(3, 3);
    let (a, _) = model.predict(x.clone(), ForwardOptions::topk(KeepRatio::DENSE)).unwrap();
    let relu = ForwardOptions { activation: SiteActivation::Relu, bypass_norm: false };
    let (b, _) = model.predict(x, relu).unwrap();
    let max_diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    assert_eq!(max_diff, 0.0);
}

#[test]
fn gradient_reaches_the_stem_at_low_keep_ratio() {
    let mut model = WideResNet32::build(ModelSpec::wrn(10, 1), 5).unwrap();
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let x = g.leaf(images(4, 4));
    let (logits, _) = model.forward(&mut g, &b, x, ForwardOptions::topk(KeepRatio::new(0.05).unwrap())).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
    g.backward(loss).unwrap();
    model.params.accumulate_grads(&g, &b).unwrap();
    let stem = model.params.get(model.stem.weight).grad().unwrap();
    let norm: f32 = stem.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm > 0.0);
}

#[test]
fn bypassing_norms_keeps_logits_finite() {
    let model = WideResNet32::build(ModelSpec::wrn(16, 1), 6).unwrap();
    let opts = ForwardOptions { activation: SiteActivation::TopK(KeepRatio::DENSE), bypass_norm: true };
    let (logits, _) = model.predict(images(2, 5), opts).unwrap();
    assert!(logits.all_finite());
}

#[test]
fn per_site_rates_never_exceed_the_budget() {
    let model = WideResNet32::build(ModelSpec::wrn(10, 2), 7).unwrap();
    for r in [0.01, 0.2, 0.9] {
        let (_, report) = model.predict(images(3, 6), ForwardOptions::topk(KeepRatio::new(r).unwrap())).unwrap();
        for s in &report.sites {
            assert!(s.rate() <= s.budget as f64 / s.per_sample as f64 + 1e-12);
        }
    }
}
