//! Times forward+backward steps of a WRN on random inputs.
//!
//! `cargo run --release --example step_timing -- 10 1 128`

use std::time::Instant;

use sparsetrain::{ForwardOptions, Graph, KeepRatio, ModelSpec, Tensor, WideResNet};

fn main() -> sparsetrain::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (depth, widen, batch) = (*args.first().unwrap_or(&10), *args.get(1).unwrap_or(&1), *args.get(2).unwrap_or(&128));
    let mut model = WideResNet::<f32>::build(ModelSpec::wrn(depth, widen), 0)?;
    let images = Tensor::new(&[batch, 3, 32, 32], (0..batch * 3072).map(|i| ((i * 7919) % 255) as f32 / 128.0 - 1.0).collect())?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    for r in [1.0, 0.5, 0.05] {
        let keep = KeepRatio::new(r)?;
        let started = Instant::now();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let x = g.leaf(images.clone());
        let (logits, _) = model.forward(&mut g, &b, x, ForwardOptions::topk(keep))?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let fwd = started.elapsed();
        g.backward(loss)?;
        model.params.accumulate_grads(&g, &b)?;
        println!("r={r}: forward {:.3}s, total {:.3}s", fwd.as_secs_f64(), started.elapsed().as_secs_f64());
    }
    Ok(())
}
