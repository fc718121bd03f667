//! Rank-based backward distillation: the large model is pushed to raise its
//! probabilities on the proxy's top classes, without matching the proxy's
//! actual values.
//!
//!     cargo run --release --example ranking_distillation

use fedhelp::losses::{cross_entropy, forward_kd, ranking_kd, ranking_kd_from_proxy, top_omega};
use fedhelp::{Graph, Tensor};

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn main() -> fedhelp::Result<()> {
    let proxy = Tensor::from_rows(&[vec![2.0, 0.1, 1.5, -1.0, 1.0, 0.0]]);
    let large = Tensor::from_rows(&[vec![0.5, 2.5, 0.0, 0.3, -0.5, 1.0]]);
    let omega = top_omega(&proxy, 3)?;
    println!("proxy top-3 classes: {:?}", omega[0]);

    let mut g = Graph::new();
    let l = g.param(&large);
    let p = g.constant(&[1, 6], proxy.data().to_vec())?;
    let rank = ranking_kd_from_proxy(&mut g, l, p, 3)?;
    let kl = forward_kd(&mut g, p, l)?;
    println!("ranking KD {:.4}   (KL to proxy would be {:.4})", g.scalar_value(rank), g.scalar_value(kl));
    g.backward(rank)?;
    let grad = g.grad(l).unwrap();
    println!("gradient on large logits: {:?}", grad.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>());
    println!("(negative entries are raised by a descent step: exactly the top-3 set)");

    // With one top class the loss is cross-entropy against the proxy argmax.
    let mut g = Graph::new();
    let l = g.constant(&[1, 6], large.data().to_vec())?;
    let r1 = ranking_kd(&mut g, l, &top_omega(&proxy, 1)?)?;
    let ce = cross_entropy(&mut g, l, &[0])?;
    println!("|omega|=1: ranking {:.15}  CE {:.15}", g.scalar_value(r1), g.scalar_value(ce));

    // Joint minimum of CE + 0.2 * ranking with the label inside the top-3
    // set: p_y = 1.2 / 1.6 = 0.75, the other two top classes get 0.125 each.
    let (label, set, lambda) = (1usize, vec![vec![0usize, 1, 2]], 0.2);
    let mut z = vec![0.0; 6];
    for _ in 0..4000 {
        let mut g = Graph::new();
        let v = g.param(&Tensor::from_rows(&[z.clone()]));
        let a = cross_entropy(&mut g, v, &[label])?;
        let b = ranking_kd(&mut g, v, &set)?;
        let b = g.scale(b, lambda);
        let loss = g.add(a, b)?;
        g.backward(loss)?;
        for (zi, gi) in z.iter_mut().zip(g.grad(v).unwrap()) {
            *zi -= 2.0 * gi;
        }
    }
    let p = softmax(&z);
    println!("joint optimum: p = {:?}", p.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    Ok(())
}
