//! Finite-difference check of every loss against its analytic gradient.
//!
//!     cargo run --release --example gradient_check [seeds]

use fedhelp::experiments::verify::{gradient_suite, GRAD_TOLERANCE};

fn main() -> fedhelp::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    println!("{:<24} max relative error over {seeds} seeds", "loss");
    for (name, err) in gradient_suite(seeds)? {
        let flag = if err < GRAD_TOLERANCE { "ok" } else { "TOO LARGE" };
        println!("{name:<24} {err:.3e}  {flag}");
    }

    // The checker also works on any scalar function of tensors.
    let x = fedhelp::Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]);
    let report = fedhelp::gradcheck::check(&[x], 1e-5, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    })?;
    println!("0.5*|x|^2: {} entries, max rel err {:.1e}", report.checked, report.max_relative_error);
    Ok(())
}
