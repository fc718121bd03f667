//! Synthetic private pool, shifted public set and Dirichlet partition with
//! the six-client size ratios.
//!
//!     cargo run --release --example synthetic_data

use fedhelp::data::partition::PartitionPlan;
use fedhelp::data::{make_classification, make_public_set, partition, ClassificationSpec, PublicSetSpec};

fn main() -> fedhelp::Result<()> {
    let pool = make_classification(&ClassificationSpec { seed: 7, classes: 8, dim: 32, size: 6000, spread: 4.0, modes: 2 })?;
    println!("pool: {} samples, class histogram {:?}", pool.len(), pool.class_histogram());

    let public = make_public_set(&PublicSetSpec {
        seed: 7,
        classes: 10,
        size: 500,
        shift: 0.5,
        dim: 32,
        spread: 4.0,
        modes: 2,
        sample_stream: 0,
    })?;
    println!("public: {} samples over {} classes, first id {}", public.len(), public.num_classes, public.ids[0]);

    let plan = PartitionPlan::isic19_ratios(3400, 40);
    for alpha in [0.3, 1.0, f64::INFINITY] {
        println!("dirichlet alpha {alpha}:");
        for (i, s) in partition(&pool, &plan, alpha, 7)?.iter().enumerate() {
            println!("  client {i}: train {:4} {:?}", s.train.len(), s.train.class_histogram());
        }
    }
    Ok(())
}
