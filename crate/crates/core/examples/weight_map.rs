//! Segmentation weight maps: pixels squeezed between two foreground
//! components get extra loss weight.
//!
//!     cargo run --release --example weight_map

use fedhelp::data::{distance_transforms, make_segmentation, SegmentationSpec};
use fedhelp::losses::{weight_map, WeightMapParams};

fn main() -> fedhelp::Result<()> {
    // Two blobs with a one-pixel gap.
    let (h, w) = (7, 12);
    let mut mask = vec![0u8; h * w];
    for r in 1..6 {
        for c in (1..5).chain(6..11) {
            mask[r * w + c] = 1;
        }
    }
    let (d1, d2) = distance_transforms(&mask, h, w)?;
    let params = WeightMapParams {
        beta0: 10.0,
        sigma: 2.0,
        class_balance: vec![1.0, 1.0],
    };
    let beta = weight_map(&mask, &d1, &d2, &params)?;
    println!("mask / weight (sigma 2):");
    for r in 0..h {
        let m: String = (0..w).map(|c| if mask[r * w + c] == 1 { '#' } else { '.' }).collect();
        let b: Vec<String> = (0..w).map(|c| format!("{:4.1}", beta[r * w + c])).collect();
        println!("{m}   {}", b.join(""));
    }

    let exact = weight_map(&[1], &[0.0], &[0.0], &WeightMapParams { sigma: 5.0, ..params.clone() })?;
    println!("at a seam (d1 + d2 = 0): {}", exact[0]);

    // The synthetic generator attaches maps to every image.
    let ds = make_segmentation(
        &SegmentationSpec {
            seed: 1,
            size: 2,
            height: 16,
            width: 16,
            noise: 0.35,
            id_base: 0,
        },
        &WeightMapParams::default(),
    )?;
    let wmax = ds.weights[0].iter().cloned().fold(0.0, f64::max);
    let fg = ds.masks[0].iter().filter(|&&m| m == 1).count();
    println!("generated image 0: {fg} foreground pixels, max weight {wmax:.2}");
    Ok(())
}
