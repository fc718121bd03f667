//! Component labelling and chamfer distance-to-border maps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{FedHelpError, Result};

const DIAGONAL: f64 = std::f64::consts::SQRT_2;

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 8-connected foreground labelling. Background is `None`; components are
/// numbered in raster order of their first pixel.
pub fn label_components(mask: &[u8], height: usize, width: usize) -> (Vec<Option<usize>>, usize) {
    let mut labels = vec![None; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(count);
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for (dy, dx) in NEIGHBORS_8 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if mask[q] != 0 && labels[q].is_none() {
                    labels[q] = Some(count);
                    stack.push(q);
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

/// Foreground pixels of component `k` that touch background (4-neighbourhood).
fn border_pixels(labels: &[Option<usize>], k: usize, height: usize, width: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&p| {
            labels[p] == Some(k) && {
                let (y, x) = (p / width, p % width);
                [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    ny >= 0
                        && nx >= 0
                        && (ny as usize) < height
                        && (nx as usize) < width
                        && labels[ny as usize * width + nx as usize].is_none()
                })
            }
        })
        .collect()
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source shortest paths on the 8-connected grid with step costs 1
/// (axial) and √2 (diagonal).
pub fn chamfer_from(sources: &[usize], height: usize, width: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; height * width];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    while let Some(Entry(d, p)) = heap.pop() {
        if d > dist[p] {
            continue;
        }
        let (y, x) = ((p / width) as isize, (p % width) as isize);
        for (dy, dx) in NEIGHBORS_8 {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                continue;
            }
            let q = ny as usize * width + nx as usize;
            let nd = d + if dy != 0 && dx != 0 { DIAGONAL } else { 1.0 };
            if nd < dist[q] {
                dist[q] = nd;
                heap.push(Entry(nd, q));
            }
        }
    }
    dist
}

/// Distances to the border of the nearest (`d1`) and second-nearest (`d2`)
/// foreground component. Missing components saturate at `height + width`.
pub fn distance_transforms(mask: &[u8], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if mask.len() != height * width {
        return Err(FedHelpError::shape("distance_transforms", &[mask.len()], &[height, width]));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(FedHelpError::Data("mask must be binary".into()));
    }
    let saturate = (height + width) as f64;
    let (labels, count) = label_components(mask, height, width);
    let mut d1 = vec![saturate; mask.len()];
    let mut d2 = vec![saturate; mask.len()];
    for k in 0..count {
        let dk = chamfer_from(&border_pixels(&labels, k, height, width), height, width);
        for ((a, b), &d) in d1.iter_mut().zip(d2.iter_mut()).zip(&dk) {
            if d < *a {
                *b = *a;
                *a = d;
            } else if d < *b {
                *b = d;
            }
        }
    }
    Ok((d1, d2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_pixels_have_zero_distance() {
        let mut mask = vec![0u8; 8 * 8];
        for y in 2..6 {
            for x in 2..6 {
                mask[y * 8 + x] = 1;
            }
        }
        let (d1, d2) = distance_transforms(&mask, 8, 8).unwrap();
        assert_eq!(d1[2 * 8 + 2], 0.0);
        assert_eq!(d1[2 * 8 + 4], 0.0);
        assert!(d1[3 * 8 + 3] > 0.0);
        assert!(d2.iter().all(|&d| d == 16.0));
    }

    #[test]
    fn midpoint_between_two_components() {
        let (h, w) = (5, 9);
        let mut mask = vec![0u8; h * w];
        mask[2 * w + 2] = 1;
        mask[2 * w + 6] = 1;
        let (d1, d2) = distance_transforms(&mask, h, w).unwrap();
        assert_eq!(d1[2 * w + 4], 2.0);
        assert_eq!(d2[2 * w + 4], 2.0);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(distance_transforms(&[0, 2], 1, 2).is_err());
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let mask = [1u8, 0, 0, 1];
        let (_, n) = label_components(&mask, 2, 2);
        assert_eq!(n, 1);
    }
}
