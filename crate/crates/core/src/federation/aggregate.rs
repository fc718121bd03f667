//! Server-side weighted averaging of homogeneous parameter vectors.

use crate::error::{FedHelpError, Result};
use crate::model::ParamVector;

/// One client's contribution to an aggregation round.
#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub params: ParamVector,
    /// Usually the client's training-set size.
    pub weight: u64,
}

/// Element-wise `Σ w_k θ_k / Σ w_k`, accumulated in ascending client id.
///
/// The sum is kept as a running weighted mean, `μ ← μ + (w_k / W_k)(θ_k − μ)`,
/// so that a single upload and a set of identical uploads come back
/// bit-for-bit unchanged.
pub fn fedavg_aggregate(uploads: &[Upload]) -> Result<ParamVector> {
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let Some(first) = order.first() else {
        return Err(FedHelpError::Aggregation("no uploads to aggregate".into()));
    };
    if let Some(bad) = order.iter().find(|u| u.params.layout != first.params.layout) {
        return Err(FedHelpError::Aggregation(format!(
            "client {} uploaded a different parameter layout than client {}",
            bad.client_id, first.client_id
        )));
    }
    if let Some(bad) = order.iter().find(|u| u.weight == 0) {
        return Err(FedHelpError::Aggregation(format!(
            "client {} has zero aggregation weight",
            bad.client_id
        )));
    }
    let mut mean = first.params.values.clone();
    let mut total = first.weight as f64;
    for u in &order[1..] {
        total += u.weight as f64;
        let share = u.weight as f64 / total;
        for (m, &x) in mean.iter_mut().zip(&u.params.values) {
            *m += share * (x - *m);
        }
    }
    Ok(ParamVector {
        layout: first.params.layout.clone(),
        values: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layout, LayoutEntry};

    fn pv(values: Vec<f64>) -> ParamVector {
        ParamVector {
            layout: Layout {
                entries: vec![LayoutEntry {
                    name: "w".into(),
                    shape: vec![values.len()],
                    offset: 0,
                }],
            },
            values,
        }
    }

    fn up(id: usize, v: Vec<f64>, w: u64) -> Upload {
        Upload {
            client_id: id,
            params: pv(v),
            weight: w,
        }
    }

    #[test]
    fn single_upload_is_identity() {
        let v = vec![0.1, -7.3, 1e-300];
        assert_eq!(fedavg_aggregate(&[up(0, v.clone(), 3)]).unwrap().values, v);
    }

    #[test]
    fn equal_weight_mean() {
        let out = fedavg_aggregate(&[up(0, vec![1.0], 5), up(1, vec![3.0], 5)]).unwrap();
        assert_eq!(out.values, vec![2.0]);
    }

    #[test]
    fn three_to_one() {
        let out = fedavg_aggregate(&[up(0, vec![1.0], 3), up(1, vec![3.0], 1)]).unwrap();
        assert_eq!(out.values, vec![1.5]);
    }

    #[test]
    fn identical_uploads_conserved() {
        let v = vec![0.1, 0.2, 0.3];
        let ups: Vec<Upload> = (0..7).map(|i| up(i, v.clone(), 1 + i as u64 * 13)).collect();
        assert_eq!(fedavg_aggregate(&ups).unwrap().values, v);
    }

    #[test]
    fn input_order_does_not_matter() {
        let a = [up(2, vec![0.3], 2), up(0, vec![0.7], 5), up(1, vec![-1.1], 9)];
        let b = [a[1].clone(), a[2].clone(), a[0].clone()];
        assert_eq!(fedavg_aggregate(&a).unwrap(), fedavg_aggregate(&b).unwrap());
    }

    #[test]
    fn errors() {
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(fedavg_aggregate(&[up(0, vec![1.0], 1), up(1, vec![1.0, 2.0], 1)]).is_err());
        assert!(fedavg_aggregate(&[up(0, vec![1.0], 0)]).is_err());
    }
}
