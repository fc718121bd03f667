//! Training objectives for small and large clients.
//!
//! All losses are built from [`Graph`] primitives, so every one of them is
//! differentiable by construction and checkable with finite differences.
//! Batch reductions are means; pixel losses average over every pixel of the
//! batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{xlogx, Graph, Var};
use crate::error::{FedHelpError, Result};
use crate::tensor::Tensor;

/// Tolerance on probability rows handed to [`kl_divergence`].
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Loss mixing coefficients and the top-rank set size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_j: f64,
    pub lambda_f: f64,
    pub lambda_b: f64,
    pub omega_size: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.1,
            lambda_j: 0.2,
            lambda_f: 1.0,
            lambda_b: 0.2,
            omega_size: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_j", self.lambda_j),
            ("lambda_f", self.lambda_f),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FedHelpError::config(name, "must be finite and nonnegative"));
            }
        }
        if self.omega_size == 0 || self.omega_size > num_classes {
            return Err(FedHelpError::config(
                "omega_size",
                format!("must be in 1..={num_classes}"),
            ));
        }
        Ok(())
    }
}

/// Learnable per-(public datum, oracle) mixture logits. A row softmax turns
/// each row into contribution scores that sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiMixture {
    pub logits: Tensor,
}

impl ApiMixture {
    /// Uniform mixture (all-zero logits) for `public_size` data and `apis` oracles.
    pub fn new(public_size: usize, apis: usize) -> Self {
        ApiMixture {
            logits: Tensor::zeros(&[public_size, apis]).with_grad(),
        }
    }

    pub fn num_apis(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Contribution scores for one public datum.
    pub fn weights(&self, row: usize) -> Vec<f64> {
        crate::autodiff::softmax_rows(self.logits.row(row), self.num_apis())
    }
}

/// Weight-map hyperparameters for segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMapParams {
    pub beta0: f64,
    pub sigma: f64,
    /// Per-class balancing weights indexed by mask value. Empty means
    /// "derive from each mask's inverse class frequency".
    #[serde(default)]
    pub class_balance: Vec<f64>,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        WeightMapParams {
            beta0: 10.0,
            sigma: 5.0,
            class_balance: Vec::new(),
        }
    }
}

fn rows_of(g: &Graph, v: Var) -> Result<(usize, usize)> {
    let s = g.shape(v);
    match s.last() {
        Some(&c) if c > 0 => Ok((g.value(v).len() / c, c)),
        _ => Err(FedHelpError::shape("loss input", s, &[])),
    }
}

fn as_rows(g: &mut Graph, v: Var) -> Result<Var> {
    let (r, c) = rows_of(g, v)?;
    if g.shape(v).len() == 2 {
        Ok(v)
    } else {
        g.reshape(v, &[r, c])
    }
}

/// Per-row `−log softmax(logits)[label]`, shape `[R]`.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, c) = rows_of(g, logits)?;
    if rows != labels.len() {
        return Err(FedHelpError::shape("cross_entropy", g.shape(logits), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(FedHelpError::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let flat = as_rows(g, logits)?;
    let ls = g.log_softmax(flat)?;
    let picked = g.gather(ls, labels)?;
    Ok(g.neg(picked))
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = cross_entropy_rows(g, logits, labels)?;
    Ok(g.mean(rows))
}

/// Per-row `KL(p ‖ softmax(q))` with `p` given as a (possibly differentiable)
/// probability node of the same shape as `q_logits`.
fn kl_rows(g: &mut Graph, p: Var, q_logits: Var) -> Result<Var> {
    let ls = g.log_softmax(q_logits)?;
    let plogp = g.xlogx(p);
    let cross = g.mul(p, ls)?;
    let diff = g.sub(plogp, cross)?;
    g.sum_last(diff)
}

fn check_probability_rows(p: &[f64], width: usize) -> Result<()> {
    for (i, row) in p.chunks(width).enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(FedHelpError::InvalidArgument(format!(
                "probability row {i} is not normalized (sum {total})"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `KL(p ‖ softmax(q_logits))`. `p` is a constant.
pub fn kl_divergence(g: &mut Graph, p: &Tensor, q_logits: Var) -> Result<Var> {
    if p.shape() != g.shape(q_logits) {
        return Err(FedHelpError::shape("kl_divergence", p.shape(), g.shape(q_logits)));
    }
    let (_, c) = rows_of(g, q_logits)?;
    check_probability_rows(p.data(), c)?;
    let pv = g.constant(p.shape(), p.data().to_vec())?;
    let rows = kl_rows(g, pv, q_logits)?;
    Ok(g.mean(rows))
}

/// Oracle probabilities for one public minibatch, shape `[B × M × (K·C)]`
/// where `K` is 1 for classification and the pixel count for segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleBatch {
    pub dists: Tensor,
    pub classes: usize,
}

impl OracleBatch {
    pub fn batch(&self) -> usize {
        self.dists.shape()[0]
    }

    pub fn apis(&self) -> usize {
        self.dists.shape()[1]
    }

    /// Rows of the KL target per datum (pixels for segmentation).
    pub fn rows_per_datum(&self) -> usize {
        self.dists.shape()[2] / self.classes.max(1)
    }
}

/// `Σ_m α_m F_m` per row, as a graph node of shape `[B·K × C]`.
fn mixture_target(g: &mut Graph, oracle: &OracleBatch, alpha_logits: Option<Var>) -> Result<Var> {
    let (b, m, width) = (oracle.batch(), oracle.apis(), oracle.dists.shape()[2]);
    let rows = b * oracle.rows_per_datum();
    let weights = match alpha_logits {
        Some(a) => {
            if g.shape(a) != [b, m] {
                return Err(FedHelpError::shape("api mixture", g.shape(a), &[b, m]));
            }
            g.softmax(a)?
        }
        None => g.constant(&[b, m], vec![1.0 / m as f64; b * m])?,
    };
    let weights = g.reshape(weights, &[b, 1, m])?;
    let dists = g.constant(&[b, m, width], oracle.dists.data().to_vec())?;
    let mixed = g.bmm(weights, dists)?;
    g.reshape(mixed, &[rows, oracle.classes])
}

/// Public-data guidance loss for a small client:
/// `mean_p [ CE(ŵ(x_p), y_p) + λ_R · KL(Σ_m α_{p,m} F_m(x_p) ‖ ŵ(x_p)) ]`.
///
/// `alpha_logits` are the `[B×M]` mixture logits of this batch's rows; when
/// absent the oracles are mixed uniformly. With `λ_R = 0` this is exactly
/// the public cross-entropy.
pub fn guidance_loss(
    g: &mut Graph,
    public_logits: Var,
    labels: &[usize],
    oracle: Option<&OracleBatch>,
    alpha_logits: Option<Var>,
    lambda_r: f64,
) -> Result<Var> {
    guidance_impl(g, public_logits, labels, oracle, alpha_logits, lambda_r, None)
}

/// Pixel form of [`guidance_loss`]: each pixel term is weighted by the
/// weight map and the sum is normalized by the total weight.
pub fn pixel_guidance_loss(
    g: &mut Graph,
    public_pixel_logits: Var,
    mask: &[usize],
    weights: &[f64],
    oracle: Option<&OracleBatch>,
    alpha_logits: Option<Var>,
    lambda_r: f64,
) -> Result<Var> {
    guidance_impl(
        g,
        public_pixel_logits,
        mask,
        oracle,
        alpha_logits,
        lambda_r,
        Some(weights),
    )
}

fn guidance_impl(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    oracle: Option<&OracleBatch>,
    alpha_logits: Option<Var>,
    lambda_r: f64,
    pixel_weights: Option<&[f64]>,
) -> Result<Var> {
    let apis = oracle.map_or(0, OracleBatch::apis);
    if lambda_r == 0.0 {
        return match pixel_weights {
            None => cross_entropy(g, logits, labels),
            Some(w) => weighted_ce_rows(g, logits, labels, w),
        };
    }
    if apis == 0 {
        return Err(FedHelpError::config(
            "lambda_r",
            "guidance weight is positive but no oracle distributions are available",
        ));
    }
    let oracle = oracle.expect("apis > 0 implies oracle");
    let (rows, c) = rows_of(g, logits)?;
    if oracle.classes != c || oracle.batch() * oracle.rows_per_datum() != rows {
        return Err(FedHelpError::shape(
            "guidance_loss",
            g.shape(logits),
            oracle.dists.shape(),
        ));
    }
    let flat = as_rows(g, logits)?;
    let ce = cross_entropy_rows(g, flat, labels)?;
    let target = mixture_target(g, oracle, alpha_logits)?;
    let kl = kl_rows(g, target, flat)?;
    let kl = g.scale(kl, lambda_r);
    let per_row = g.add(ce, kl)?;
    match pixel_weights {
        None => Ok(g.mean(per_row)),
        Some(w) => weighted_mean(g, per_row, w),
    }
}

fn weighted_mean(g: &mut Graph, per_row: Var, weights: &[f64]) -> Result<Var> {
    if g.value(per_row).len() != weights.len() {
        return Err(FedHelpError::shape("weighted loss", g.shape(per_row), &[weights.len()]));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FedHelpError::InvalidArgument("weight map sums to zero".into()));
    }
    let w = g.constant(&[weights.len()], weights.to_vec())?;
    let weighted = g.mul(per_row, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / total))
}

fn weighted_ce_rows(g: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let ce = cross_entropy_rows(g, logits, labels)?;
    weighted_mean(g, ce, weights)
}

/// `J = L + λ_J · R`.
pub fn joint_small_loss(g: &mut Graph, private_ce: Var, guidance: Var, lambda_j: f64) -> Result<Var> {
    let r = g.scale(guidance, lambda_j);
    g.add(private_ce, r)
}

/// `G = L + λ_F · →KD + λ_B · ←KD`. Terms with a zero weight may be omitted.
pub fn large_client_loss(
    g: &mut Graph,
    private_ce: Var,
    forward: Option<Var>,
    backward: Option<Var>,
    lambda_f: f64,
    lambda_b: f64,
) -> Result<Var> {
    let mut total = private_ce;
    for (term, w) in [(forward, lambda_f), (backward, lambda_b)] {
        if let Some(t) = term {
            let s = g.scale(t, w);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Forward distillation `mean KL(softmax(teacher) ‖ softmax(student))`.
/// The teacher side is detached: only the student receives gradient.
pub fn forward_kd(g: &mut Graph, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    if g.shape(teacher_logits) != g.shape(student_logits) {
        return Err(FedHelpError::shape(
            "forward_kd",
            g.shape(teacher_logits),
            g.shape(student_logits),
        ));
    }
    let t = as_rows(g, teacher_logits)?;
    let s = as_rows(g, student_logits)?;
    let t = g.detach(t);
    let p = g.softmax(t)?;
    let rows = kl_rows(g, p, s)?;
    Ok(g.mean(rows))
}

/// Indexes of the `k` largest logits per row, ties to the lower class index.
/// Each set is returned in ascending index order.
pub fn top_omega(logits: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let c = *logits.shape().last().unwrap_or(&0);
    if k == 0 || k > c {
        return Err(FedHelpError::InvalidArgument(format!(
            "top-rank size {k} must be in 1..={c}"
        )));
    }
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut top = idx[..k].to_vec();
            top.sort_unstable();
            top
        })
        .collect())
}

/// Rank-based backward distillation:
/// `mean_b −Σ_{r∈Ω_b} log(exp(z_r) / Φ)` with `Φ = Σ_{u∈Ω} exp(z_u) + Σ_{v∉Ω} exp(z_v)`,
/// i.e. the full softmax normalizer.
pub fn ranking_kd(g: &mut Graph, large_logits: Var, omega: &[Vec<usize>]) -> Result<Var> {
    let (rows, c) = rows_of(g, large_logits)?;
    if omega.len() != rows {
        return Err(FedHelpError::shape("ranking_kd", g.shape(large_logits), &[omega.len()]));
    }
    let mut mask = vec![0.0; rows * c];
    for (r, set) in omega.iter().enumerate() {
        if set.is_empty() {
            return Err(FedHelpError::InvalidArgument(format!("empty top-rank set in row {r}")));
        }
        for &i in set {
            if i >= c {
                return Err(FedHelpError::InvalidArgument(format!(
                    "top-rank index {i} out of range for {c} classes"
                )));
            }
            mask[r * c + i] = 1.0;
        }
    }
    let flat = as_rows(g, large_logits)?;
    let ls = g.log_softmax(flat)?;
    let m = g.constant(&[rows, c], mask)?;
    let picked = g.mul(m, ls)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Ranking distillation with Ω taken from the (detached) proxy logits.
pub fn ranking_kd_from_proxy(
    g: &mut Graph,
    large_logits: Var,
    proxy_logits: Var,
    k: usize,
) -> Result<Var> {
    let proxy = g.tensor(proxy_logits);
    let (rows, c) = rows_of(g, proxy_logits)?;
    let proxy = proxy.reshape(&[rows, c])?;
    let omega = top_omega(&proxy, k)?;
    ranking_kd(g, large_logits, &omega)
}

/// `KL(large ‖ proxy)` into the proxy plus `KL(proxy ‖ large)` into the large model.
pub fn symmetric_kd(g: &mut Graph, large_logits: Var, proxy_logits: Var) -> Result<Var> {
    let fwd = forward_kd(g, large_logits, proxy_logits)?;
    let rev = forward_kd(g, proxy_logits, large_logits)?;
    g.add(fwd, rev)
}

/// Per-pixel forward distillation, averaged over all pixels.
pub fn pixel_forward_kd(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    forward_kd(g, teacher, student)
}

/// Per-pixel ranking distillation with Ω of size `k` from the proxy.
pub fn pixel_ranking_kd(g: &mut Graph, large: Var, proxy: Var, k: usize) -> Result<Var> {
    ranking_kd_from_proxy(g, large, proxy, k)
}

/// Weighted per-pixel cross-entropy `Σ β·CE / Σ β`.
pub fn weighted_pixel_ce(
    g: &mut Graph,
    pixel_logits: Var,
    mask: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let (rows, _) = rows_of(g, pixel_logits)?;
    if rows != mask.len() || rows != weights.len() {
        return Err(FedHelpError::shape(
            "weighted_pixel_ce",
            g.shape(pixel_logits),
            &[mask.len(), weights.len()],
        ));
    }
    weighted_ce_rows(g, pixel_logits, mask, weights)
}

/// Inverse class frequency weights over a binary mask, scaled so the mean
/// weight over pixels is one. Absent classes get weight 1.
pub fn class_balance(mask: &[u8]) -> [f64; 2] {
    let n = mask.len() as f64;
    let fg = mask.iter().filter(|&&m| m != 0).count() as f64;
    let counts = [n - fg, fg];
    let present = counts.iter().filter(|&&c| c > 0.0).count() as f64;
    let mut w = [1.0; 2];
    for (wc, &cnt) in w.iter_mut().zip(&counts) {
        if cnt > 0.0 {
            *wc = n / (present * cnt);
        }
    }
    w
}

/// `β = β^c + β₀ · exp(−(d₁ + d₂)² / 2σ²)` per pixel.
pub fn weight_map(mask: &[u8], d1: &[f64], d2: &[f64], params: &WeightMapParams) -> Result<Vec<f64>> {
    if !(params.sigma > 0.0) {
        return Err(FedHelpError::config("sigma", "must be positive"));
    }
    if d1.len() != mask.len() || d2.len() != mask.len() {
        return Err(FedHelpError::shape("weight_map", &[mask.len()], &[d1.len(), d2.len()]));
    }
    let balance: Vec<f64> = if params.class_balance.is_empty() {
        class_balance(mask).to_vec()
    } else {
        params.class_balance.clone()
    };
    let denom = 2.0 * params.sigma * params.sigma;
    mask.iter()
        .zip(d1.iter().zip(d2))
        .map(|(&m, (&a, &b))| {
            let bc = *balance.get(m as usize).ok_or_else(|| {
                FedHelpError::InvalidArgument(format!("no class balance weight for mask value {m}"))
            })?;
            let s = a + b;
            Ok(bc + params.beta0 * (-(s * s) / denom).exp())
        })
        .collect()
}

/// Entropy-style constant `Σ p log p`, exposed for oracle checks.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().map(|&x| xlogx(x)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.param(&Tensor::from_rows(rows))
    }

    #[test]
    fn ce_uniform_eight_classes_is_ln8() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.0; 8]]);
        let l = cross_entropy(&mut g, z, &[3]).unwrap();
        assert!((g.scalar_value(l) - 8f64.ln()).abs() < 1e-15);
        assert!((g.scalar_value(l) - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn ce_confident_correct_is_near_zero() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![10.0, -10.0]]);
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        let expect = (1.0 + (-20f64).exp()).ln();
        assert!((g.scalar_value(l) - expect).abs() < 1e-6 * expect);
        assert!((g.scalar_value(l) - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.0, 0.0]]);
        assert!(cross_entropy(&mut g, z, &[2]).is_err());
    }

    #[test]
    fn kl_of_matching_distribution_is_zero() {
        let q = vec![0.3, -1.2, 2.0];
        let p = crate::autodiff::softmax_rows(&q, 3);
        let mut g = Graph::new();
        let z = logits(&mut g, &[q]);
        let l = kl_divergence(&mut g, &Tensor::new(vec![1, 3], p).unwrap(), z).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-12);
    }

    #[test]
    fn kl_one_hot_against_uniform_is_ln2() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.4, 0.4]]);
        let p = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let l = kl_divergence(&mut g, &p, z).unwrap();
        assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_unnormalized_rows() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.0, 0.0]]);
        let p = Tensor::from_rows(&[vec![0.7, 0.7]]);
        assert!(kl_divergence(&mut g, &p, z).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut g = Graph::new();
        let l = g.constant(&[], vec![1.0]).unwrap();
        let r = g.constant(&[], vec![0.5]).unwrap();
        let j = joint_small_loss(&mut g, l, r, 0.2).unwrap();
        assert!((g.scalar_value(j) - 1.1).abs() < 1e-15);
        let j0 = joint_small_loss(&mut g, l, r, 0.0).unwrap();
        assert_eq!(g.scalar_value(j0), 1.0);
    }

    #[test]
    fn large_loss_with_defaults() {
        let mut g = Graph::new();
        let l = g.constant(&[], vec![1.0]).unwrap();
        let f = g.constant(&[], vec![0.5]).unwrap();
        let b = g.constant(&[], vec![2.0]).unwrap();
        let w = LossWeights::default();
        let total = large_client_loss(&mut g, l, Some(f), Some(b), w.lambda_f, w.lambda_b).unwrap();
        assert!((g.scalar_value(total) - (1.0 + 0.5 + 0.2 * 2.0)).abs() < 1e-15);
        let local = large_client_loss(&mut g, l, Some(f), Some(b), 0.0, 0.0).unwrap();
        assert_eq!(g.scalar_value(local), 1.0);
    }

    #[test]
    fn top_omega_cases() {
        let t = Tensor::from_rows(&[vec![0.1, 0.9, 0.5]]);
        assert_eq!(top_omega(&t, 1).unwrap(), vec![vec![1]]);
        let t = Tensor::from_rows(&[vec![2.0, 1.0, 0.0, -1.0]]);
        assert_eq!(top_omega(&t, 3).unwrap(), vec![vec![0, 1, 2]]);
        let t = Tensor::from_rows(&[vec![0.5; 4]]);
        assert_eq!(top_omega(&t, 2).unwrap(), vec![vec![0, 1]]);
        assert!(top_omega(&t, 0).is_err());
        assert!(top_omega(&t, 5).is_err());
    }

    #[test]
    fn ranking_kd_hand_value() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![2.0, 1.0, 0.0]]);
        let l = ranking_kd(&mut g, z, &[vec![0]]).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e * e / (e * e + e + 1.0)).ln();
        assert!((g.scalar_value(l) - expect).abs() < 1e-14);
        assert!((g.scalar_value(l) - 0.4076).abs() < 5e-5);
    }

    #[test]
    fn ranking_kd_rejects_empty_set() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![2.0, 1.0]]);
        assert!(ranking_kd(&mut g, z, &[vec![]]).is_err());
        assert!(ranking_kd(&mut g, z, &[vec![2]]).is_err());
    }

    #[test]
    fn guidance_single_api_mixture_is_the_oracle() {
        let alpha = ApiMixture::new(3, 1);
        assert_eq!(alpha.weights(1), vec![1.0]);
    }

    #[test]
    fn guidance_two_api_uniform_mixture_target() {
        // α = [0.5, 0.5] over one-hot oracles gives a [0.5, 0.5] target, so
        // the KL term equals KL([.5,.5] ‖ softmax(z)).
        let oracle = OracleBatch {
            dists: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            classes: 2,
        };
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.3, -0.2]]);
        let a = g.param(&Tensor::zeros(&[1, 2]));
        let with = guidance_loss(&mut g, z, &[0], Some(&oracle), Some(a), 1.0).unwrap();
        let ce = cross_entropy(&mut g, z, &[0]).unwrap();
        let kl = kl_divergence(&mut g, &Tensor::from_rows(&[vec![0.5, 0.5]]), z).unwrap();
        let expect = g.scalar_value(ce) + g.scalar_value(kl);
        assert!((g.scalar_value(with) - expect).abs() < 1e-14);
    }

    #[test]
    fn guidance_without_oracles_needs_zero_lambda() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[vec![0.3, -0.2]]);
        assert!(matches!(
            guidance_loss(&mut g, z, &[1], None, None, 0.1),
            Err(FedHelpError::Config { .. })
        ));
        let r = guidance_loss(&mut g, z, &[1], None, None, 0.0).unwrap();
        let ce = cross_entropy(&mut g, z, &[1]).unwrap();
        assert_eq!(g.scalar_value(r).to_bits(), g.scalar_value(ce).to_bits());
    }

    #[test]
    fn weight_map_values() {
        let p = WeightMapParams {
            beta0: 10.0,
            sigma: 5.0,
            class_balance: vec![1.0, 1.0],
        };
        let w = weight_map(&[1], &[0.0], &[0.0], &p).unwrap();
        assert_eq!(w, vec![11.0]);
        let w = weight_map(&[0], &[4.0], &[6.0], &p).unwrap();
        assert!((w[0] - (1.0 + 10.0 * (-2f64).exp())).abs() < 1e-12);
        assert!((w[0] - 2.3534).abs() < 1e-4);
        let w = weight_map(&[0], &[500.0], &[500.0], &p).unwrap();
        assert_eq!(w, vec![1.0]);
        let bad = WeightMapParams { sigma: 0.0, ..p };
        assert!(weight_map(&[0], &[0.0], &[0.0], &bad).is_err());
    }

    #[test]
    fn class_balance_has_unit_mean() {
        let mask = [0u8, 0, 0, 1];
        let w = class_balance(&mask);
        let mean: f64 = mask.iter().map(|&m| w[m as usize]).sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-15);
        assert!(w[1] > w[0]);
    }

    #[test]
    fn weighted_ce_masking_picks_single_pixel() {
        let z = Tensor::new(vec![1, 2, 2, 2], vec![0.1, 0.5, -1.0, 2.0, 0.3, 0.3, 1.0, -1.0])
            .unwrap();
        let mask = [1, 0, 1, 0];
        let mut g = Graph::new();
        let zv = g.param(&z);
        let one = weighted_pixel_ce(&mut g, zv, &mask, &[0.0, 3.0, 0.0, 0.0]).unwrap();
        let flat = g.reshape(zv, &[4, 2]).unwrap();
        let rows = cross_entropy_rows(&mut g, flat, &mask).unwrap();
        assert!((g.scalar_value(one) - g.value(rows)[1]).abs() < 1e-15);
        let uniform = weighted_pixel_ce(&mut g, zv, &mask, &[1.0; 4]).unwrap();
        let mean = cross_entropy(&mut g, zv, &mask).unwrap();
        assert!((g.scalar_value(uniform) - g.scalar_value(mean)).abs() < 1e-15);
    }
}
