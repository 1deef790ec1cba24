//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Which coordinates of each parameter tensor get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_tensor` coordinates per tensor, chosen with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `f` must be deterministic: dropout off, fixed seeds.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol };
    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.shape(), analytic[pi].shape(), "gradient shape for parameter {pi}");
        let n = p.numel();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut v = sample(rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[pi].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}
