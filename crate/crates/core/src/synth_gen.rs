//! Seeded synthetic sparse tensors with a known low-rank ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cp_model::{FactorMatrices, FactorMatrix, DEFAULT_DENSE_CAP};
use crate::error::{PlftError, Result};
use crate::rng;
use crate::tensor_store::{Entry, SparseTensor, TensorDims};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub dims: TensorDims,
    pub true_rank: usize,
    /// Fraction of cells observed, in `(0, 1]`.
    pub density: f64,
    pub noise_sigma: f64,
    /// Target range of the noiseless values.
    pub value_range: (f64, f64),
    pub seed: u64,
}

impl SynthSpec {
    /// Number of observed cells, `floor(density * cells)`.
    pub fn observed_count(&self) -> usize {
        (self.density * self.dims.cells() as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PlftError::InvalidConfig(msg));
        if self.true_rank == 0 {
            return Err(PlftError::InvalidRank);
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density must lie in (0, 1], got {}", self.density));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            ));
        }
        let (lo, hi) = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!(
                "value range must satisfy low < high, got ({lo}, {hi})"
            ));
        }
        if self.observed_count() < 3 {
            return bad(format!(
                "density {} keeps only {} of {} cells; need at least 3",
                self.density,
                self.observed_count(),
                self.dims.cells()
            ));
        }
        Ok(())
    }
}

/// Draws positive ground-truth factors, masks `floor(density * cells)` cells
/// uniformly without replacement and adds Gaussian noise.
///
/// The noiseless values are mapped affinely onto `value_range`: `U` is scaled
/// so the largest value spans the range, and a non-zero lower end is added as
/// one extra constant rank-one component (`u = low`, `s = t = 1`). The
/// returned ground truth therefore has `true_rank` columns when `low == 0`
/// and `true_rank + 1` otherwise.
pub fn generate(spec: &SynthSpec) -> Result<(SparseTensor, FactorMatrices)> {
    spec.validate()?;
    let dims = spec.dims;
    let rank = spec.true_rank;
    let (low, high) = spec.value_range;

    let mut rng = rng::seeded(spec.seed, rng::SALT_SYNTH_FACTORS);
    let mut positive = |rows: usize| -> Vec<f64> {
        (0..rows * rank)
            .map(|_| 1.0 - rng.random::<f64>())
            .collect()
    };
    let mut u = positive(dims.i_size);
    let s = positive(dims.j_size);
    let t = positive(dims.k_size);

    let raw = FactorMatrices::new(
        FactorMatrix::from_vec(dims.i_size, rank, u.clone())?,
        FactorMatrix::from_vec(dims.j_size, rank, s.clone())?,
        FactorMatrix::from_vec(dims.k_size, rank, t.clone())?,
    )?;
    let scale = (high - low) / max_value(&raw);
    for x in &mut u {
        *x *= scale;
    }

    let with_offset = |mut data: Vec<f64>, rows: usize, fill: f64| -> Vec<f64> {
        if low == 0.0 {
            return data;
        }
        let mut out = Vec::with_capacity(rows * (rank + 1));
        for row in data.chunks_mut(rank) {
            out.extend_from_slice(row);
            out.push(fill);
        }
        out
    };
    let gt_rank = if low == 0.0 { rank } else { rank + 1 };
    let ground_truth = FactorMatrices::new(
        FactorMatrix::from_vec(dims.i_size, gt_rank, with_offset(u, dims.i_size, low))?,
        FactorMatrix::from_vec(dims.j_size, gt_rank, with_offset(s, dims.j_size, 1.0))?,
        FactorMatrix::from_vec(dims.k_size, gt_rank, with_offset(t, dims.k_size, 1.0))?,
    )?;

    let cells = dims.cells();
    let mut mask_rng = rng::seeded(spec.seed, rng::SALT_SYNTH_MASK);
    let mut picked =
        rand::seq::index::sample(&mut mask_rng, cells, spec.observed_count()).into_vec();
    picked.sort_unstable();

    let mut noise_rng = rng::seeded(spec.seed, rng::SALT_SYNTH_NOISE);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| PlftError::InvalidConfig(e.to_string()))?;
    let entries = picked.into_iter().map(|cell| {
        let k = cell % dims.k_size;
        let j = (cell / dims.k_size) % dims.j_size;
        let i = cell / (dims.k_size * dims.j_size);
        let mut value = ground_truth.predict_unchecked(i, j, k);
        if spec.noise_sigma > 0.0 {
            value += noise.sample(&mut noise_rng);
        }
        Entry::known(i, j, k, value)
    });
    let observed = SparseTensor::from_entries(dims, entries)?;
    Ok((observed, ground_truth))
}

// Exact maximum for small tensors, otherwise the column-wise upper bound.
fn max_value(f: &FactorMatrices) -> f64 {
    let dims = f.dims();
    if dims.cells() <= DEFAULT_DENSE_CAP {
        let mut best = f64::MIN;
        for i in 0..dims.i_size {
            for j in 0..dims.j_size {
                for k in 0..dims.k_size {
                    best = best.max(f.predict_unchecked(i, j, k));
                }
            }
        }
        best
    } else {
        let col_max =
            |m: &FactorMatrix, r: usize| (0..m.rows()).map(|i| m.get(i, r)).fold(0.0, f64::max);
        (0..f.rank())
            .map(|r| col_max(&f.u, r) * col_max(&f.s, r) * col_max(&f.t, r))
            .sum()
    }
}
