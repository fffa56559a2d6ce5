//! Prediction sampling: choose blank cells, predict them, squash the
//! predictions into the data range and emit them as synthetic entries.
//!
//! Target selection walks the relation slices row by row (`k` outer, `i`
//! inner) in round-robin, taking one cell per row visit:
//! - a row with two or more present cells yields the floor-midpoint of its
//!   leftmost adjacent occupied pair that is at least two columns apart;
//! - otherwise (or once no such pair is left) a seeded uniform blank column.
//!
//! Cells chosen earlier in the same plan count as occupied, so repeated
//! visits bisect the gaps between known cells.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cp_model::FactorMatrices;
use crate::error::{PlftError, Result};
use crate::rng;
use crate::tensor_store::{Entry, Key, SparseTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueBounds {
    pub y_min: f64,
    pub y_max: f64,
}

impl ValueBounds {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !y_min.is_finite() || !y_max.is_finite() {
            return Err(PlftError::NonFinite("value bounds"));
        }
        if y_min > y_max {
            return Err(PlftError::InvalidConfig(format!(
                "y_min {y_min} exceeds y_max {y_max}"
            )));
        }
        Ok(Self { y_min, y_max })
    }

    /// Bounds of the tensor's known entries.
    pub fn from_tensor(tensor: &SparseTensor) -> Result<Self> {
        let (lo, hi) = tensor.value_bounds()?;
        Self::new(lo, hi)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a raw prediction into the data range:
/// below `y_min` → `y_min + σ(ŷ)`, above `y_max` → `y_max · σ(ŷ)`,
/// otherwise unchanged.
pub fn activate(y_hat: f64, bounds: ValueBounds) -> Result<f64> {
    if !y_hat.is_finite() {
        return Err(PlftError::NonFinite("prediction"));
    }
    Ok(if y_hat < bounds.y_min {
        bounds.y_min + sigmoid(y_hat)
    } else if y_hat > bounds.y_max {
        bounds.y_max * sigmoid(y_hat)
    } else {
        y_hat
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlan {
    /// `(i, j, k)` coordinates in selection order.
    pub targets: Vec<Key>,
    pub requested: usize,
    pub fulfilled: usize,
}

pub fn select_targets(tensor: &SparseTensor, count: usize, seed: u64) -> SamplePlan {
    select_targets_excluding(tensor, count, seed, &HashSet::new())
}

/// Like [`select_targets`], but never picks a cell in `blocked` (held-out
/// coordinates).
pub fn select_targets_excluding(
    tensor: &SparseTensor,
    count: usize,
    seed: u64,
    blocked: &HashSet<Key>,
) -> SamplePlan {
    let dims = tensor.dims();
    let mut rng = rng::seeded(seed, rng::SALT_SAMPLE);
    let mut rows: Vec<RowCursor> = Vec::with_capacity(dims.k_size * dims.i_size);
    for k in 0..dims.k_size {
        for i in 0..dims.i_size {
            let present = tensor.slice_row(k, i).expect("row within dims");
            rows.push(RowCursor {
                k,
                i,
                present: present.len(),
                occupied: present.to_vec(),
                cursor: 0,
            });
        }
    }

    let mut targets = Vec::with_capacity(count);
    while targets.len() < count && !rows.is_empty() {
        rows.retain_mut(|row| {
            if targets.len() >= count {
                return true;
            }
            match row.next_target(dims.j_size, blocked, &mut rng) {
                Some(j) => {
                    targets.push((row.i, j, row.k));
                    true
                }
                None => false,
            }
        });
    }
    SamplePlan {
        fulfilled: targets.len(),
        requested: count,
        targets,
    }
}

struct RowCursor {
    k: usize,
    i: usize,
    present: usize,
    // present columns plus columns already taken or rejected, sorted
    occupied: Vec<usize>,
    // every adjacent pair left of this position is at most one column apart
    cursor: usize,
}

impl RowCursor {
    fn next_target(
        &mut self,
        j_size: usize,
        blocked: &HashSet<Key>,
        rng: &mut ChaCha8Rng,
    ) -> Option<usize> {
        if self.present >= 2 {
            while let Some(mid) = self.take_midpoint() {
                if !blocked.contains(&(self.i, mid, self.k)) {
                    return Some(mid);
                }
            }
        }
        loop {
            let free = j_size - self.occupied.len();
            if free == 0 {
                return None;
            }
            let j = self.take_random_blank(free, rng);
            if !blocked.contains(&(self.i, j, self.k)) {
                return Some(j);
            }
        }
    }

    fn take_midpoint(&mut self) -> Option<usize> {
        let occ = &self.occupied;
        let p = (self.cursor..occ.len().saturating_sub(1)).find(|&p| occ[p + 1] - occ[p] >= 2)?;
        self.cursor = p;
        let mid = (occ[p] + occ[p + 1]) / 2;
        self.occupied.insert(p + 1, mid);
        Some(mid)
    }

    fn take_random_blank(&mut self, free: usize, rng: &mut ChaCha8Rng) -> usize {
        // the `nth`-th unoccupied column, counting from 0
        let nth = rng.random_range(0..free);
        let mut col = nth;
        let mut pos = 0;
        while pos < self.occupied.len() && self.occupied[pos] <= col {
            col += 1;
            pos += 1;
        }
        self.occupied.insert(pos, col);
        col
    }
}

/// Predicts each planned cell and clamps it with [`activate`].
pub fn generate_synthetic(
    factors: &FactorMatrices,
    plan: &SamplePlan,
    bounds: ValueBounds,
) -> Result<Vec<Entry>> {
    plan.targets
        .iter()
        .map(|&(i, j, k)| {
            let y_hat = factors.predict(i, j, k)?;
            Ok(Entry::synthetic(i, j, k, activate(y_hat, bounds)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp_model::{FactorMatrix, Mode};
    use crate::tensor_store::TensorDims;
    use proptest::prelude::*;

    fn dims(i: usize, j: usize, k: usize) -> TensorDims {
        TensorDims::new(i, j, k).unwrap()
    }

    fn tensor(d: TensorDims, cells: &[(usize, usize, usize)]) -> SparseTensor {
        SparseTensor::from_entries(d, cells.iter().map(|&(i, j, k)| Entry::known(i, j, k, 1.0)))
            .unwrap()
    }

    fn b(lo: f64, hi: f64) -> ValueBounds {
        ValueBounds::new(lo, hi).unwrap()
    }

    #[test]
    fn activate_spot_values() {
        assert_eq!(activate(3.0, b(1.0, 5.0)).unwrap(), 3.0);
        assert!((activate(0.0, b(1.0, 5.0)).unwrap() - 1.5).abs() < 1e-15);
        let hi = activate(20.0, b(1.0, 5.0)).unwrap();
        assert!((hi - 5.0 / (1.0 + (-20f64).exp())).abs() < 1e-12);
        assert!((hi - 4.99999999).abs() < 1e-8);
        let lo = activate(-10.0, b(1.0, 5.0)).unwrap();
        assert!((lo - 1.0000454).abs() < 1e-7);
        assert!(activate(f64::INFINITY, b(1.0, 5.0)).is_err());
    }

    #[test]
    fn bounds_validation() {
        assert!(ValueBounds::new(2.0, 1.0).is_err());
        assert!(ValueBounds::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn midpoint_between_known_cells() {
        let t = tensor(dims(1, 5, 1), &[(0, 0, 0), (0, 4, 0)]);
        let plan = select_targets(&t, 1, 0);
        assert_eq!(plan.targets, vec![(0, 2, 0)]);
        assert_eq!((plan.requested, plan.fulfilled), (1, 1));

        // later visits bisect the remaining gaps
        let plan = select_targets(&t, 3, 0);
        assert_eq!(plan.targets, vec![(0, 2, 0), (0, 1, 0), (0, 3, 0)]);
    }

    #[test]
    fn full_tensor_has_no_targets() {
        let cells: Vec<_> = (0..4).map(|n| (n / 2, n % 2, 0)).collect();
        let t = tensor(dims(2, 2, 1), &cells);
        let plan = select_targets(&t, 10, 1);
        assert_eq!(plan.fulfilled, 0);
        assert!(plan.targets.is_empty());
    }

    #[test]
    fn empty_row_random_is_seeded() {
        let t = tensor(dims(1, 50, 1), &[]);
        let a = select_targets(&t, 1, 17);
        assert_eq!(a, select_targets(&t, 1, 17));
        assert_eq!(a.fulfilled, 1);
        let distinct: HashSet<_> = (0..20u64)
            .map(|s| select_targets(&t, 1, s).targets[0])
            .collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn round_robin_across_rows() {
        // rows (k=0,i=0), (k=0,i=1), (k=1,i=0), (k=1,i=1)
        let t = tensor(dims(2, 9, 2), &[(0, 0, 0), (0, 8, 0), (1, 0, 1), (1, 8, 1)]);
        let plan = select_targets(&t, 4, 5);
        let rows: Vec<(usize, usize)> = plan.targets.iter().map(|&(i, _, k)| (k, i)).collect();
        assert_eq!(rows, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(plan.targets[0], (0, 4, 0));
        assert_eq!(plan.targets[3], (1, 4, 1));
    }

    #[test]
    fn blocked_cells_are_skipped() {
        let t = tensor(dims(1, 5, 1), &[(0, 0, 0), (0, 4, 0)]);
        let blocked: HashSet<Key> = [(0, 2, 0)].into_iter().collect();
        let plan = select_targets_excluding(&t, 3, 0, &blocked);
        assert_eq!(plan.targets, vec![(0, 1, 0), (0, 3, 0)]);
        assert_eq!(plan.fulfilled, 2);
    }

    #[test]
    fn short_supply_only_when_blanks_run_out() {
        let t = tensor(dims(2, 3, 1), &[(0, 0, 0), (0, 2, 0)]);
        let plan = select_targets(&t, 100, 3);
        assert_eq!(plan.fulfilled, 4);
        let all: HashSet<_> = plan.targets.iter().copied().collect();
        assert_eq!(all.len(), 4);
    }

    fn factors_with(value_at: impl Fn(usize) -> f64, d: TensorDims) -> FactorMatrices {
        // rank 1 with s = t = 1 so that prediction(i, j, k) = u_i
        let mut f = FactorMatrices::zeros(d, 1);
        f.matrix_mut(Mode::S).as_mut_slice().fill(1.0);
        f.matrix_mut(Mode::T).as_mut_slice().fill(1.0);
        let u: Vec<f64> = (0..d.i_size).map(value_at).collect();
        f.u = FactorMatrix::from_vec(d.i_size, 1, u).unwrap();
        f
    }

    #[test]
    fn synthetic_generation() {
        let d = dims(3, 4, 1);
        let f = factors_with(|i| [2.5, -3.0, 9.0][i], d);
        let bounds = b(1.0, 5.0);
        let empty = SamplePlan {
            targets: vec![],
            requested: 0,
            fulfilled: 0,
        };
        assert!(generate_synthetic(&f, &empty, bounds).unwrap().is_empty());

        let plan = SamplePlan {
            targets: vec![(0, 1, 0)],
            requested: 1,
            fulfilled: 1,
        };
        let omega = generate_synthetic(&f, &plan, bounds).unwrap();
        assert_eq!(omega, vec![Entry::synthetic(0, 1, 0, 2.5)]);

        let plan = SamplePlan {
            targets: vec![(2, 0, 0), (1, 3, 0), (0, 2, 0)],
            requested: 3,
            fulfilled: 3,
        };
        let omega = generate_synthetic(&f, &plan, bounds).unwrap();
        assert_eq!(omega.len(), 3);
        for (e, &(i, j, k)) in omega.iter().zip(&plan.targets) {
            assert_eq!((e.i, e.j, e.k), (i, j, k));
            assert!(e.is_synthetic());
            let v = e.value;
            assert!(
                (v > 0.0 && v < bounds.y_min + 1.0) || (bounds.y_min..=bounds.y_max).contains(&v)
            );
        }

        let bad = SamplePlan {
            targets: vec![(3, 0, 0)],
            requested: 1,
            fulfilled: 1,
        };
        assert!(generate_synthetic(&f, &bad, bounds).is_err());
    }

    proptest! {
        #[test]
        fn activate_ranges(y in -30.0f64..30.0, lo in -10.0f64..10.0, width in 0.0f64..10.0) {
            let bounds = b(lo, lo + width);
            let out = activate(y, bounds).unwrap();
            prop_assert!(out.is_finite());
            if (bounds.y_min..=bounds.y_max).contains(&y) {
                prop_assert_eq!(out, y);
            } else if y < bounds.y_min {
                prop_assert!(out > bounds.y_min && out < bounds.y_min + 1.0);
            } else if bounds.y_max > 0.0 {
                prop_assert!(out > bounds.y_max / 2.0 && out < bounds.y_max);
            }
        }

        #[test]
        fn targets_unique_and_blank(
            cells in prop::collection::hash_set((0usize..4, 0usize..7, 0usize..2), 0..30),
            count in 0usize..80,
            seed in any::<u64>(),
        ) {
            let cells: Vec<_> = cells.into_iter().collect();
            let t = tensor(dims(4, 7, 2), &cells);
            let plan = select_targets(&t, count, seed);
            let unique: HashSet<_> = plan.targets.iter().copied().collect();
            prop_assert_eq!(unique.len(), plan.targets.len());
            prop_assert!(plan.targets.iter().all(|&(i, j, k)| !t.contains(i, j, k)));
            prop_assert!(plan.fulfilled <= plan.requested);
            let blanks = 4 * 7 * 2 - t.len();
            prop_assert_eq!(plan.fulfilled, count.min(blanks));
        }
    }
}
