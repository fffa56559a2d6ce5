//! Held-out accuracy, the exact Wilcoxon signed-rank test and a
//! finite-difference gradient oracle.

use rand::Rng;

use crate::cp_model::{entry_loss, EntryGradients, FactorMatrices, FactorMatrix, LossParams, Mode};
use crate::error::{PlftError, Result};
use crate::rng;
use crate::tensor_store::{Entry, Origin, TensorDims};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPair {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// RMSE and MAE of the model's predictions over `holdout`.
pub fn evaluate(factors: &FactorMatrices, holdout: &[Entry]) -> Result<MetricPair> {
    if holdout.is_empty() {
        return Err(PlftError::EmptyHoldout);
    }
    let (mut sq, mut abs) = (0.0, 0.0);
    for e in holdout {
        let r = e.value - factors.predict(e.i, e.j, e.k)?;
        sq += r * r;
        abs += r.abs();
    }
    let n = holdout.len();
    Ok(MetricPair {
        rmse: (sq / n as f64).sqrt(),
        mae: abs / n as f64,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonReport {
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_effective: usize,
}

/// Exact two-sided Wilcoxon signed-rank test on the differences `a − b`.
///
/// Zero differences are dropped and tied magnitudes get average ranks. The
/// p-value is `P(|W⁺ − n(n+1)/4| ≥ |w⁺ − n(n+1)/4|)` under the null where
/// every sign assignment of the ranks is equally likely, computed exactly.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonReport> {
    if a.len() != b.len() {
        return Err(PlftError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(PlftError::EmptyHoldout);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(PlftError::NonFinite("paired values"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(PlftError::AllZeroDifferences);
    }
    let ranks = doubled_ranks(&diffs);
    let n = diffs.len();
    let w_plus2: u64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2 = (n * (n + 1)) as u64;
    let p_value = exact_two_sided_p(&ranks, w_plus2);
    Ok(WilcoxonReport {
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: (total2 - w_plus2) as f64 / 2.0,
        p_value,
        n_effective: n,
    })
}

/// Twice the (average) rank of each |d|, so ties stay integral.
pub(crate) fn doubled_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&x, &y| diffs[x].abs().total_cmp(&diffs[y].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut start = 0;
    while start < order.len() {
        let mag = diffs[order[start]].abs();
        let mut end = start;
        while end + 1 < order.len() && diffs[order[end + 1]].abs() == mag {
            end += 1;
        }
        // positions start..=end hold 1-based ranks start+1 ..= end+1
        let doubled = (start + 1 + end + 1) as u64;
        for &idx in &order[start..=end] {
            ranks[idx] = doubled;
        }
        start = end + 1;
    }
    ranks
}

fn exact_two_sided_p(ranks: &[u64], observed: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    // twice the centre of the null distribution is `total`
    let dev = (2 * observed).abs_diff(total);
    let extreme = |s: usize| (2 * s as u64).abs_diff(total) >= dev;
    let p = if ranks.len() <= 120 {
        let counts = subset_sum_counts(ranks, total as usize);
        let hits: u128 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| extreme(*s))
            .map(|(_, c)| *c)
            .sum();
        hits as f64 / (ranks.len() as f64).exp2()
    } else {
        subset_sum_probs(ranks, total as usize)
            .iter()
            .enumerate()
            .filter(|(s, _)| extreme(*s))
            .map(|(_, p)| *p)
            .sum()
    };
    p.min(1.0)
}

fn subset_sum_counts(ranks: &[u64], total: usize) -> Vec<u128> {
    let mut counts = vec![0u128; total + 1];
    counts[0] = 1;
    for &r in ranks {
        let r = r as usize;
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

fn subset_sum_probs(ranks: &[u64], total: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; total + 1];
    probs[0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=total).rev() {
            let with = if s >= r { probs[s - r] } else { 0.0 };
            probs[s] = 0.5 * (probs[s] + with);
        }
    }
    probs
}

/// Central-difference gradient of one entry's loss with respect to the
/// factor rows it touches.
pub fn finite_diff_gradient(
    factors: &FactorMatrices,
    entry: &Entry,
    params: LossParams,
    h: f64,
) -> Result<EntryGradients> {
    if !(h.is_finite() && h > 0.0) {
        return Err(PlftError::InvalidConfig(format!(
            "step size must be positive, got {h}"
        )));
    }
    factors.dims().check(entry.i, entry.j, entry.k)?;
    let mut probe = factors.clone();
    let mut numeric = |mode: Mode, row: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(factors.rank());
        for r in 0..factors.rank() {
            let base = factors.matrix(mode).get(row, r);
            probe.matrix_mut(mode).set(row, r, base + h);
            let plus = entry_loss(&probe, entry, params)?;
            probe.matrix_mut(mode).set(row, r, base - h);
            let minus = entry_loss(&probe, entry, params)?;
            probe.matrix_mut(mode).set(row, r, base);
            out.push((plus - minus) / (2.0 * h));
        }
        Ok(out)
    };
    Ok(EntryGradients {
        u: numeric(Mode::U, entry.i)?,
        s: numeric(Mode::S, entry.j)?,
        t: numeric(Mode::T, entry.k)?,
    })
}

/// Denominator floor for relative errors, so that components that are
/// zero up to rounding do not blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &EntryGradients, numeric: &EntryGradients) -> f64 {
    [Mode::U, Mode::S, Mode::T]
        .iter()
        .flat_map(|&m| analytic.get(m).iter().zip(numeric.get(m)))
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// One randomized gradient-check problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckInstance {
    pub factors: FactorMatrices,
    pub entry: Entry,
    pub params: LossParams,
}

/// Draws instance `index` of the suite: dims up to 6×6×3, rank up to 4,
/// λ ∈ {0, 0.01}, α ∈ {1, 1.5}, known or synthetic entry.
pub fn gradcheck_instance(seed: u64, index: usize) -> GradCheckInstance {
    let mut rng = rng::seeded(rng::mix(seed, index as u64), rng::SALT_GRADCHECK);
    let dims = TensorDims {
        i_size: rng.random_range(1..=6),
        j_size: rng.random_range(1..=6),
        k_size: rng.random_range(1..=3),
    };
    let rank = rng.random_range(1..=4);
    let mut matrix = |rows: usize| {
        let data = (0..rows * rank)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FactorMatrix::from_vec(rows, rank, data).expect("shape")
    };
    let factors = FactorMatrices {
        u: matrix(dims.i_size),
        s: matrix(dims.j_size),
        t: matrix(dims.k_size),
    };
    let lambda = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    let alpha = if rng.random_bool(0.5) { 1.0 } else { 1.5 };
    let origin = if rng.random_bool(0.5) {
        Origin::Known
    } else {
        Origin::Synthetic
    };
    let entry = Entry {
        i: rng.random_range(0..dims.i_size),
        j: rng.random_range(0..dims.j_size),
        k: rng.random_range(0..dims.k_size),
        value: rng.random_range(-1.0..2.0),
        origin,
    };
    GradCheckInstance {
        factors,
        entry,
        params: LossParams { lambda, alpha },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

pub type GradientFn = dyn Fn(&FactorMatrices, &Entry, LossParams) -> Result<EntryGradients>;

/// Compares `gradient` against central differences on `instances` seeded
/// random problems.
pub fn gradient_check_suite(
    instances: usize,
    seed: u64,
    h: f64,
    threshold: f64,
    gradient: &GradientFn,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        instances,
        max_rel_error: 0.0,
        worst_instance: 0,
        threshold,
    };
    for index in 0..instances {
        let inst = gradcheck_instance(seed, index);
        let analytic = gradient(&inst.factors, &inst.entry, inst.params)?;
        let numeric = finite_diff_gradient(&inst.factors, &inst.entry, inst.params, h)?;
        let err = max_relative_error(&analytic, &numeric);
        // NaN must count as a failure
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_instance = index;
        }
    }
    Ok(report)
}
