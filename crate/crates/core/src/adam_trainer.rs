//! Per-element Adam training of one cascade layer.
//!
//! One epoch is three sweeps over every entry of the layer's input tensor,
//! in a seeded shuffled order shared by the three sweeps. The first sweep
//! updates only `U`, the second only `T`, the third only `S` (configurable via
//! [`TrainConfig::pass_order`]). Each visited entry updates the `R` elements of
//! one factor row; every element carries its own Adam moments and step count.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cp_model::{self, init_factors, FactorMatrices, FactorMatrix, LossParams, Mode};
use crate::error::{PlftError, Result};
use crate::rng;
use crate::tensor_store::{Entry, SparseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
    /// Clamp factor elements at zero after every update.
    pub nonneg: bool,
    #[serde(with = "pass_order_serde")]
    pub pass_order: [Mode; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            tau: 1e-8,
            lambda: 0.01,
            alpha: 1.5,
            max_epochs: 1000,
            tol: 1e-5,
            seed: 0,
            nonneg: false,
            pass_order: [Mode::U, Mode::T, Mode::S],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PlftError::InvalidConfig(msg));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        let mut seen = self.pass_order.to_vec();
        seen.sort_by_key(|m| *m as u8);
        seen.dedup();
        if seen.len() != 3 {
            return bad(format!(
                "pass order must visit U, S and T once each, got {:?}",
                self.pass_order
            ));
        }
        self.loss_params().map(|_| ())
    }

    pub fn loss_params(&self) -> Result<LossParams> {
        LossParams::new(self.lambda, self.alpha)
    }
}

mod pass_order_serde {
    use super::Mode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(order: &[Mode; 3], ser: S) -> Result<S::Ok, S::Error> {
        let s: String = order
            .iter()
            .map(|m| match m {
                Mode::U => 'U',
                Mode::S => 'S',
                Mode::T => 'T',
            })
            .collect();
        ser.serialize_str(&s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<[Mode; 3], D::Error> {
        let s = String::deserialize(de)?;
        super::parse_pass_order(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a pass order such as `"UTS"`.
pub fn parse_pass_order(s: &str) -> std::result::Result<[Mode; 3], String> {
    let modes: Vec<Mode> = s
        .chars()
        .map(|c| match c.to_ascii_uppercase() {
            'U' => Ok(Mode::U),
            'S' => Ok(Mode::S),
            'T' => Ok(Mode::T),
            other => Err(format!("unknown factor {other:?} in pass order")),
        })
        .collect::<std::result::Result<_, _>>()?;
    <[Mode; 3]>::try_from(modes)
        .map_err(|_| format!("pass order needs exactly three factors: {s:?}"))
}

/// Adam moment estimates and step counts for one factor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMoments {
    pub m: FactorMatrix,
    pub v: FactorMatrix,
    pub steps: Vec<u64>,
}

impl ModeMoments {
    fn for_matrix(f: &FactorMatrix) -> Self {
        Self {
            m: FactorMatrix::zeros(f.rows(), f.rank()),
            v: FactorMatrix::zeros(f.rows(), f.rank()),
            steps: vec![0; f.rows() * f.rank()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub u: ModeMoments,
    pub s: ModeMoments,
    pub t: ModeMoments,
}

impl MomentState {
    pub fn new(factors: &FactorMatrices) -> Self {
        Self {
            u: ModeMoments::for_matrix(&factors.u),
            s: ModeMoments::for_matrix(&factors.s),
            t: ModeMoments::for_matrix(&factors.t),
        }
    }

    pub fn mode(&self, mode: Mode) -> &ModeMoments {
        match mode {
            Mode::U => &self.u,
            Mode::S => &self.s,
            Mode::T => &self.t,
        }
    }

    fn mode_mut(&mut self, mode: Mode) -> &mut ModeMoments {
        match mode {
            Mode::U => &mut self.u,
            Mode::S => &mut self.s,
            Mode::T => &mut self.t,
        }
    }

    pub fn matches(&self, factors: &FactorMatrices) -> bool {
        [Mode::U, Mode::S, Mode::T].iter().all(|&mode| {
            let f = factors.matrix(mode);
            let mm = self.mode(mode);
            mm.m.rows() == f.rows()
                && mm.m.rank() == f.rank()
                && mm.v.rows() == f.rows()
                && mm.v.rank() == f.rank()
                && mm.steps.len() == f.rows() * f.rank()
        })
    }
}

/// One Adam step for a single scalar; `step` is that element's 1-based
/// update count.
pub fn adam_update_element(
    theta: f64,
    grad: f64,
    m_prev: f64,
    v_prev: f64,
    step: u64,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    if step == 0 {
        return Err(PlftError::InvalidConfig(
            "Adam step count starts at 1".into(),
        ));
    }
    if ![theta, grad, m_prev, v_prev].iter().all(|x| x.is_finite()) {
        return Err(PlftError::NonFinite("Adam input"));
    }
    Ok(adam_step(theta, grad, m_prev, v_prev, step, cfg))
}

#[inline]
fn adam_step(
    theta: f64,
    grad: f64,
    m_prev: f64,
    v_prev: f64,
    step: u64,
    cfg: &TrainConfig,
) -> (f64, f64, f64) {
    let m = cfg.beta1 * m_prev + (1.0 - cfg.beta1) * grad;
    let v = cfg.beta2 * v_prev + (1.0 - cfg.beta2) * grad * grad;
    let m_hat = m / bias_correction(cfg.beta1, step);
    let v_hat = v / bias_correction(cfg.beta2, step);
    (theta - cfg.eta * m_hat / (v_hat.sqrt() + cfg.tau), m, v)
}

#[inline]
fn bias_correction(beta: f64, step: u64) -> f64 {
    1.0 - beta.powi(step.min(i32::MAX as u64) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub factors: FactorMatrices,
    pub epochs_run: usize,
    pub train_rmse_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
}

/// Trains fresh factors (seeded from `cfg.seed`) on every entry of `tensor`.
pub fn train_layer(tensor: &SparseTensor, rank: usize, cfg: &TrainConfig) -> Result<LayerResult> {
    train_layer_traced(tensor, rank, cfg, &mut |_| {})
}

pub fn train_layer_traced(
    tensor: &SparseTensor,
    rank: usize,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(EpochRecord),
) -> Result<LayerResult> {
    if rank == 0 {
        return Err(PlftError::InvalidRank);
    }
    if tensor.is_empty() {
        return Err(PlftError::EmptyTensor);
    }
    let init = init_factors(tensor.dims(), rank, cfg.seed)?;
    train_layer_from(tensor, init, cfg, sink)
}

/// Trains starting from the given factors (used for warm starts).
pub fn train_layer_from(
    tensor: &SparseTensor,
    mut factors: FactorMatrices,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(EpochRecord),
) -> Result<LayerResult> {
    cfg.validate()?;
    if tensor.is_empty() {
        return Err(PlftError::EmptyTensor);
    }
    if factors.dims() != tensor.dims() {
        return Err(PlftError::InvalidDims(format!(
            "factors are {} but tensor is {}",
            factors.dims(),
            tensor.dims()
        )));
    }
    let params = cfg.loss_params()?;
    let entries = tensor.entries();
    let mut moments = MomentState::new(&factors);
    let mut grad = vec![0.0; factors.rank()];
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut shuffler = rng::seeded(cfg.seed, rng::SALT_SHUFFLE);

    let mut trace = Vec::new();
    let mut converged = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffler);
        for &mode in &cfg.pass_order {
            for &idx in &order {
                let e = &entries[idx];
                cp_model::mode_gradient(&factors, e, params, mode, &mut grad);
                update_row(&mut factors, &mut moments, mode, e, &grad, cfg);
            }
        }
        let rmse = training_rmse(&factors, entries);
        if !rmse.is_finite() {
            return Err(PlftError::NonFinite("training RMSE (diverged)"));
        }
        sink(EpochRecord {
            epoch,
            train_rmse: rmse,
        });
        let prev = trace.last().copied();
        trace.push(rmse);
        if let Some(prev) = prev {
            if (rmse - prev).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    debug_assert!(moments.matches(&factors));
    Ok(LayerResult {
        factors,
        epochs_run: trace.len(),
        train_rmse_trace: trace,
        converged,
    })
}

fn update_row(
    factors: &mut FactorMatrices,
    moments: &mut MomentState,
    mode: Mode,
    e: &Entry,
    grad: &[f64],
    cfg: &TrainConfig,
) {
    let row = match mode {
        Mode::U => e.i,
        Mode::S => e.j,
        Mode::T => e.k,
    };
    let rank = grad.len();
    let theta = factors.matrix_mut(mode).row_mut(row);
    let mm = moments.mode_mut(mode);
    let m = mm.m.row_mut(row);
    let v = mm.v.row_mut(row);
    let steps = &mut mm.steps[row * rank..(row + 1) * rank];
    for r in 0..rank {
        steps[r] += 1;
        let (next, m_new, v_new) = adam_step(theta[r], grad[r], m[r], v[r], steps[r], cfg);
        theta[r] = if cfg.nonneg { next.max(0.0) } else { next };
        m[r] = m_new;
        v[r] = v_new;
    }
}

/// Unweighted RMSE over the known entries. Synthetic entries only count when
/// the tensor holds nothing else.
pub fn training_rmse(factors: &FactorMatrices, entries: &[Entry]) -> f64 {
    let any_known = entries.iter().any(|e| !e.is_synthetic());
    let (sq, n) = entries
        .iter()
        .filter(|e| !any_known || !e.is_synthetic())
        .fold((0.0, 0usize), |(sq, n), e| {
            let r = e.value - factors.predict_unchecked(e.i, e.j, e.k);
            (sq + r * r, n + 1)
        });
    (sq / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::TensorDims;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn default_hyperparameters() {
        let c = cfg();
        assert_eq!((c.beta1, c.beta2, c.tau), (0.9, 0.999, 1e-8));
        assert_eq!((c.alpha, c.lambda, c.eta), (1.5, 0.01, 0.001));
        assert_eq!((c.max_epochs, c.tol), (1000, 1e-5));
        assert_eq!(c.pass_order, [Mode::U, Mode::T, Mode::S]);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            max_epochs: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta1: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { eta: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            lambda: -1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            pass_order: [Mode::U, Mode::U, Mode::S],
            ..cfg()
        }
        .validate()
        .is_err());
        assert_eq!(
            parse_pass_order("uts").unwrap(),
            [Mode::U, Mode::T, Mode::S]
        );
        assert!(parse_pass_order("UT").is_err());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (theta, m, v) = adam_update_element(0.7, 0.0, 0.0, 0.0, 1, &cfg()).unwrap();
        assert_eq!((theta, m, v), (0.7, 0.0, 0.0));
    }

    #[test]
    fn first_step_hand_values() {
        let (theta, m, v) = adam_update_element(0.0, 0.5, 0.0, 0.0, 1, &cfg()).unwrap();
        assert!((m - 0.05).abs() < 1e-15);
        assert!((v - 0.00025).abs() < 1e-15);
        let expected_step = 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((theta + expected_step).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude_is_eta() {
        for g in [1e-3, 0.2, -4.0, 1e3] {
            let (theta, _, _) = adam_update_element(1.0, g, 0.0, 0.0, 1, &cfg()).unwrap();
            let step = 1.0 - theta;
            assert!((step.abs() - 0.001).abs() < 1e-8, "grad {g}: step {step}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn adam_rejects_bad_input() {
        assert!(adam_update_element(0.0, f64::NAN, 0.0, 0.0, 1, &cfg()).is_err());
        assert!(adam_update_element(0.0, 1.0, 0.0, 0.0, 0, &cfg()).is_err());
    }

    fn single_entry(y: f64) -> SparseTensor {
        SparseTensor::from_entries(
            TensorDims::new(1, 1, 1).unwrap(),
            [Entry::known(0, 0, 0, y)],
        )
        .unwrap()
    }

    #[test]
    fn single_entry_fit() {
        let t = single_entry(0.8);
        let c = TrainConfig {
            lambda: 0.0,
            tol: 1e-12,
            seed: 3,
            ..cfg()
        };
        let res = train_layer(&t, 1, &c).unwrap();
        let last = *res.train_rmse_trace.last().unwrap();
        assert!(last < 1e-3, "final rmse {last}");
        assert!(res.train_rmse_trace[0] > last);
        assert!(res.epochs_run <= 1000);
    }

    #[test]
    fn epoch_bound_of_one() {
        let t = single_entry(0.8);
        let res = train_layer(
            &t,
            2,
            &TrainConfig {
                max_epochs: 1,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(res.epochs_run, 1);
        assert_eq!(res.train_rmse_trace.len(), 1);
        assert!(!res.converged);
    }

    #[test]
    fn errors() {
        let t = single_entry(0.8);
        assert!(matches!(
            train_layer(&t, 0, &cfg()),
            Err(PlftError::InvalidRank)
        ));
        let empty = SparseTensor::empty(t.dims());
        assert!(matches!(
            train_layer(&empty, 1, &cfg()),
            Err(PlftError::EmptyTensor)
        ));
    }

    #[test]
    fn deterministic() {
        let entries = (0..12).map(|n| Entry::known(n % 4, n % 3, n % 2, 0.1 * n as f64));
        let t = SparseTensor::from_entries(TensorDims::new(4, 3, 2).unwrap(), entries).unwrap();
        let c = TrainConfig {
            max_epochs: 40,
            seed: 9,
            ..cfg()
        };
        let a = train_layer(&t, 3, &c).unwrap();
        let b = train_layer(&t, 3, &c).unwrap();
        assert_eq!(a, b);
        let other = train_layer(&t, 3, &TrainConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a.factors, other.factors);
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let dims = TensorDims::new(3, 3, 2).unwrap();
        let factors = init_factors(dims, 2, 1).unwrap();
        let entries: Vec<Entry> = [(0, 0, 0), (1, 2, 1), (2, 1, 0), (0, 2, 1)]
            .iter()
            .map(|&(i, j, k)| Entry::known(i, j, k, factors.predict(i, j, k).unwrap()))
            .collect();
        let t = SparseTensor::from_entries(dims, entries).unwrap();
        let c = TrainConfig {
            lambda: 0.0,
            max_epochs: 25,
            ..cfg()
        };
        let mut epochs = 0;
        let res = train_layer_from(&t, factors.clone(), &c, &mut |_| epochs += 1).unwrap();
        assert_eq!(res.factors, factors);
        assert_eq!(epochs, res.epochs_run);
    }

    #[test]
    fn nonneg_keeps_factors_non_negative() {
        // negative targets push factors below zero without the clamp
        let entries = (0..8).map(|n| Entry::known(n % 4, n / 4, 0, -1.0));
        let t = SparseTensor::from_entries(TensorDims::new(4, 2, 1).unwrap(), entries).unwrap();
        let c = TrainConfig {
            max_epochs: 200,
            eta: 0.01,
            nonneg: true,
            ..cfg()
        };
        let res = train_layer(&t, 2, &c).unwrap();
        for m in [&res.factors.u, &res.factors.s, &res.factors.t] {
            assert!(m.as_slice().iter().all(|&x| x >= 0.0));
        }
        let free = train_layer(&t, 2, &TrainConfig { nonneg: false, ..c }).unwrap();
        assert!(
            free.factors.u.as_slice().iter().any(|&x| x < 0.0)
                || free.factors.s.as_slice().iter().any(|&x| x < 0.0)
                || free.factors.t.as_slice().iter().any(|&x| x < 0.0)
        );
    }

    #[test]
    fn moment_shapes_track_factors() {
        let f = init_factors(TensorDims::new(5, 4, 3).unwrap(), 6, 0).unwrap();
        let m = MomentState::new(&f);
        assert!(m.matches(&f));
        let other = init_factors(TensorDims::new(5, 4, 3).unwrap(), 5, 0).unwrap();
        assert!(!m.matches(&other));
    }

    #[test]
    fn training_rmse_ignores_synthetic_entries() {
        let dims = TensorDims::new(2, 1, 1).unwrap();
        let f = FactorMatrices::zeros(dims, 1);
        let known = Entry::known(0, 0, 0, 0.5);
        let synth = Entry::synthetic(1, 0, 0, 3.0);
        assert_eq!(training_rmse(&f, &[known, synth]), 0.5);
        assert_eq!(training_rmse(&f, &[synth]), 3.0);
    }
}
