//! Fixed-step RK4 rollouts of the augmented system `(z, ℓ, c_HJt)` under
//! feedback control `u = u*(t, z, ∇ₓΦ)`, with optional shock injection.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat};
use crate::problems::{lqr_reference_with_grad, ControlProblem, ProblemSpec};
use crate::valuefn::{phi_and_grad, ValueFnParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `Φ`, `∇ₓΦ`, `∂ₜΦ` at one space-time point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub phi: f64,
    pub grad_x: Vec<f64>,
    pub dphi_dt: f64,
}

/// Anything that supplies a value function and its space-time gradient.
pub trait ValueField {
    fn evaluate(&self, t: f64, x: &[f64]) -> Result<FieldSample>;
}

impl ValueField for ValueFnParams {
    fn evaluate(&self, t: f64, x: &[f64]) -> Result<FieldSample> {
        let mut s = Vec::with_capacity(x.len() + 1);
        s.extend_from_slice(x);
        s.push(t);
        let (phi, mut grad) = phi_and_grad(&s, self)?;
        let dphi_dt = grad.pop().expect("gradient has a time component");
        Ok(FieldSample {
            phi,
            grad_x: grad,
            dphi_dt,
        })
    }
}

/// The analytic value function of an obstacle-free problem.
#[derive(Clone, Copy, Debug)]
pub struct LqrField<'a>(pub &'a ProblemSpec);

impl ValueField for LqrField<'_> {
    fn evaluate(&self, t: f64, x: &[f64]) -> Result<FieldSample> {
        let (phi, grad_x, dphi_dt) = lqr_reference_with_grad(t, x, self.0)?;
        Ok(FieldSample {
            phi,
            grad_x,
            dphi_dt,
        })
    }
}

/// Norm used for the transversality penalizer `‖∇ₓΦ(T) − ∇G‖`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradNorm {
    #[default]
    L2,
    L1,
}

impl GradNorm {
    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            GradNorm::L2 => norm(v),
            GradNorm::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    /// Accumulated running cost.
    pub ell: f64,
    /// Accumulated HJB residual.
    pub chjt: f64,
}

impl AugmentedState {
    pub fn start(x: &[f64]) -> Self {
        AugmentedState {
            z: x.to_vec(),
            ell: 0.0,
            chjt: 0.0,
        }
    }
}

/// Time derivative of the augmented state.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRhs {
    pub dz: Vec<f64>,
    pub dell: f64,
    pub dchjt: f64,
}

/// Right-hand side `(−∇ₚH, L_x, R_x)` with
/// `L_x = ∇Φ·∇ₚH − H` and `R_x = |∂ₜΦ − H|`, all at `p = ∇ₓΦ(s, z)`.
pub fn augmented_rhs<F, P>(s: f64, state: &AugmentedState, field: &F, problem: &P) -> Result<(AugmentedRhs, FieldSample)>
where
    F: ValueField + ?Sized,
    P: ControlProblem + ?Sized,
{
    let sample = field.evaluate(s, &state.z)?;
    if !sample.phi.is_finite() || !sample.dphi_dt.is_finite() || sample.grad_x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Rollout {
            step: 0,
            time: s,
            reason: "value function returned a non-finite value".into(),
        });
    }
    let p = &sample.grad_x;
    let h = problem.hamiltonian(s, &state.z, p);
    let gph = problem.grad_p_hamiltonian(s, &state.z, p);
    let dell = dot(p, &gph) - h;
    let dchjt = (sample.dphi_dt - h).abs();
    let dz = gph.iter().map(|v| -v).collect();
    Ok((AugmentedRhs { dz, dell, dchjt }, sample))
}

/// State shift applied at a grid point before the step from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub step: usize,
    pub xi: Vec<f64>,
}

/// `z ← z + ξ`; accumulators are untouched.
pub fn apply_shock(state: &AugmentedState, xi: &[f64]) -> AugmentedState {
    let mut out = state.clone();
    for (z, x) in out.z.iter_mut().zip(xi) {
        *z += x;
    }
    out
}

/// Shock with uniformly random direction and the given Euclidean norm.
pub fn random_shock(magnitude: f64, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| magnitude * x / n).collect();
        }
    }
}

/// Full time history of one feedback rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// `(n_t+1) × d`; row `k` is the state the step from `t_k` starts at
    /// (after any shock at `k`).
    pub states: Mat,
    /// `(n_t+1) × d`; `u*(t_k, states[k], ∇ₓΦ)`.
    pub controls: Mat,
    /// Cumulative running cost at each grid point.
    pub ell: Vec<f64>,
    /// Cumulative HJB residual at each grid point.
    pub chjt: Vec<f64>,
    pub ell_final: f64,
    pub chjt_final: f64,
    pub g_final: f64,
    pub phi_final: f64,
    pub chjfin: f64,
    pub chjgrad: f64,
    pub shock_applied: Option<Shock>,
}

impl TrajectoryRecord {
    pub fn total_cost(&self) -> f64 {
        self.ell_final + self.g_final
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.row(self.states.rows - 1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    pub n_t: usize,
    /// Grid index the rollout starts from; the time grid is always the
    /// `n_t`-step grid on `[0, T]`.
    pub start_step: usize,
    pub shock: Option<Shock>,
    pub grad_norm: GradNorm,
}

impl RolloutOptions {
    pub fn new(n_t: usize) -> Self {
        RolloutOptions {
            n_t,
            ..Default::default()
        }
    }
}

fn grid_time(horizon: f64, k: usize, n_t: usize) -> f64 {
    horizon * k as f64 / n_t as f64
}

/// Classic RK4 rollout from `(x, 0, 0)` with `n_t` uniform steps.
pub fn rk4_rollout<F, P>(x: &[f64], field: &F, problem: &P, n_t: usize, shock: Option<&Shock>) -> Result<TrajectoryRecord>
where
    F: ValueField + ?Sized,
    P: ControlProblem + ?Sized,
{
    let opts = RolloutOptions {
        n_t,
        shock: shock.cloned(),
        ..Default::default()
    };
    rollout(x, field, problem, &opts)
}

/// RK4 rollout starting at grid index `opts.start_step` with fresh
/// accumulators.
pub fn rollout<F, P>(x: &[f64], field: &F, problem: &P, opts: &RolloutOptions) -> Result<TrajectoryRecord>
where
    F: ValueField + ?Sized,
    P: ControlProblem + ?Sized,
{
    let n_t = opts.n_t;
    let d = problem.dim();
    if n_t == 0 {
        return Err(Error::Config("rollout needs at least one time step".into()));
    }
    if x.len() != d {
        return Err(Error::dim("initial state", d, x.len()));
    }
    if opts.start_step >= n_t {
        return Err(Error::Config(format!(
            "start step {} is not before the final grid index {n_t}",
            opts.start_step
        )));
    }
    if let Some(sh) = &opts.shock {
        if sh.step < opts.start_step || sh.step >= n_t {
            return Err(Error::Config(format!(
                "shock step {} outside the rollout steps {}..{n_t}",
                sh.step, opts.start_step
            )));
        }
        if sh.xi.len() != d {
            return Err(Error::dim("shock vector", d, sh.xi.len()));
        }
    }
    let horizon = problem.horizon();
    let h = horizon / n_t as f64;
    let rows = n_t - opts.start_step + 1;
    let mut times = Vec::with_capacity(rows);
    let mut states = Mat::zeros(rows, d);
    let mut controls = Mat::zeros(rows, d);
    let mut ell = Vec::with_capacity(rows);
    let mut chjt = Vec::with_capacity(rows);

    let mut state = AugmentedState::start(x);
    for (row, k) in (opts.start_step..n_t).enumerate() {
        let t = grid_time(horizon, k, n_t);
        if let Some(sh) = opts.shock.as_ref().filter(|s| s.step == k) {
            state = apply_shock(&state, &sh.xi);
        }
        let (k1, sample) = augmented_rhs(t, &state, field, problem).map_err(|e| at_step(e, k, t))?;
        times.push(t);
        states.row_mut(row).copy_from_slice(&state.z);
        controls
            .row_mut(row)
            .copy_from_slice(&problem.optimal_control(t, &state.z, &sample.grad_x));
        ell.push(state.ell);
        chjt.push(state.chjt);

        let stage = |st: &AugmentedState, r: &AugmentedRhs, c: f64| AugmentedState {
            z: st.z.iter().zip(&r.dz).map(|(z, dz)| z + c * dz).collect(),
            ell: st.ell + c * r.dell,
            chjt: st.chjt + c * r.dchjt,
        };
        let (k2, _) = augmented_rhs(t + 0.5 * h, &stage(&state, &k1, 0.5 * h), field, problem)
            .map_err(|e| at_step(e, k, t))?;
        let (k3, _) = augmented_rhs(t + 0.5 * h, &stage(&state, &k2, 0.5 * h), field, problem)
            .map_err(|e| at_step(e, k, t))?;
        let (k4, _) = augmented_rhs(t + h, &stage(&state, &k3, h), field, problem).map_err(|e| at_step(e, k, t))?;
        let w = h / 6.0;
        for i in 0..d {
            state.z[i] += w * (k1.dz[i] + 2.0 * k2.dz[i] + 2.0 * k3.dz[i] + k4.dz[i]);
        }
        state.ell += w * (k1.dell + 2.0 * k2.dell + 2.0 * k3.dell + k4.dell);
        state.chjt += w * (k1.dchjt + 2.0 * k2.dchjt + 2.0 * k3.dchjt + k4.dchjt);
        if state.z.iter().any(|v| !v.is_finite()) || !state.ell.is_finite() || !state.chjt.is_finite() {
            return Err(Error::Rollout {
                step: k,
                time: t,
                reason: "state became non-finite".into(),
            });
        }
    }

    let t_final = horizon;
    let terminal = AugmentedState { ..state.clone() };
    let (_, sample) = augmented_rhs(t_final, &terminal, field, problem).map_err(|e| at_step(e, n_t, t_final))?;
    times.push(t_final);
    states.row_mut(rows - 1).copy_from_slice(&state.z);
    controls
        .row_mut(rows - 1)
        .copy_from_slice(&problem.optimal_control(t_final, &state.z, &sample.grad_x));
    ell.push(state.ell);
    chjt.push(state.chjt);

    let (g_final, grad_g) = problem.terminal_cost(&state.z);
    let grad_gap: Vec<f64> = sample.grad_x.iter().zip(&grad_g).map(|(a, b)| a - b).collect();
    Ok(TrajectoryRecord {
        times,
        states,
        controls,
        ell_final: state.ell,
        chjt_final: state.chjt,
        g_final,
        phi_final: sample.phi,
        chjfin: (sample.phi - g_final).abs(),
        chjgrad: opts.grad_norm.apply(&grad_gap),
        ell,
        chjt,
        shock_applied: opts.shock.clone(),
    })
}

fn at_step(e: Error, step: usize, time: f64) -> Error {
    match e {
        Error::Rollout { reason, .. } => Error::Rollout { step, time, reason },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{lqr_reference_phi, make_corridor_spec, make_lqr_spec, running_cost};
    use crate::valuefn::init_params;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn zero_field_leaves_state_fixed() {
        let spec = make_corridor_spec();
        let zero = ValueFnParams::zeros(4, 3);
        let x = [0.1, 0.2, 1.5, -0.3];
        let (rhs, _) = augmented_rhs(0.3, &AugmentedState::start(&x), &zero, &spec).unwrap();
        assert!(rhs.dz.iter().all(|&v| v == 0.0));
        let state_cost = spec.state_cost(0.3, &x);
        assert_abs_diff_eq!(rhs.dell, state_cost, epsilon = 1e-12);
        assert_abs_diff_eq!(rhs.dchjt, state_cost, epsilon = 1e-12);

        let rec = rk4_rollout(&x, &zero, &spec, 10, None).unwrap();
        for k in 0..=10 {
            assert_eq!(rec.states.row(k), &x);
        }
        assert_abs_diff_eq!(rec.ell_final, state_cost, epsilon = 1e-9);
    }

    #[test]
    fn analytic_field_has_zero_residual() {
        let spec = make_lqr_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let (rhs, _) = augmented_rhs(t, &AugmentedState::start(&x), &LqrField(&spec), &spec).unwrap();
            assert!(rhs.dchjt <= 1e-8 * rhs.dell.max(1.0));
        }
    }

    #[test]
    fn running_cost_rate_matches_legendre_identity() {
        let spec = make_corridor_spec();
        let params = init_params(5, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let (rhs, sample) = augmented_rhs(t, &AugmentedState::start(&x), &params, &spec).unwrap();
            let u = crate::problems::optimal_control(&sample.grad_x);
            let l = running_cost(t, &x, &u, &spec);
            assert_abs_diff_eq!(rhs.dell, l, epsilon = 1e-10 * l.abs().max(1.0));
        }
    }

    #[test]
    fn analytic_rollout_reproduces_value() {
        let spec = make_lqr_spec(2);
        let x = [spec.target[0] + 1.0, spec.target[1]];
        let rec = rk4_rollout(&x, &LqrField(&spec), &spec, 50, None).unwrap();
        assert_abs_diff_eq!(rec.total_cost(), 0.495_050, epsilon = 1e-4);
        assert_abs_diff_eq!(rec.total_cost(), lqr_reference_phi(0.0, &x, &spec).unwrap(), epsilon = 1e-4);
        assert!(rec.chjt_final <= 1e-6 && rec.chjfin <= 1e-6 && rec.chjgrad <= 1e-6);
    }

    #[test]
    fn controls_are_feedback_of_stored_states() {
        let spec = make_corridor_spec();
        let params = init_params(6, 4, 8);
        let rec = rk4_rollout(&spec.x0, &params, &spec, 12, None).unwrap();
        for k in 0..=12 {
            let s = params.evaluate(rec.times[k], rec.states.row(k)).unwrap();
            let u: Vec<f64> = s.grad_x.iter().map(|v| -v).collect();
            assert_eq!(rec.controls.row(k), u.as_slice());
        }
        assert_eq!(rec.times[12], 1.0);
        for w in rec.chjt.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(rec.chjt_final >= 0.0);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let spec = make_corridor_spec();
        let params = init_params(7, 4, 8);
        let a = rk4_rollout(&spec.x0, &params, &spec, 20, None).unwrap();
        let b = rk4_rollout(&spec.x0, &params, &spec, 20, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shocks() {
        let st = AugmentedState {
            z: vec![0.0, 0.0],
            ell: 3.0,
            chjt: 1.0,
        };
        assert_eq!(apply_shock(&st, &[0.0, 0.0]), st);
        let moved = apply_shock(&st, &[1.0, 0.0]);
        assert_eq!(moved.z, vec![1.0, 0.0]);
        assert_eq!((moved.ell, moved.chjt), (3.0, 1.0));
        let xi = random_shock(0.94, 4, 17);
        assert_abs_diff_eq!(norm(&xi), 0.94, epsilon = 1e-12);
        assert_eq!(xi, random_shock(0.94, 4, 17));
        assert_ne!(xi, random_shock(0.94, 4, 18));
    }

    #[test]
    fn shock_is_applied_before_the_step() {
        let spec = make_lqr_spec(2);
        let zero = ValueFnParams::zeros(2, 2);
        let shock = Shock {
            step: 3,
            xi: vec![0.5, -0.25],
        };
        let rec = rk4_rollout(&[1.0, 1.0], &zero, &spec, 10, Some(&shock)).unwrap();
        assert_eq!(rec.states.row(2), &[1.0, 1.0]);
        assert_eq!(rec.states.row(3), &[1.5, 0.75]);
        assert_eq!(rec.final_state(), &[1.5, 0.75]);
        assert!(rk4_rollout(&[1.0, 1.0], &zero, &spec, 10, Some(&Shock { step: 10, xi: vec![0.0; 2] })).is_err());
    }

    #[test]
    fn tail_rollout_matches_full_rollout_states() {
        let spec = make_corridor_spec();
        let params = init_params(8, 4, 8);
        let full = rk4_rollout(&spec.x0, &params, &spec, 20, None).unwrap();
        let opts = RolloutOptions {
            n_t: 20,
            start_step: 2,
            ..Default::default()
        };
        let tail = rollout(full.states.row(2), &params, &spec, &opts).unwrap();
        for k in 0..=18 {
            assert_eq!(tail.states.row(k), full.states.row(k + 2));
            assert_eq!(tail.times[k], full.times[k + 2]);
        }
        assert_eq!(tail.ell[0], 0.0);
    }
}
