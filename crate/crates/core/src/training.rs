//! Training of the value network on samples of initial states.
//!
//! Each iteration draws a batch from the initial-state distribution, rolls
//! out the feedback dynamics with RK4 on the differentiation tape, and
//! takes one ADAM step on the penalized objective
//! `mean(ℓ(T) + G(z(T)) + β1 c_HJt + β2 c_HJfin + β3 c_HJgrad)`.

use crate::diffengine::{grad_theta, taped_phi, FlatGradient, ParamVars, Tape, Var};
use crate::error::{Error, Result};
use crate::integrator::{rollout, GradNorm, RolloutOptions, TrajectoryRecord, ValueField};
use crate::linalg::Mat;
use crate::problems::{ProblemSpec, INTERACTION_OP, OBSTACLE_OP};
use crate::valuefn::{init_params, ValueFnParams};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr0: f64,
    /// Iterations between divisions of the learning rate by 10.
    pub lr_decay_every: usize,
    /// Weight of the HJB residual along trajectories.
    pub beta1: f64,
    /// Weight of the terminal-value mismatch.
    pub beta2: f64,
    /// Weight of the terminal-gradient mismatch.
    pub beta3: f64,
    pub n_t_train: usize,
    pub n_t_val: usize,
    pub val_size: usize,
    pub seed: u64,
    /// Network width `m`.
    pub width: usize,
    pub adam: AdamConfig,
    /// Iterations between validation passes.
    pub log_every: usize,
    /// L2 weight decay added to the gradient.
    pub weight_decay: f64,
    pub grad_norm: GradNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            iterations: 2400,
            lr0: 0.01,
            lr_decay_every: 800,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            n_t_train: 20,
            n_t_val: 50,
            val_size: 256,
            seed: 0,
            width: 32,
            adam: AdamConfig::default(),
            log_every: 50,
            weight_decay: 0.0,
            grad_norm: GradNorm::L2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("n_t_train", self.n_t_train),
            ("n_t_val", self.n_t_val),
            ("val_size", self.val_size),
            ("width", self.width),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_t_val < self.n_t_train {
            return Err(Error::Config(format!(
                "n_t_val ({}) must be at least n_t_train ({})",
                self.n_t_val, self.n_t_train
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if [self.beta1, self.beta2, self.beta3, self.weight_decay].iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("penalizer weights and weight decay must be nonnegative".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta_m) || !(0.0..1.0).contains(&a.beta_v) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid ADAM hyperparameters".into()));
        }
        Ok(())
    }

    pub fn penalties(&self) -> Penalties {
        Penalties {
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
            grad_norm: self.grad_norm,
        }
    }
}

/// Penalizer weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalties {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub grad_norm: GradNorm,
}

impl Penalties {
    pub fn none() -> Self {
        Penalties {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            grad_norm: GradNorm::L2,
        }
    }
}

/// `count × d` matrix of i.i.d. draws from `N(x0, ρ0_std² I)`.
pub fn sample_rho0(count: usize, spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Mat {
    let d = spec.d();
    let mut out = Mat::zeros(count, d);
    for i in 0..count {
        for (j, x) in out.row_mut(i).iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *x = spec.x0[j] + spec.rho0_std * e;
        }
    }
    out
}

/// Batch means of the objective and each of its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub ell: f64,
    pub g: f64,
    pub chjt: f64,
    pub chjfin: f64,
    pub chjgrad: f64,
}

impl ObjectiveTerms {
    pub fn cost(&self) -> f64 {
        self.ell + self.g
    }
}

/// Objective over a batch (rows of `batch`) using plain rollouts.
pub fn batch_objective<F>(batch: &Mat, field: &F, penalties: Penalties, spec: &ProblemSpec, n_t: usize) -> Result<ObjectiveTerms>
where
    F: ValueField + ?Sized,
{
    let records = batch_rollouts(batch, field, spec, n_t, penalties.grad_norm)?;
    Ok(terms_from_records(&records, penalties))
}

pub fn batch_rollouts<F>(batch: &Mat, field: &F, spec: &ProblemSpec, n_t: usize, grad_norm: GradNorm) -> Result<Vec<TrajectoryRecord>>
where
    F: ValueField + ?Sized,
{
    let opts = RolloutOptions {
        n_t,
        grad_norm,
        ..Default::default()
    };
    (0..batch.rows)
        .map(|i| {
            rollout(batch.row(i), field, spec, &opts).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn terms_from_records(records: &[TrajectoryRecord], p: Penalties) -> ObjectiveTerms {
    let n = records.len() as f64;
    let mut t = ObjectiveTerms::default();
    for r in records {
        t.ell += r.ell_final;
        t.g += r.g_final;
        t.chjt += r.chjt_final;
        t.chjfin += r.chjfin;
        t.chjgrad += r.chjgrad;
        t.total += r.ell_final + r.g_final + p.beta1 * r.chjt_final + p.beta2 * r.chjfin + p.beta3 * r.chjgrad;
    }
    t.total /= n;
    t.ell /= n;
    t.g /= n;
    t.chjt /= n;
    t.chjfin /= n;
    t.chjgrad /= n;
    t
}

/// Per-sample (`1 × B`) nodes of a taped rollout.
#[derive(Clone, Copy, Debug)]
pub struct TapedTerms {
    pub ell: Var,
    pub g: Var,
    pub chjt: Var,
    pub chjfin: Var,
    pub chjgrad: Var,
    pub z_final: Var,
}

struct TapedRhs {
    dz: Var,
    dell: Var,
    dchjt: Var,
}

fn taped_rhs(tape: &mut Tape, pv: &ParamVars, spec: &ProblemSpec, z: Var, t: f64) -> Result<TapedRhs> {
    let phi = taped_phi(tape, pv, z, t, false);
    let p = phi.grad_x;
    let p_sq = tape.col_sq_norm(p);
    let half_p_sq = tape.scale(p_sq, 0.5);
    let mut state_cost: Option<Var> = None;
    if spec.uses_obstacle() {
        let q = tape.custom(OBSTACLE_OP, z)?;
        state_cost = Some(tape.scale(q, spec.alpha2));
    }
    if spec.uses_interaction() {
        let w = tape.custom(INTERACTION_OP, z)?;
        let w = tape.scale(w, spec.alpha3);
        state_cost = Some(match state_cost {
            Some(s) => tape.add(s, w),
            None => w,
        });
    }
    // H = ½‖p‖² − α2Q − α3W; ∇ₚH = p.
    let hamiltonian = match state_cost {
        Some(s) => tape.sub(half_p_sq, s),
        None => half_p_sq,
    };
    let dell = tape.sub(p_sq, hamiltonian);
    let resid = tape.sub(phi.dphi_dt, hamiltonian);
    let dchjt = tape.abs(resid);
    let dz = tape.scale(p, -1.0);
    Ok(TapedRhs { dz, dell, dchjt })
}

/// Records an RK4 rollout of the augmented system for every column of the
/// `d × B` initial-state node `z0`, with the terminal penalizers.
pub fn taped_rollout(
    tape: &mut Tape,
    pv: &ParamVars,
    spec: &ProblemSpec,
    z0: Var,
    n_t: usize,
    grad_norm: GradNorm,
) -> Result<TapedTerms> {
    let batch = tape.value(z0).cols;
    let horizon = spec.horizon;
    let h = horizon / n_t as f64;
    let mut z = z0;
    let mut ell = tape.constant(Mat::zeros(1, batch));
    let mut chjt = tape.constant(Mat::zeros(1, batch));
    for k in 0..n_t {
        let t = horizon * k as f64 / n_t as f64;
        let k1 = taped_rhs(tape, pv, spec, z, t)?;
        let z2 = tape.axpy(z, 0.5 * h, k1.dz);
        let k2 = taped_rhs(tape, pv, spec, z2, t + 0.5 * h)?;
        let z3 = tape.axpy(z, 0.5 * h, k2.dz);
        let k3 = taped_rhs(tape, pv, spec, z3, t + 0.5 * h)?;
        let z4 = tape.axpy(z, h, k3.dz);
        let k4 = taped_rhs(tape, pv, spec, z4, t + h)?;
        let w = h / 6.0;
        let combine = |tape: &mut Tape, a: Var, b: Var, c: Var, d: Var| {
            let bc = tape.add(b, c);
            let ad = tape.add(a, d);
            let s = tape.axpy(ad, 2.0, bc);
            tape.scale(s, w)
        };
        let dz = combine(tape, k1.dz, k2.dz, k3.dz, k4.dz);
        z = tape.add(z, dz);
        let dl = combine(tape, k1.dell, k2.dell, k3.dell, k4.dell);
        ell = tape.add(ell, dl);
        let dc = combine(tape, k1.dchjt, k2.dchjt, k3.dchjt, k4.dchjt);
        chjt = tape.add(chjt, dc);
    }

    let terminal = taped_phi(tape, pv, z, horizon, true);
    let neg_target = tape.constant(Mat::column(spec.target.iter().map(|v| -v).collect()));
    let diff = tape.add_bias(z, neg_target);
    let sq = tape.col_sq_norm(diff);
    let g = tape.scale(sq, 0.5 * spec.alpha1);
    let grad_g = tape.scale(diff, spec.alpha1);
    let phi_gap = tape.sub(terminal.phi.expect("terminal value requested"), g);
    let chjfin = tape.abs(phi_gap);
    let grad_gap = tape.sub(terminal.grad_x, grad_g);
    let chjgrad = match grad_norm {
        GradNorm::L2 => tape.col_norm(grad_gap),
        GradNorm::L1 => {
            let a = tape.abs(grad_gap);
            tape.col_sum(a)
        }
    };
    Ok(TapedTerms {
        ell,
        g,
        chjt,
        chjfin,
        chjgrad,
        z_final: z,
    })
}

fn taped_mean(tape: &mut Tape, row: Var) -> Var {
    let n = tape.value(row).cols as f64;
    let s = tape.sum(row);
    tape.scale(s, 1.0 / n)
}

/// Batch objective and its exact gradient with respect to `θ` through the
/// discretized rollouts.
pub fn batch_objective_grad(
    batch: &Mat,
    params: &ValueFnParams,
    penalties: Penalties,
    spec: &Arc<ProblemSpec>,
    n_t: usize,
) -> Result<(ObjectiveTerms, FlatGradient)> {
    if batch.cols != spec.d() {
        return Err(Error::dim("batch state dimension", spec.d(), batch.cols));
    }
    if params.d != spec.d() {
        return Err(Error::dim("value function dimension", spec.d(), params.d));
    }
    let mut terms = ObjectiveTerms::default();
    let (total, grad) = grad_theta(params, &spec.tape_ops(), |tape, pv| {
        let z0 = tape.constant(batch.transpose());
        let tt = taped_rollout(tape, pv, spec, z0, n_t, penalties.grad_norm)?;
        let mut per_sample = tape.add(tt.ell, tt.g);
        for (beta, term) in [
            (penalties.beta1, tt.chjt),
            (penalties.beta2, tt.chjfin),
            (penalties.beta3, tt.chjgrad),
        ] {
            if beta != 0.0 {
                per_sample = tape.axpy(per_sample, beta, term);
            }
        }
        let mean_of = |tape: &Tape, v: Var| tape.value(v).data.iter().sum::<f64>() / batch.rows as f64;
        terms.ell = mean_of(tape, tt.ell);
        terms.g = mean_of(tape, tt.g);
        terms.chjt = mean_of(tape, tt.chjt);
        terms.chjfin = mean_of(tape, tt.chjfin);
        terms.chjgrad = mean_of(tape, tt.chjgrad);
        Ok(taped_mean(tape, per_sample))
    })?;
    terms.total = total;
    Ok((terms, grad))
}

/// `lr0 · 10^(−⌊iter / lr_decay_every⌋)`.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let drops = (iter / config.lr_decay_every) as i32;
    config.lr0 / 10f64.powi(drops)
}

/// First and second moment estimates of ADAM over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::dim("ADAM gradient", self.m.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step", node: i });
        }
        self.steps += 1;
        let bc_m = 1.0 - cfg.beta_m.powi(self.steps as i32);
        let bc_v = 1.0 - cfg.beta_v.powi(self.steps as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta_m * *m + (1.0 - cfg.beta_m) * g;
            *v = cfg.beta_v * *v + (1.0 - cfg.beta_v) * g * g;
            let m_hat = *m / bc_m;
            let v_hat = *v / bc_v;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// ADAM step on the value-function parameters at iteration `iter`, with
/// optional L2 weight decay folded into the gradient.
pub fn adam_step(
    params: &mut ValueFnParams,
    grad: &FlatGradient,
    state: &mut AdamState,
    iter: usize,
    config: &TrainConfig,
) -> Result<()> {
    let mut flat = params.to_flat();
    let mut g = grad.to_flat();
    if config.weight_decay > 0.0 {
        for (gi, p) in g.iter_mut().zip(&flat) {
            *gi += config.weight_decay * p;
        }
    }
    state.update(&mut flat, &g, lr_at(iter, config), &config.adam)?;
    params.set_flat(&flat)
}

/// One logged validation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_objective: f64,
    pub val_ell: f64,
    pub val_g: f64,
    pub val_chjt: f64,
    pub val_chjfin: f64,
    pub val_chjgrad: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl HistoryRow {
    pub fn val_cost(&self) -> f64 {
        self.val_ell + self.val_g
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ValueFnParams,
    pub best_params: ValueFnParams,
    pub best_iteration: usize,
    pub best_validation: ObjectiveTerms,
    pub history: TrainHistory,
    /// Training-batch RNG after the last iteration.
    pub rng: ChaCha8Rng,
}

/// Fixed held-out initial states for a run.
pub fn validation_set(spec: &ProblemSpec, config: &TrainConfig) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    sample_rho0(config.val_size, spec, &mut rng)
}

pub fn train(spec: &ProblemSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_params(config.seed, spec.d(), config.width);
    train_from(spec, config, init)
}

/// Trains starting from the given parameters.
pub fn train_from(spec: &ProblemSpec, config: &TrainConfig, init: ValueFnParams) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    init.validate()?;
    if init.d != spec.d() {
        return Err(Error::dim("initial parameters", spec.d(), init.d));
    }
    let spec_arc = Arc::new(spec.clone());
    let penalties = config.penalties();
    let val_set = validation_set(spec, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();

    let mut params = init;
    let mut adam = AdamState::new(params.num_params());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ValueFnParams, ObjectiveTerms)> = None;

    let validate = |params: &ValueFnParams| -> Result<ObjectiveTerms> {
        batch_objective(&val_set, params, penalties, spec, config.n_t_val)
    };
    let record = |iteration: usize,
                      train_obj: f64,
                      params: &ValueFnParams,
                      history: &mut TrainHistory,
                      best: &mut Option<(f64, usize, ValueFnParams, ObjectiveTerms)>|
     -> Result<()> {
        let v = validate(params).map_err(|_| Error::Diverged {
            iteration,
            last_good: Box::new(params.clone()),
        })?;
        let row = HistoryRow {
            iteration,
            train_objective: train_obj,
            val_ell: v.ell,
            val_g: v.g,
            val_chjt: v.chjt,
            val_chjfin: v.chjfin,
            val_chjgrad: v.chjgrad,
            lr: lr_at(iteration, config),
            wall_time: start.elapsed().as_secs_f64(),
        };
        info!(
            "iter {:5}  train {:.4}  val l+G {:.4} (l {:.4}, G {:.4}, HJt {:.4}, HJfin {:.4}, HJgrad {:.4})",
            iteration,
            train_obj,
            row.val_cost(),
            v.ell,
            v.g,
            v.chjt,
            v.chjfin,
            v.chjgrad
        );
        let cost = v.cost();
        if cost.is_finite() && best.as_ref().map_or(true, |b| cost < b.0) {
            *best = Some((cost, iteration, params.clone(), v));
        }
        history.rows.push(row);
        Ok(())
    };

    let mut last_obj = f64::NAN;
    for it in 0..config.iterations {
        let batch = sample_rho0(config.batch_size, spec, &mut rng);
        let (terms, grad) = match batch_objective_grad(&batch, &params, penalties, &spec_arc, config.n_t_train) {
            Ok(v) if v.0.total.is_finite() => v,
            _ => {
                return Err(Error::Diverged {
                    iteration: it,
                    last_good: Box::new(params),
                })
            }
        };
        last_obj = terms.total;
        if it % config.log_every == 0 {
            record(it, terms.total, &params, &mut history, &mut best)?;
        }
        let before = params.clone();
        if adam_step(&mut params, &grad, &mut adam, it, config).is_err() || params.validate().is_err() {
            return Err(Error::Diverged {
                iteration: it,
                last_good: Box::new(before),
            });
        }
    }
    record(config.iterations, last_obj, &params, &mut history, &mut best)?;

    let (_, best_iteration, best_params, best_validation) = best.expect("at least one validation pass");
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_iteration,
        best_validation,
        history,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::LqrField;
    use crate::problems::{lqr_reference_phi, make_corridor_spec, make_lqr_spec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn swarm_initial_samples_are_collision_free() {
        let spec = crate::problems::make_swarm_spec(8);
        let starts = sample_rho0(20_000, &spec, &mut ChaCha8Rng::seed_from_u64(3));
        for i in 0..starts.rows {
            assert_eq!(spec.interaction_total(starts.row(i)).0, 0.0, "sample {i}");
        }
    }

    #[test]
    fn sampling() {
        let mut spec = make_corridor_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = sample_rho0(100_000, &spec, &mut rng);
        for j in 0..4 {
            let mean: f64 = (0..big.rows).map(|i| big.get(i, j)).sum::<f64>() / big.rows as f64;
            assert!((mean - spec.x0[j]).abs() < 0.02, "coordinate {j}: {mean}");
        }
        let a = sample_rho0(5, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_rho0(5, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        spec.rho0_std = 0.0;
        let fixed = sample_rho0(3, &spec, &mut rng);
        for i in 0..3 {
            assert_eq!(fixed.row(i), spec.x0.as_slice());
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_abs_diff_eq!(lr_at(800, &cfg), 0.001, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(1599, &cfg), 0.001, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(1600, &cfg), 0.0001, epsilon = 1e-18);
        let mut prev = f64::INFINITY;
        for it in 0..5000 {
            let lr = lr_at(it, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = TrainConfig::default();
        let mut params = init_params(1, 2, 3);
        let before = params.clone();
        let mut state = AdamState::new(params.num_params());
        let zero = FlatGradient::zeros_like(&params);
        adam_step(&mut params, &zero, &mut state, 0, &cfg).unwrap();
        assert_eq!(params, before);

        let mut state = AdamState::new(before.num_params());
        let mut g = FlatGradient::zeros_like(&before);
        let n = before.num_params();
        let gflat: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        g.set_flat(&gflat).unwrap();
        let mut p = before.clone();
        adam_step(&mut p, &g, &mut state, 0, &cfg).unwrap();
        for ((after, prev), gi) in p.to_flat().iter().zip(before.to_flat()).zip(&gflat) {
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert_abs_diff_eq!(after - prev, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut state = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        let err = state.update(&mut p, &[1.0, f64::NAN], 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn zero_penalties_give_pure_control_cost() {
        let spec = make_corridor_spec();
        let params = init_params(2, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_rho0(4, &spec, &mut rng);
        let t = batch_objective(&batch, &params, Penalties::none(), &spec, 8).unwrap();
        assert_abs_diff_eq!(t.total, t.ell + t.g, epsilon = 1e-9 * t.total.abs());
    }

    #[test]
    fn penalizers_vanish_on_analytic_solution() {
        let spec = make_lqr_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_rho0(16, &spec, &mut rng);
        let pen = Penalties {
            beta1: 3.0,
            beta2: 2.0,
            beta3: 5.0,
            grad_norm: GradNorm::L2,
        };
        let t = batch_objective(&batch, &LqrField(&spec), pen, &spec, 50).unwrap();
        assert!(t.chjt <= 1e-6 && t.chjfin <= 1e-6 && t.chjgrad <= 1e-6, "{t:?}");
        let mean_phi: f64 = (0..16).map(|i| lqr_reference_phi(0.0, batch.row(i), &spec).unwrap()).sum::<f64>() / 16.0;
        assert_abs_diff_eq!(t.total, mean_phi, epsilon = 1e-3 * mean_phi);
    }

    #[test]
    fn taped_objective_matches_plain_rollouts() {
        let spec = Arc::new(make_corridor_spec());
        let params = init_params(5, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_rho0(6, &spec, &mut rng);
        let pen = TrainConfig::default().penalties();
        let plain = batch_objective(&batch, &params, pen, &spec, 10).unwrap();
        let (taped, _) = batch_objective_grad(&batch, &params, pen, &spec, 10).unwrap();
        for (a, b) in [
            (taped.total, plain.total),
            (taped.ell, plain.ell),
            (taped.g, plain.g),
            (taped.chjt, plain.chjt),
            (taped.chjfin, plain.chjfin),
            (taped.chjgrad, plain.chjgrad),
        ] {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let spec = Arc::new(make_corridor_spec());
        let params = init_params(6, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = sample_rho0(3, &spec, &mut rng);
        let pen = TrainConfig::default().penalties();
        let (_, g_all) = batch_objective_grad(&batch, &params, pen, &spec, 6).unwrap();
        let mut sum = FlatGradient::zeros_like(&params);
        for i in 0..3 {
            let single = Mat::from_vec(1, 4, batch.row(i).to_vec());
            let (_, g) = batch_objective_grad(&single, &params, pen, &spec, 6).unwrap();
            sum.add_assign(&g);
        }
        for (a, b) in g_all.to_flat().iter().zip(sum.to_flat()) {
            assert_abs_diff_eq!(3.0 * a, b, epsilon = 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use rand::Rng;
        let spec = Arc::new(make_corridor_spec());
        let params = init_params(7, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sample_rho0(4, &spec, &mut rng);
        let pen = TrainConfig::default().penalties();
        let (_, grad) = batch_objective_grad(&batch, &params, pen, &spec, 8).unwrap();
        let flat = params.to_flat();
        let g = grad.to_flat();
        let eval = |v: &[f64]| {
            let mut p = params.clone();
            p.set_flat(v).unwrap();
            batch_objective(&batch, &p, pen, &spec, 8).unwrap().total
        };
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..10 {
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5 * flat[i].abs().max(1.0);
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            num += (fd - g[i]).powi(2);
            den += fd * fd;
        }
        assert!((num / den).sqrt() <= 1e-6, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.n_t_val = 10;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
