//! Direct-transcription solver for a single initial state.
//!
//! The control sequence is discretized with forward Euler on a uniform grid
//! and the running cost is summed at left endpoints. The objective is
//! minimized by ADAM with gradients from the differentiation tape.

use crate::diffengine::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problems::{running_cost, terminal_g, ProblemSpec, INTERACTION_OP, OBSTACLE_OP};
use crate::training::{AdamConfig, AdamState};
use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Piecewise-constant controls on `[t0, T]`, one row per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub t0: f64,
    pub horizon: f64,
    pub controls: Mat,
}

impl ControlSchedule {
    pub fn n_t(&self) -> usize {
        self.controls.rows
    }

    pub fn step(&self) -> f64 {
        (self.horizon - self.t0) / self.n_t() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + (self.horizon - self.t0) * k as f64 / self.n_t() as f64
    }

    /// Constant control `(y − x0)/(T − t0)`.
    pub fn straight_line(x0: &[f64], spec: &ProblemSpec, t0: f64, n_t: usize) -> Self {
        let span = spec.horizon - t0;
        let v: Vec<f64> = x0.iter().zip(&spec.target).map(|(x, y)| (y - x) / span).collect();
        let mut controls = Mat::zeros(n_t, x0.len());
        for k in 0..n_t {
            controls.row_mut(k).copy_from_slice(&v);
        }
        ControlSchedule {
            t0,
            horizon: spec.horizon,
            controls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineForward {
    /// `(n_t + 1) × d` Euler states.
    pub states: Mat,
    /// Running cost accumulated before each grid point.
    pub ell_cum: Vec<f64>,
    pub ell: f64,
    pub g: f64,
}

impl BaselineForward {
    pub fn objective(&self) -> f64 {
        self.ell + self.g
    }
}

/// Euler states and the transcribed objective of a control schedule.
pub fn baseline_forward(x0: &[f64], schedule: &ControlSchedule, spec: &ProblemSpec) -> Result<BaselineForward> {
    let d = spec.d();
    if x0.len() != d || schedule.controls.cols != d {
        return Err(Error::dim("baseline state", d, x0.len().max(schedule.controls.cols)));
    }
    let n_t = schedule.n_t();
    let h = schedule.step();
    let mut states = Mat::zeros(n_t + 1, d);
    states.row_mut(0).copy_from_slice(x0);
    let mut ell = 0.0;
    let mut ell_cum = Vec::with_capacity(n_t + 1);
    ell_cum.push(0.0);
    for k in 0..n_t {
        let (z, u) = (states.row(k).to_vec(), schedule.controls.row(k));
        ell += h * running_cost(schedule.time(k), &z, u, spec);
        let next = states.row_mut(k + 1);
        for ((n, zi), ui) in next.iter_mut().zip(&z).zip(u) {
            *n = zi + h * ui;
        }
        ell_cum.push(ell);
    }
    let (g, _) = terminal_g(states.row(n_t), spec);
    Ok(BaselineForward { states, ell_cum, ell, g })
}

fn taped_transcription(tape: &mut Tape, spec: &ProblemSpec, x0: &[f64], controls: &[Var], h: f64) -> Result<(Var, Var)> {
    let mut z = tape.constant(Mat::column(x0.to_vec()));
    let mut ell = tape.constant(Mat::scalar(0.0));
    for &u in controls {
        let mut l = tape.col_sq_norm(u);
        l = tape.scale(l, 0.5);
        if spec.uses_obstacle() {
            let q = tape.custom(OBSTACLE_OP, z)?;
            l = tape.axpy(l, spec.alpha2, q);
        }
        if spec.uses_interaction() {
            let w = tape.custom(INTERACTION_OP, z)?;
            l = tape.axpy(l, spec.alpha3, w);
        }
        ell = tape.axpy(ell, h, l);
        z = tape.axpy(z, h, u);
    }
    let neg_target = tape.constant(Mat::column(spec.target.iter().map(|v| -v).collect()));
    let diff = tape.add_bias(z, neg_target);
    let sq = tape.col_sq_norm(diff);
    let g = tape.scale(sq, 0.5 * spec.alpha1);
    Ok((ell, g))
}

/// Transcribed objective and its gradient with respect to every control.
pub fn baseline_gradient(x0: &[f64], schedule: &ControlSchedule, spec: &Arc<ProblemSpec>) -> Result<(f64, Mat)> {
    let d = spec.d();
    let mut tape = Tape::new();
    for op in spec.tape_ops() {
        tape.register(op);
    }
    let controls: Vec<Var> = (0..schedule.n_t())
        .map(|k| tape.leaf(Mat::column(schedule.controls.row(k).to_vec())))
        .collect();
    let (ell, g) = taped_transcription(&mut tape, spec, x0, &controls, schedule.step())?;
    let obj = tape.add(ell, g);
    let grads = tape.backward(obj)?;
    let mut out = Mat::zeros(schedule.n_t(), d);
    for (k, &u) in controls.iter().enumerate() {
        out.row_mut(k).copy_from_slice(&grads.get_or_zeros(u, d, 1).data);
    }
    Ok((tape.scalar(obj), out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineOptions {
    pub n_t: usize,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Step at which the learning rate is divided by 10.
    pub lr_drop_at: usize,
    /// Standard deviation of the control perturbation for restarts after the first.
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            n_t: 50,
            restarts: 4,
            steps: 5000,
            lr: 0.05,
            lr_drop_at: 2500,
            perturb_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSolution {
    pub schedule: ControlSchedule,
    pub forward: BaselineForward,
    pub restart: usize,
    /// Objective of every restart; `None` for discarded restarts.
    pub restart_objectives: Vec<Option<f64>>,
}

impl BaselineSolution {
    pub fn objective(&self) -> f64 {
        self.forward.objective()
    }
}

pub fn solve_baseline(x0: &[f64], spec: &ProblemSpec, opts: &BaselineOptions) -> Result<BaselineSolution> {
    solve_baseline_from(0.0, x0, spec, opts)
}

/// Solves over `[t0, T]` starting from `x0` at time `t0`.
pub fn solve_baseline_from(t0: f64, x0: &[f64], spec: &ProblemSpec, opts: &BaselineOptions) -> Result<BaselineSolution> {
    spec.validate()?;
    if x0.len() != spec.d() {
        return Err(Error::dim("baseline initial state", spec.d(), x0.len()));
    }
    if !(t0 >= 0.0 && t0 < spec.horizon) {
        return Err(Error::Config(format!("start time {t0} outside [0, {})", spec.horizon)));
    }
    if opts.n_t == 0 || opts.restarts == 0 {
        return Err(Error::Config("baseline needs n_t and restarts positive".into()));
    }
    let spec = Arc::new(spec.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let warm = ControlSchedule::straight_line(x0, &spec, t0, opts.n_t);
    let mut best: Option<(f64, usize, ControlSchedule)> = None;
    let mut restart_objectives = Vec::with_capacity(opts.restarts);
    for r in 0..opts.restarts {
        let mut init = warm.clone();
        if r > 0 {
            for v in init.controls.data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += opts.perturb_std * e;
            }
        }
        match optimize(x0, init, &spec, opts) {
            Ok((obj, sched)) => {
                debug!("baseline restart {r}: objective {obj:.6}");
                restart_objectives.push(Some(obj));
                if best.as_ref().map_or(true, |b| obj < b.0) {
                    best = Some((obj, r, sched));
                }
            }
            Err(e) => {
                warn!("baseline restart {r} discarded: {e}");
                restart_objectives.push(None);
            }
        }
    }
    let (_, restart, schedule) =
        best.ok_or_else(|| Error::Baseline(format!("all {} restarts produced non-finite objectives", opts.restarts)))?;
    let forward = baseline_forward(x0, &schedule, &spec)?;
    Ok(BaselineSolution {
        schedule,
        forward,
        restart,
        restart_objectives,
    })
}

/// ADAM on one restart; returns the best iterate seen.
fn optimize(x0: &[f64], mut sched: ControlSchedule, spec: &Arc<ProblemSpec>, opts: &BaselineOptions) -> Result<(f64, ControlSchedule)> {
    let adam_cfg = AdamConfig::default();
    let mut adam = AdamState::new(sched.controls.data.len());
    let mut best: Option<(f64, ControlSchedule)> = None;
    for step in 0..=opts.steps {
        let (obj, grad) = baseline_gradient(x0, &sched, spec)?;
        if !obj.is_finite() {
            return Err(Error::Baseline(format!("non-finite objective at step {step}")));
        }
        if best.as_ref().map_or(true, |b| obj < b.0) {
            best = Some((obj, sched.clone()));
        }
        if step == opts.steps {
            break;
        }
        let lr = if step < opts.lr_drop_at { opts.lr } else { opts.lr / 10.0 };
        adam.update(&mut sched.controls.data, &grad.data, lr, &adam_cfg)?;
    }
    Ok(best.expect("at least one evaluation"))
}
