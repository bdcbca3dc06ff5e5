//! Evaluation reports, shock experiments, feasibility audits and the
//! penalizer ablation harness.

use crate::baseline::{solve_baseline_from, BaselineOptions, BaselineSolution};
use crate::error::{Error, Result};
use crate::integrator::{random_shock, rollout, RolloutOptions, TrajectoryRecord, ValueField};
use crate::linalg::Mat;
use crate::problems::{interaction_w_with, obstacle_q, ProblemSpec};
use crate::training::{train, TrainConfig, TrainHistory};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub ell: f64,
    pub g: f64,
    pub ell_plus_g: f64,
    /// Penalizers are absent for reports of open-loop baseline solutions.
    pub chjt: Option<f64>,
    pub chjfin: Option<f64>,
    pub chjgrad: Option<f64>,
    pub max_q: f64,
    pub max_w: f64,
    pub ratio_to_baseline: Option<f64>,
    pub wall_time: f64,
}

impl EvalReport {
    pub fn from_record(label: impl Into<String>, rec: &TrajectoryRecord, spec: &ProblemSpec, wall_time: f64) -> Self {
        let audit = feasibility_audit(&rec.states, spec);
        EvalReport {
            label: label.into(),
            ell: rec.ell_final,
            g: rec.g_final,
            ell_plus_g: rec.ell_final + rec.g_final,
            chjt: Some(rec.chjt_final),
            chjfin: Some(rec.chjfin),
            chjgrad: Some(rec.chjgrad),
            max_q: audit.max_q,
            max_w: audit.max_w,
            ratio_to_baseline: None,
            wall_time,
        }
    }

    pub fn from_baseline(label: impl Into<String>, sol: &BaselineSolution, spec: &ProblemSpec, wall_time: f64) -> Self {
        let audit = feasibility_audit(&sol.forward.states, spec);
        EvalReport {
            label: label.into(),
            ell: sol.forward.ell,
            g: sol.forward.g,
            ell_plus_g: sol.forward.ell + sol.forward.g,
            chjt: None,
            chjfin: None,
            chjgrad: None,
            max_q: audit.max_q,
            max_w: audit.max_w,
            ratio_to_baseline: None,
            wall_time,
        }
    }

    /// Sets the suboptimality ratio against a reference report.
    pub fn compare_to(&mut self, baseline: &EvalReport) {
        self.ratio_to_baseline = Some(self.ell_plus_g / baseline.ell_plus_g);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityAudit {
    pub max_q: f64,
    pub max_w: f64,
    pub collision: bool,
}

/// Largest per-agent obstacle cost and pairwise interaction over all rows
/// of `states`.
pub fn feasibility_audit(states: &Mat, spec: &ProblemSpec) -> FeasibilityAudit {
    let q = spec.agent_dim;
    let mut max_q: f64 = 0.0;
    let mut max_w: f64 = 0.0;
    for k in 0..states.rows {
        let z = states.row(k);
        for i in 0..spec.agents {
            let zi = &z[i * q..(i + 1) * q];
            if !spec.obstacle.is_empty() {
                max_q = max_q.max(obstacle_q(zi, &spec.obstacle).0);
            }
            for j in i + 1..spec.agents {
                let zj = &z[j * q..(j + 1) * q];
                max_w = max_w.max(interaction_w_with(zi, zj, spec.radius, spec.continuous_interaction));
            }
        }
    }
    FeasibilityAudit {
        max_q,
        max_w,
        collision: max_w > 0.0,
    }
}

/// Audit over feedback rollouts from every row of `batch`.
pub fn audit_batch<F>(field: &F, batch: &Mat, spec: &ProblemSpec, n_t: usize) -> Result<FeasibilityAudit>
where
    F: ValueField + ?Sized,
{
    let mut total = FeasibilityAudit {
        max_q: 0.0,
        max_w: 0.0,
        collision: false,
    };
    for i in 0..batch.rows {
        let rec = rollout(batch.row(i), field, spec, &RolloutOptions::new(n_t))?;
        let a = feasibility_audit(&rec.states, spec);
        total.max_q = total.max_q.max(a.max_q);
        total.max_w = total.max_w.max(a.max_w);
        total.collision |= a.collision;
    }
    Ok(total)
}

/// Feedback rollout from `x0` at validation resolution.
pub fn evaluate_point<F>(field: &F, x0: &[f64], spec: &ProblemSpec, n_t: usize) -> Result<(EvalReport, TrajectoryRecord)>
where
    F: ValueField + ?Sized,
{
    let start = Instant::now();
    let rec = rollout(x0, field, spec, &RolloutOptions::new(n_t))?;
    let report = EvalReport::from_record("no shocks, t ∈ [0, 1]", &rec, spec, start.elapsed().as_secs_f64());
    Ok((report, rec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShockScenario {
    pub t_shock: f64,
    /// Norm of a random shift; ignored when `xi` is given.
    pub magnitude: f64,
    pub xi: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for ShockScenario {
    fn default() -> Self {
        ShockScenario {
            t_shock: 0.1,
            magnitude: 0.94,
            xi: None,
            seed: 0,
        }
    }
}

impl ShockScenario {
    pub fn with_magnitude(magnitude: f64, seed: u64) -> Self {
        ShockScenario {
            magnitude,
            seed,
            ..Default::default()
        }
    }

    pub fn resolve_xi(&self, d: usize) -> Result<Vec<f64>> {
        match &self.xi {
            Some(xi) if xi.len() != d => Err(Error::dim("shock vector", d, xi.len())),
            Some(xi) => Ok(xi.clone()),
            None if !(self.magnitude >= 0.0) => Err(Error::Config("shock magnitude must be nonnegative".into())),
            None => Ok(random_shock(self.magnitude, d, self.seed)),
        }
    }

    /// Grid index of `t_shock` on the `n_t`-step grid.
    pub fn step(&self, horizon: f64, n_t: usize) -> Result<usize> {
        if !(self.t_shock > 0.0 && self.t_shock < horizon) {
            return Err(Error::Config(format!("shock time {} must lie in (0, {horizon})", self.t_shock)));
        }
        let k = (self.t_shock / horizon * n_t as f64).round();
        if (k * horizon / n_t as f64 - self.t_shock).abs() > 1e-9 * horizon {
            return Err(Error::Config(format!(
                "shock time {} is not on the {n_t}-step grid",
                self.t_shock
            )));
        }
        Ok(k as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockOutcome {
    pub xi: Vec<f64>,
    pub shock_step: usize,
    /// Unshocked rollout from `x0`; rows up to `shock_step` form the
    /// pre-shock segment.
    pub unshocked: TrajectoryRecord,
    /// Rollout from the shifted state over `[t_shock, T]`.
    pub post: TrajectoryRecord,
    pub report: EvalReport,
    pub baseline: Option<(BaselineSolution, EvalReport)>,
}

impl ShockOutcome {
    pub fn shocked_state(&self) -> &[f64] {
        self.post.states.row(0)
    }
}

/// Rolls out to `t_shock`, shifts the state by `ξ` and continues in
/// feedback form with a fresh cost accumulator. Optionally re-solves the
/// baseline from the shifted state over the remaining horizon.
pub fn shock_experiment<F>(
    field: &F,
    x0: &[f64],
    spec: &ProblemSpec,
    scenario: &ShockScenario,
    n_t: usize,
    baseline: Option<&BaselineOptions>,
) -> Result<ShockOutcome>
where
    F: ValueField + ?Sized,
{
    let start = Instant::now();
    let k = scenario.step(spec.horizon, n_t)?;
    let xi = scenario.resolve_xi(spec.d())?;
    let unshocked = rollout(x0, field, spec, &RolloutOptions::new(n_t))?;
    let shifted: Vec<f64> = unshocked.states.row(k).iter().zip(&xi).map(|(z, x)| z + x).collect();
    let opts = RolloutOptions {
        n_t,
        start_step: k,
        ..Default::default()
    };
    let post = rollout(&shifted, field, spec, &opts)?;
    let label = format!("after shock |ξ|={:.2}, t ∈ [{}, {}]", crate::linalg::norm(&xi), scenario.t_shock, spec.horizon);
    let mut report = EvalReport::from_record(label.clone(), &post, spec, start.elapsed().as_secs_f64());

    let baseline = match baseline {
        None => None,
        Some(base_opts) => {
            let start = Instant::now();
            let opts = BaselineOptions {
                n_t: n_t - k,
                ..base_opts.clone()
            };
            let t_shock = spec.horizon * k as f64 / n_t as f64;
            let sol = solve_baseline_from(t_shock, &shifted, spec, &opts)?;
            let b_report = EvalReport::from_baseline(label.clone(), &sol, spec, start.elapsed().as_secs_f64());
            report.compare_to(&b_report);
            Some((sol, b_report))
        }
    };
    Ok(ShockOutcome {
        xi,
        shock_step: k,
        unshocked,
        post,
        report,
        baseline,
    })
}

/// One penalizer combination of the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub weight_decay: f64,
}

impl AblationVariant {
    fn new(name: &str, betas: [f64; 3], weight_decay: f64) -> Self {
        AblationVariant {
            name: name.into(),
            beta1: betas[0],
            beta2: betas[1],
            beta3: betas[2],
            weight_decay,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
            weight_decay: self.weight_decay,
            ..base.clone()
        }
    }
}

pub const DEFAULT_ABLATION_WEIGHT_DECAY: f64 = 1e-3;

/// The six standard variants with unit penalizer weights.
pub fn standard_variants() -> Vec<AblationVariant> {
    vec![
        AblationVariant::new("none", [0.0, 0.0, 0.0], 0.0),
        AblationVariant::new("HJt", [1.0, 0.0, 0.0], 0.0),
        AblationVariant::new("HJt+HJfin", [1.0, 1.0, 0.0], 0.0),
        AblationVariant::new("HJt+HJgrad", [1.0, 0.0, 1.0], 0.0),
        AblationVariant::new("all", [1.0, 1.0, 1.0], 0.0),
        AblationVariant::new("weight decay", [0.0, 0.0, 0.0], DEFAULT_ABLATION_WEIGHT_DECAY),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub history: Option<TrainHistory>,
    pub error: Option<String>,
}

/// Trains every variant for every seed; failures are recorded and the
/// study continues.
pub fn ablation_run(spec: &ProblemSpec, base: &TrainConfig, variants: &[AblationVariant], seeds: &[u64]) -> Vec<AblationRun> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            info!("ablation: variant {} seed {seed}", v.name);
            let run = match train(spec, &cfg) {
                Ok(out) => AblationRun {
                    variant: v.name.clone(),
                    seed,
                    history: Some(out.history),
                    error: None,
                },
                Err(e) => {
                    warn!("ablation: variant {} seed {seed} failed: {e}", v.name);
                    AblationRun {
                        variant: v.name.clone(),
                        seed,
                        history: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(run);
        }
    }
    runs
}

/// Seed-averaged validation curve of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantCurve {
    pub variant: String,
    pub seeds: usize,
    pub iterations: Vec<usize>,
    pub mean_cost: Vec<f64>,
    pub mean_g: Vec<f64>,
    /// First logged iteration at which the mean cost is at or below the
    /// threshold.
    pub first_below: Option<usize>,
}

pub fn ablation_curves(runs: &[AblationRun], threshold: f64) -> Vec<VariantCurve> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let hs: Vec<&TrainHistory> = runs
                .iter()
                .filter(|r| r.variant == name)
                .filter_map(|r| r.history.as_ref())
                .collect();
            let len = hs.iter().map(|h| h.rows.len()).min().unwrap_or(0);
            let n = hs.len() as f64;
            let iterations: Vec<usize> = (0..len).map(|i| hs[0].rows[i].iteration).collect();
            let mean_cost: Vec<f64> = (0..len).map(|i| hs.iter().map(|h| h.rows[i].val_cost()).sum::<f64>() / n).collect();
            let mean_g: Vec<f64> = (0..len).map(|i| hs.iter().map(|h| h.rows[i].val_g).sum::<f64>() / n).collect();
            let first_below = mean_cost.iter().position(|c| *c <= threshold).map(|i| iterations[i]);
            VariantCurve {
                variant: name.to_string(),
                seeds: hs.len(),
                iterations,
                mean_cost,
                mean_g,
                first_below,
            }
        })
        .collect()
}

/// Text summary of ablation curves, fastest variant first.
pub fn format_ablation_summary(curves: &[VariantCurve], threshold: f64) -> String {
    let mut sorted: Vec<&VariantCurve> = curves.iter().collect();
    sorted.sort_by_key(|c| c.first_below.unwrap_or(usize::MAX));
    let mut out = format!("iterations to reach validation l+G <= {threshold:.2}\n");
    for c in sorted {
        let reached = c.first_below.map_or("not reached".to_string(), |i| i.to_string());
        let last = c.mean_cost.last().copied().unwrap_or(f64::NAN);
        let last_g = c.mean_g.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "  {:<14} seeds {}  reached {:>11}  final l+G {:>10.3}  final G {:>8.4}",
            c.variant, c.seeds, reached, last, last_g
        );
    }
    out
}

/// Table of reports in the layout `scenario | solver | l+G | l | G`.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let w = rows.iter().map(|(_, r)| r.label.chars().count()).chain([8]).max().unwrap_or(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$} {:<10} {:>10} {:>10} {:>8} {:>8}", "scenario", "solver", "l+G", "l", "G", "ratio");
    for (solver, r) in rows {
        let ratio = r.ratio_to_baseline.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            out,
            "{:<w$} {:<10} {:>10.2} {:>10.2} {:>8.2} {:>8}",
            r.label, solver, r.ell_plus_g, r.ell, r.g, ratio
        );
    }
    out
}
