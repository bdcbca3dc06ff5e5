//! Velocity-controlled multi-agent problems: dynamics `ż = u`, energy
//! `½‖u‖²`, obstacle and interaction costs, quadratic terminal cost, and
//! the closed-form Hamiltonian these induce.

use crate::diffengine::CustomOp;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, Mat};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Axis-aligned box with corners `lo < hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrismBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Spatial obstacle cost `Qᵢ` for a single agent position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleField {
    /// `Σₖ aₖ exp(−‖z − μₖ‖² / (2vₖ))`.
    GaussianSum {
        centers: Vec<Vec<f64>>,
        variances: Vec<f64>,
        amplitudes: Vec<f64>,
    },
    /// Smoothed box indicators: `Σ_boxes Π_axes s((z−lo)/τ)·s((hi−z)/τ)`
    /// with `s` the logistic function.
    PrismSet { boxes: Vec<PrismBox>, tau: f64 },
}

impl ObstacleField {
    pub fn none() -> Self {
        ObstacleField::GaussianSum {
            centers: vec![],
            variances: vec![],
            amplitudes: vec![],
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ObstacleField::GaussianSum { centers, .. } => centers.is_empty(),
            ObstacleField::PrismSet { boxes, .. } => boxes.is_empty(),
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        match self {
            ObstacleField::GaussianSum {
                centers,
                variances,
                amplitudes,
            } => {
                if centers.len() != variances.len() || centers.len() != amplitudes.len() {
                    return Err(Error::Config(format!(
                        "gaussian obstacle lists differ in length: {} centers, {} variances, {} amplitudes",
                        centers.len(),
                        variances.len(),
                        amplitudes.len()
                    )));
                }
                if let Some(c) = centers.iter().find(|c| c.len() != q) {
                    return Err(Error::dim("gaussian obstacle center", q, c.len()));
                }
                if variances.iter().chain(amplitudes).any(|&v| !(v > 0.0)) {
                    return Err(Error::Config("gaussian variances and amplitudes must be positive".into()));
                }
            }
            ObstacleField::PrismSet { boxes, tau } => {
                if !(*tau > 0.0) {
                    return Err(Error::Config(format!("prism sharpness must be positive, got {tau}")));
                }
                for b in boxes {
                    if b.lo.len() != q || b.hi.len() != q {
                        return Err(Error::dim("prism corner", q, b.lo.len().min(b.hi.len())));
                    }
                    if b.lo.iter().zip(&b.hi).any(|(l, h)| !(l < h)) {
                        return Err(Error::Config(format!("prism corners must satisfy lo < hi: {b:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Obstacle cost of one agent at `z` with its exact gradient.
pub fn obstacle_q(z: &[f64], field: &ObstacleField) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    match field {
        ObstacleField::GaussianSum {
            centers,
            variances,
            amplitudes,
        } => {
            for ((mu, &var), &amp) in centers.iter().zip(variances).zip(amplitudes) {
                let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
                let g = amp * (-norm_sq(&diff) / (2.0 * var)).exp();
                value += g;
                for (gi, di) in grad.iter_mut().zip(&diff) {
                    *gi -= g * di / var;
                }
            }
        }
        ObstacleField::PrismSet { boxes, tau } => {
            let q = z.len();
            let mut factors = vec![0.0; q];
            let mut dfactors = vec![0.0; q];
            for b in boxes {
                for a in 0..q {
                    let sl = logistic((z[a] - b.lo[a]) / tau);
                    let sh = logistic((b.hi[a] - z[a]) / tau);
                    factors[a] = sl * sh;
                    dfactors[a] = (sl * (1.0 - sl) * sh - sl * sh * (1.0 - sh)) / tau;
                }
                let prod: f64 = factors.iter().product();
                value += prod;
                for a in 0..q {
                    let others: f64 = (0..q).filter(|&k| k != a).map(|k| factors[k]).product();
                    grad[a] += dfactors[a] * others;
                }
            }
        }
    }
    (value, grad)
}

/// Pairwise interaction: `exp(−‖zᵢ − zⱼ‖²/(2r²))` inside distance `2r`, else 0.
pub fn interaction_w(zi: &[f64], zj: &[f64], r: f64) -> f64 {
    interaction_w_with(zi, zj, r, false)
}

/// As [`interaction_w`]; `continuous` subtracts the boundary value `e⁻²`
/// inside the cutoff so the cost is continuous at `2r`.
pub fn interaction_w_with(zi: &[f64], zj: &[f64], r: f64, continuous: bool) -> f64 {
    let d2: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
    if d2 < 4.0 * r * r {
        let v = (-d2 / (2.0 * r * r)).exp();
        if continuous {
            v - (-2.0f64).exp()
        } else {
            v
        }
    } else {
        0.0
    }
}

/// `u* = −p`, the maximizer of `−p·u − ½‖u‖²`.
pub fn optimal_control(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| -v).collect()
}

/// `∇ₚH = p`.
pub fn grad_p_hamiltonian(p: &[f64]) -> Vec<f64> {
    p.to_vec()
}

/// Closed-form structure of a control problem with a unique maximizer of
/// the Hamiltonian's supremum.
pub trait ControlProblem {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn optimal_control(&self, t: f64, x: &[f64], p: &[f64]) -> Vec<f64>;
    fn hamiltonian(&self, t: f64, x: &[f64], p: &[f64]) -> f64;
    fn grad_p_hamiltonian(&self, t: f64, x: &[f64], p: &[f64]) -> Vec<f64>;
    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64;
    /// Terminal cost and its gradient.
    fn terminal_cost(&self, z: &[f64]) -> (f64, Vec<f64>);
    /// State-only part of the running cost, `α2 Q + α3 W`.
    fn state_cost(&self, t: f64, x: &[f64]) -> f64;
}

/// A multi-agent velocity-control problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub id: String,
    /// Number of agents `n`.
    pub agents: usize,
    /// Spatial dimension per agent `q`.
    pub agent_dim: usize,
    pub horizon: f64,
    /// Nominal initial joint state, length `n·q`.
    pub x0: Vec<f64>,
    /// Target joint state, length `n·q`.
    pub target: Vec<f64>,
    /// Terminal multiplier.
    pub alpha1: f64,
    /// Obstacle multiplier.
    pub alpha2: f64,
    /// Interaction multiplier.
    pub alpha3: f64,
    pub radius: f64,
    pub obstacle: ObstacleField,
    /// Standard deviation of the isotropic Gaussian around `x0`.
    pub rho0_std: f64,
    #[serde(default)]
    pub continuous_interaction: bool,
}

impl ProblemSpec {
    pub fn d(&self) -> usize {
        self.agents * self.agent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(Error::Config("problem needs at least one agent and dimension".into()));
        }
        if self.x0.len() != d {
            return Err(Error::dim("x0", d, self.x0.len()));
        }
        if self.target.len() != d {
            return Err(Error::dim("target", d, self.target.len()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if [self.alpha1, self.alpha2, self.alpha3].iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("multipliers must be nonnegative".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("agent radius must be positive, got {}", self.radius)));
        }
        if !(self.rho0_std >= 0.0) {
            return Err(Error::Config("rho0_std must be nonnegative".into()));
        }
        self.obstacle.validate(self.agent_dim)
    }

    fn agent<'a>(&self, z: &'a [f64], i: usize) -> &'a [f64] {
        &z[i * self.agent_dim..(i + 1) * self.agent_dim]
    }

    /// `Σᵢ Qᵢ(zᵢ)` and its gradient.
    pub fn obstacle_total(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; z.len()];
        if self.obstacle.is_empty() {
            return (0.0, grad);
        }
        let mut value = 0.0;
        for i in 0..self.agents {
            let (v, g) = obstacle_q(self.agent(z, i), &self.obstacle);
            value += v;
            grad[i * self.agent_dim..(i + 1) * self.agent_dim].copy_from_slice(&g);
        }
        (value, grad)
    }

    /// `Σ_{j≠i} Wᵢⱼ(zᵢ, zⱼ)` over ordered pairs and its gradient.
    ///
    /// The gradient is that of the smooth branch inside the cutoff; the
    /// jump at `2r` contributes nothing.
    pub fn interaction_total(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let q = self.agent_dim;
        let r2 = self.radius * self.radius;
        let mut grad = vec![0.0; z.len()];
        let mut value = 0.0;
        for i in 0..self.agents {
            for j in (i + 1)..self.agents {
                let (zi, zj) = (self.agent(z, i), self.agent(z, j));
                let w = interaction_w_with(zi, zj, self.radius, self.continuous_interaction);
                if w == 0.0 && !self.continuous_interaction {
                    continue;
                }
                let d2: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 >= 4.0 * r2 {
                    continue;
                }
                // Both orderings (i, j) and (j, i).
                value += 2.0 * w;
                let e = (-d2 / (2.0 * r2)).exp();
                for k in 0..q {
                    let dk = zi[k] - zj[k];
                    let g = 2.0 * (-e * dk / r2);
                    grad[i * q + k] += g;
                    grad[j * q + k] -= g;
                }
            }
        }
        (value, grad)
    }

    /// Custom tape ops for `Σ Q` and `Σ W` over `d × B` state batches.
    pub fn tape_ops(self: &Arc<Self>) -> Vec<Arc<dyn CustomOp>> {
        vec![
            Arc::new(ColumnCost {
                spec: self.clone(),
                kind: CostKind::Obstacle,
            }),
            Arc::new(ColumnCost {
                spec: self.clone(),
                kind: CostKind::Interaction,
            }),
        ]
    }

    pub fn uses_obstacle(&self) -> bool {
        self.alpha2 != 0.0 && !self.obstacle.is_empty()
    }

    pub fn uses_interaction(&self) -> bool {
        self.alpha3 != 0.0 && self.agents > 1
    }
}

pub const OBSTACLE_OP: &str = "obstacle_q";
pub const INTERACTION_OP: &str = "interaction_w";

#[derive(Clone, Copy, Debug)]
enum CostKind {
    Obstacle,
    Interaction,
}

struct ColumnCost {
    spec: Arc<ProblemSpec>,
    kind: CostKind,
}

impl ColumnCost {
    fn eval(&self, z: &[f64]) -> (f64, Vec<f64>) {
        match self.kind {
            CostKind::Obstacle => self.spec.obstacle_total(z),
            CostKind::Interaction => self.spec.interaction_total(z),
        }
    }
}

impl CustomOp for ColumnCost {
    fn name(&self) -> &'static str {
        match self.kind {
            CostKind::Obstacle => OBSTACLE_OP,
            CostKind::Interaction => INTERACTION_OP,
        }
    }

    fn output_rows(&self, input_rows: usize) -> Result<usize> {
        if input_rows != self.spec.d() {
            return Err(Error::dim(self.name(), self.spec.d(), input_rows));
        }
        Ok(1)
    }

    fn forward(&self, input: &Mat) -> Mat {
        let data = (0..input.cols).map(|j| self.eval(&input.col_to_vec(j)).0).collect();
        Mat::from_vec(1, input.cols, data)
    }

    fn backward(&self, input: &Mat, _output: &Mat, out_grad: &Mat) -> Mat {
        let mut g = Mat::zeros(input.rows, input.cols);
        for j in 0..input.cols {
            let gj = out_grad.data[j];
            if gj == 0.0 {
                continue;
            }
            let (_, grad) = self.eval(&input.col_to_vec(j));
            for (i, v) in grad.iter().enumerate() {
                g.set(i, j, gj * v);
            }
        }
        g
    }
}

impl ControlProblem for ProblemSpec {
    fn dim(&self) -> usize {
        self.d()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn optimal_control(&self, _t: f64, _x: &[f64], p: &[f64]) -> Vec<f64> {
        optimal_control(p)
    }

    fn hamiltonian(&self, t: f64, x: &[f64], p: &[f64]) -> f64 {
        hamiltonian(t, x, p, self)
    }

    fn grad_p_hamiltonian(&self, _t: f64, _x: &[f64], p: &[f64]) -> Vec<f64> {
        grad_p_hamiltonian(p)
    }

    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        running_cost(t, x, u, self)
    }

    fn terminal_cost(&self, z: &[f64]) -> (f64, Vec<f64>) {
        terminal_g(z, self)
    }

    fn state_cost(&self, _t: f64, x: &[f64]) -> f64 {
        let mut v = 0.0;
        if self.uses_obstacle() {
            v += self.alpha2 * self.obstacle_total(x).0;
        }
        if self.uses_interaction() {
            v += self.alpha3 * self.interaction_total(x).0;
        }
        v
    }
}

/// `H(t, x, p) = ½‖p‖² − α2 Q(x) − α3 W(x)`.
pub fn hamiltonian(t: f64, x: &[f64], p: &[f64], spec: &ProblemSpec) -> f64 {
    0.5 * norm_sq(p) - spec.state_cost(t, x)
}

/// `L(t, x, u) = Σᵢ ½‖uᵢ‖² + α2 Σᵢ Qᵢ + α3 Σ_{j≠i} Wᵢⱼ`.
pub fn running_cost(t: f64, x: &[f64], u: &[f64], spec: &ProblemSpec) -> f64 {
    0.5 * norm_sq(u) + spec.state_cost(t, x)
}

/// `G(z) = (α1/2)‖z − y‖²` and `∇G = α1(z − y)`.
pub fn terminal_g(z: &[f64], spec: &ProblemSpec) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = z.iter().zip(&spec.target).map(|(a, b)| a - b).collect();
    let value = 0.5 * spec.alpha1 * dot(&diff, &diff);
    let grad = diff.iter().map(|v| spec.alpha1 * v).collect();
    (value, grad)
}

/// Analytic value function of the obstacle- and interaction-free problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqrValue {
    pub phi: f64,
    pub dphi_dt: f64,
}

fn lqr_check(spec: &ProblemSpec) -> Result<()> {
    if spec.alpha2 != 0.0 || spec.alpha3 != 0.0 {
        return Err(Error::Config(format!(
            "analytic reference needs alpha2 = alpha3 = 0 (got {}, {})",
            spec.alpha2, spec.alpha3
        )));
    }
    if !(spec.alpha1 > 0.0) {
        return Err(Error::Config("analytic reference needs alpha1 > 0".into()));
    }
    Ok(())
}

/// `Φ*(t, x) = ‖x − y‖² / (2(1/α1 + T − t))`.
pub fn lqr_reference_phi(t: f64, x: &[f64], spec: &ProblemSpec) -> Result<f64> {
    lqr_check(spec)?;
    let denom = 1.0 / spec.alpha1 + spec.horizon - t;
    let diff: Vec<f64> = x.iter().zip(&spec.target).map(|(a, b)| a - b).collect();
    Ok(norm_sq(&diff) / (2.0 * denom))
}

/// `Φ*`, `∇ₓΦ*` and `∂ₜΦ*` of the analytic reference.
pub fn lqr_reference_with_grad(t: f64, x: &[f64], spec: &ProblemSpec) -> Result<(f64, Vec<f64>, f64)> {
    lqr_check(spec)?;
    let denom = 1.0 / spec.alpha1 + spec.horizon - t;
    let diff: Vec<f64> = x.iter().zip(&spec.target).map(|(a, b)| a - b).collect();
    let sq = norm_sq(&diff);
    let grad = diff.iter().map(|v| v / denom).collect();
    Ok((sq / (2.0 * denom), grad, sq / (2.0 * denom * denom)))
}

/// Two agents in the plane swapping sides through a corridor between two hills.
pub fn make_corridor_spec() -> ProblemSpec {
    ProblemSpec {
        id: "corridor".into(),
        agents: 2,
        agent_dim: 2,
        horizon: 1.0,
        x0: vec![-2.0, -2.0, 2.0, -2.0],
        target: vec![2.0, 2.0, -2.0, 2.0],
        alpha1: 100.0,
        alpha2: 10_000.0,
        alpha3: 300.0,
        radius: 0.5,
        obstacle: corridor_obstacles(),
        rho0_std: 1.0,
        continuous_interaction: false,
    }
}

pub const CORRIDOR_CENTERS: [[f64; 2]; 4] = [[-2.5, 0.0], [-1.0, 0.0], [1.0, 0.0], [2.5, 0.0]];
pub const CORRIDOR_VARIANCE: f64 = 0.1;
pub const CORRIDOR_AMPLITUDE: f64 = 1.0;

fn corridor_obstacles() -> ObstacleField {
    ObstacleField::GaussianSum {
        centers: CORRIDOR_CENTERS.iter().map(|c| c.to_vec()).collect(),
        variances: vec![CORRIDOR_VARIANCE; 4],
        amplitudes: vec![CORRIDOR_AMPLITUDE; 4],
    }
}

/// `n` agents in a formation of rows of four, translating along `y` through
/// a gate between two tall box obstacles. The gate is narrower than the
/// formation plus the obstacle clearance, so the formation has to contract.
pub fn make_swarm_spec(n: usize) -> ProblemSpec {
    let cols = n.min(SWARM_ROW_LEN).max(1);
    let mut x0 = Vec::with_capacity(3 * n);
    let mut target = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (row, col) = (i / cols, i % cols);
        let x = SWARM_SPACING * (col as f64 - (cols - 1) as f64 / 2.0);
        let z = SWARM_SPACING * row as f64;
        x0.extend_from_slice(&[x, -SWARM_TRAVEL, z]);
        target.extend_from_slice(&[x, SWARM_TRAVEL, z]);
    }
    let rows = n.div_ceil(cols);
    let (z_lo, z_hi) = (-2.0, SWARM_SPACING * (rows as f64 - 1.0) + 2.0);
    let gate = |lo_x: f64, hi_x: f64| PrismBox {
        lo: vec![lo_x, -SWARM_GATE_DEPTH, z_lo],
        hi: vec![hi_x, SWARM_GATE_DEPTH, z_hi],
    };
    ProblemSpec {
        id: format!("swarm{n}"),
        agents: n,
        agent_dim: 3,
        horizon: 1.0,
        x0,
        target,
        alpha1: 100.0,
        alpha2: 10_000.0,
        alpha3: 300.0,
        radius: 0.5,
        obstacle: ObstacleField::PrismSet {
            boxes: vec![
                gate(-SWARM_GATE_HALF_WIDTH - 2.0, -SWARM_GATE_HALF_WIDTH),
                gate(SWARM_GATE_HALF_WIDTH, SWARM_GATE_HALF_WIDTH + 2.0),
            ],
            tau: 0.1,
        },
        rho0_std: 0.1,
        continuous_interaction: false,
    }
}

pub const SWARM_ROW_LEN: usize = 4;
pub const SWARM_SPACING: f64 = 2.0;
pub const SWARM_TRAVEL: f64 = 3.0;
pub const SWARM_GATE_HALF_WIDTH: f64 = 4.2;
pub const SWARM_GATE_DEPTH: f64 = 0.5;

/// Single agent, no obstacles or interaction: the analytic reference problem.
pub fn make_lqr_spec(q: usize) -> ProblemSpec {
    ProblemSpec {
        id: "lqr".into(),
        agents: 1,
        agent_dim: q,
        horizon: 1.0,
        x0: vec![-2.0; q],
        target: vec![2.0; q],
        alpha1: 100.0,
        alpha2: 0.0,
        alpha3: 0.0,
        radius: 0.5,
        obstacle: ObstacleField::none(),
        rho0_std: 1.0,
        continuous_interaction: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-r..r)).collect()
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn single_agent_free(q: usize) -> ProblemSpec {
        let mut s = make_lqr_spec(q);
        s.target = vec![0.0; q];
        s
    }

    #[test]
    fn optimal_control_is_negated_adjoint() {
        assert_eq!(optimal_control(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(optimal_control(&[1.0, -2.0]), vec![-1.0, 2.0]);
    }

    #[test]
    fn optimal_control_maximizes_hamiltonian_integrand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_vec(&mut rng, 4, 3.0);
        let u_star = optimal_control(&p);
        let objective = |u: &[f64]| -dot(&p, u) - 0.5 * norm_sq(u);
        let best = objective(&u_star);
        for _ in 0..1000 {
            let u = rand_vec(&mut rng, 4, 6.0);
            assert!(objective(&u) < best);
        }
    }

    #[test]
    fn hamiltonian_reference_values() {
        let spec = single_agent_free(2);
        assert_eq!(hamiltonian(0.0, &[5.0, 5.0], &[0.0, 0.0], &spec), 0.0);
        assert_eq!(hamiltonian(0.0, &[1.0, 1.0], &[3.0, 4.0], &spec), 12.5);
    }

    #[test]
    fn hamiltonian_equals_brute_force_supremum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = make_corridor_spec();
        // Single-agent view of the corridor field for a d = 2 control grid.
        let mut one = spec.clone();
        one.agents = 1;
        one.x0.truncate(2);
        one.target.truncate(2);
        for _ in 0..3 {
            let x = rand_vec(&mut rng, 2, 3.0);
            let p = rand_vec(&mut rng, 2, 1.0);
            let half = 4.0 * crate::linalg::norm(&p);
            let step = 1e-3;
            let n = (2.0 * half / step).round() as i64;
            let mut best = f64::NEG_INFINITY;
            let state = one.state_cost(0.0, &x);
            for i in 0..=n {
                let u0 = -half + i as f64 * step;
                // The integrand is separable; maximize the second coordinate
                // analytically along each grid line would hide errors, so
                // sweep both on the same grid.
                for j in 0..=n {
                    let u1 = -half + j as f64 * step;
                    let v = -(p[0] * u0 + p[1] * u1) - 0.5 * (u0 * u0 + u1 * u1) - state;
                    if v > best {
                        best = v;
                    }
                }
            }
            assert_abs_diff_eq!(hamiltonian(0.0, &x, &p, &one), best, epsilon = 1e-4);
        }
    }

    #[test]
    fn grad_p_hamiltonian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = make_corridor_spec();
        let x = rand_vec(&mut rng, 4, 2.0);
        let p = rand_vec(&mut rng, 4, 2.0);
        assert_eq!(grad_p_hamiltonian(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(grad_p_hamiltonian(&[1.0, 0.0]), vec![1.0, 0.0]);
        let g = fd(|p| hamiltonian(0.0, &x, p, &spec), &p, 1e-5);
        for (a, b) in grad_p_hamiltonian(&p).iter().zip(&g) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn running_cost_reference_values() {
        let spec = make_corridor_spec();
        let far = running_cost(0.0, &[-10.0, -10.0, 10.0, 10.0], &[0.0; 4], &spec);
        assert!((0.0..1e-50).contains(&far));
        let free = single_agent_free(2);
        assert_eq!(running_cost(0.0, &[0.0, 0.0], &[1.0, 1.0], &free), 1.0);
    }

    #[test]
    fn corridor_running_cost_at_x0_matches_direct_sum() {
        let spec = make_corridor_spec();
        let x0 = &spec.x0;
        let mut q = 0.0;
        for agent in [[x0[0], x0[1]], [x0[2], x0[3]]] {
            for c in CORRIDOR_CENTERS {
                let d2 = (agent[0] - c[0]).powi(2) + (agent[1] - c[1]).powi(2);
                q += CORRIDOR_AMPLITUDE * (-d2 / (2.0 * CORRIDOR_VARIANCE)).exp();
            }
        }
        // Agents start 4 apart: no interaction.
        let expect = spec.alpha2 * q;
        assert_abs_diff_eq!(running_cost(0.0, x0, &[0.0; 4], &spec), expect, epsilon = 1e-12);
    }

    #[test]
    fn interaction_reference_values() {
        assert_eq!(interaction_w(&[1.0, 2.0], &[1.0, 2.0], 0.5), 1.0);
        assert_eq!(interaction_w(&[0.0, 0.0], &[1.5, 0.0], 0.5), 0.0);
        assert_abs_diff_eq!(interaction_w(&[0.0, 0.0], &[0.0, 0.5], 0.5), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(interaction_w(&[0.0, 0.0], &[0.0, 0.5], 0.5), 0.606531, epsilon = 1e-6);
        // Jump at the cutoff.
        assert!(interaction_w(&[0.0], &[0.999_999], 0.5) > 0.13);
        assert_eq!(interaction_w(&[0.0], &[1.0], 0.5), 0.0);
        assert_abs_diff_eq!(interaction_w_with(&[0.0], &[1.0 - 1e-12], 0.5, true), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn interaction_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = rand_vec(&mut rng, 3, 1.0);
            let b = rand_vec(&mut rng, 3, 1.0);
            let w = interaction_w(&a, &b, 0.5);
            assert_eq!(w, interaction_w(&b, &a, 0.5));
            let dist = crate::linalg::norm(&crate::linalg::sub(&a, &b));
            if dist < 1.0 {
                assert!(w > 0.0 && w <= 1.0);
            } else {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn obstacle_reference_values() {
        let field = ObstacleField::GaussianSum {
            centers: vec![vec![1.0, -1.0]],
            variances: vec![0.3],
            amplitudes: vec![1.0],
        };
        let (v, g) = obstacle_q(&[1.0, -1.0], &field);
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = obstacle_q(&[20.0, 20.0], &field);
        assert!(v < 1e-100);

        let cube = ObstacleField::PrismSet {
            boxes: vec![PrismBox {
                lo: vec![0.0; 3],
                hi: vec![1.0; 3],
            }],
            tau: 0.1,
        };
        let s5 = 1.0 / (1.0 + (-5.0f64).exp());
        let (v, g) = obstacle_q(&[0.5; 3], &cube);
        assert_abs_diff_eq!(v, s5.powi(6), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.960_51, epsilon = 1e-5);
        for gi in g {
            assert_abs_diff_eq!(gi, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corridor = make_corridor_spec();
        let swarm = make_swarm_spec(4);
        for _ in 0..200 {
            let z = rand_vec(&mut rng, 4, 3.0);
            let (_, g) = corridor.obstacle_total(&z);
            let f = fd(|z| corridor.obstacle_total(z).0, &z, 1e-6);
            for (a, b) in g.iter().zip(&f) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
            let (_, g) = terminal_g(&z, &corridor);
            let f = fd(|z| terminal_g(z, &corridor).0, &z, 1e-5);
            for (a, b) in g.iter().zip(&f) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6 * a.abs().max(1.0));
            }
            let zs = rand_vec(&mut rng, 12, 2.0);
            let (_, g) = swarm.obstacle_total(&zs);
            let f = fd(|z| swarm.obstacle_total(z).0, &zs, 1e-6);
            for (a, b) in g.iter().zip(&f) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
        // Interaction gradient away from the cutoff.
        let z = [0.0, 0.0, 0.3, 0.4];
        let (_, g) = corridor.interaction_total(&z);
        let f = fd(|z| corridor.interaction_total(z).0, &z, 1e-6);
        for (a, b) in g.iter().zip(&f) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn terminal_cost_reference_values() {
        let mut spec = make_lqr_spec(4);
        spec.target = vec![1.0, 2.0, 3.0, 4.0];
        let (v, g) = terminal_g(&spec.target.clone(), &spec);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = terminal_g(&[1.1, 2.0, 3.0, 4.0], &spec);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 10.0, epsilon = 1e-12);
        assert_eq!(&g[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn legendre_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = make_corridor_spec();
        for _ in 0..1000 {
            let t = rng.gen_range(0.0..1.0);
            let x = rand_vec(&mut rng, 4, 3.0);
            let p = rand_vec(&mut rng, 4, 5.0);
            let u = optimal_control(&p);
            let lhs = running_cost(t, &x, &u, &spec);
            let rhs = dot(&p, &grad_p_hamiltonian(&p)) - hamiltonian(t, &x, &p, &spec);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn lqr_reference_values() {
        let spec = make_lqr_spec(2);
        let y = spec.target.clone();
        let x = [y[0] + 1.0, y[1]];
        assert_abs_diff_eq!(lqr_reference_phi(1.0, &x, &spec).unwrap(), 50.0, epsilon = 1e-12);
        assert_eq!(lqr_reference_phi(0.3, &y, &spec).unwrap(), 0.0);
        let v = lqr_reference_phi(0.0, &x, &spec).unwrap();
        assert_abs_diff_eq!(v, 0.495_049_5, epsilon = 1e-6);

        // Brute-force minimum over constant velocities.
        let mut best = f64::INFINITY;
        for i in 0..=40_000 {
            let v = -2.0 + i as f64 * 1e-4;
            let cost = 0.5 * v * v + 50.0 * (1.0 + v).powi(2);
            best = best.min(cost);
        }
        assert_abs_diff_eq!(v, best, epsilon = 1e-6);
    }

    #[test]
    fn lqr_reference_solves_hjb() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = make_lqr_spec(3);
        for _ in 0..1000 {
            let t = rng.gen_range(0.0..1.0);
            let x = rand_vec(&mut rng, 3, 3.0);
            // Time step scaled to the distance from the singular horizon.
            let denom = 1.0 / spec.alpha1 + spec.horizon - t;
            let ht = 1e-5 * denom;
            let dt = (lqr_reference_phi(t + ht, &x, &spec).unwrap()
                - lqr_reference_phi(t - ht, &x, &spec).unwrap())
                / (2.0 * ht);
            let grad = fd(|x| lqr_reference_phi(t, x, &spec).unwrap(), &x, 1e-5);
            let resid = dt - 0.5 * norm_sq(&grad);
            assert!(resid.abs() <= 1e-8 * dt.abs().max(1.0), "residual {resid:e}");
            let (_, g, d) = lqr_reference_with_grad(t, &x, &spec).unwrap();
            assert_abs_diff_eq!(d - 0.5 * norm_sq(&g), 0.0, epsilon = 1e-9 * d.max(1.0));
        }
    }

    #[test]
    fn lqr_reference_rejects_obstacles() {
        assert!(lqr_reference_phi(0.0, &[0.0; 4], &make_corridor_spec()).is_err());
    }

    #[test]
    fn preset_specs() {
        let c = make_corridor_spec();
        c.validate().unwrap();
        assert_eq!(c.d(), 4);
        assert_eq!((c.alpha1, c.alpha2, c.alpha3), (100.0, 10_000.0, 300.0));
        let l = make_lqr_spec(2);
        l.validate().unwrap();
        assert_eq!(running_cost(0.3, &[7.0, -1.0], &[0.0, 0.0], &l), 0.0);
        let s = make_swarm_spec(8);
        s.validate().unwrap();
        assert_eq!(s.d(), 24);
        // Initial formation is collision free and every agent starts clear
        // of the gate.
        let audit_w = s.interaction_total(&s.x0).0;
        assert_eq!(audit_w, 0.0);
        assert!(s.obstacle_total(&s.x0).0 < 1e-9);
        assert!(s.obstacle_total(&s.target).0 < 1e-9);
        for k in 0..=20 {
            let f = k as f64 / 20.0;
            let z: Vec<f64> = s.x0.iter().zip(&s.target).map(|(a, b)| a + f * (b - a)).collect();
            assert!(s.obstacle_total(&z).0 < 1e-4, "straight path blocked at {f}");
        }
    }
}
