//! Run configuration, checkpoints and CSV exports.

use crate::baseline::{BaselineOptions, BaselineSolution};
use crate::error::{Error, Result};
use crate::evaluation::{standard_variants, AblationVariant, ShockScenario};
use crate::integrator::TrajectoryRecord;
use crate::linalg::Mat;
use crate::problems::{make_corridor_spec, make_lqr_spec, make_swarm_spec, ObstacleField, ProblemSpec};
use crate::training::{HistoryRow, ObjectiveTerms, TrainConfig, TrainHistory};
use crate::valuefn::ValueFnParams;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Corridor,
    Swarm,
    Lqr,
}

pub const DEFAULT_SWARM_AGENTS: usize = 8;
pub const DEFAULT_LQR_DIM: usize = 2;

/// Problem preset with optional overrides of any field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho0_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuous_interaction: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ObstacleField>,
}

impl ProblemConfig {
    pub fn preset(preset: Preset) -> Self {
        ProblemConfig {
            preset,
            agents: None,
            agent_dim: None,
            horizon: None,
            alpha1: None,
            alpha2: None,
            alpha3: None,
            radius: None,
            rho0_std: None,
            continuous_interaction: None,
            x0: None,
            target: None,
            obstacle: None,
        }
    }

    pub fn resolve(&self) -> Result<ProblemSpec> {
        let mut spec = match self.preset {
            Preset::Corridor => make_corridor_spec(),
            Preset::Swarm => make_swarm_spec(self.agents.unwrap_or(DEFAULT_SWARM_AGENTS)),
            Preset::Lqr => make_lqr_spec(self.agent_dim.unwrap_or(DEFAULT_LQR_DIM)),
        };
        if let Some(n) = self.agents.filter(|n| *n != spec.agents) {
            return Err(Error::Config(format!("preset {:?} has {} agents, not {n}", self.preset, spec.agents)));
        }
        if let Some(q) = self.agent_dim.filter(|q| *q != spec.agent_dim) {
            return Err(Error::Config(format!(
                "preset {:?} has agent dimension {}, not {q}",
                self.preset, spec.agent_dim
            )));
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    spec.$field = v.clone();
                }
            )*};
        }
        set!(horizon, alpha1, alpha2, alpha3, radius, rho0_std, continuous_interaction, x0, target, obstacle);
        spec.validate()?;
        Ok(spec)
    }

    /// Every field filled in from the resolved problem.
    pub fn materialized(&self) -> Result<Self> {
        let s = self.resolve()?;
        Ok(ProblemConfig {
            preset: self.preset,
            agents: Some(s.agents),
            agent_dim: Some(s.agent_dim),
            horizon: Some(s.horizon),
            alpha1: Some(s.alpha1),
            alpha2: Some(s.alpha2),
            alpha3: Some(s.alpha3),
            radius: Some(s.radius),
            rho0_std: Some(s.rho0_std),
            continuous_interaction: Some(s.continuous_interaction),
            x0: Some(s.x0),
            target: Some(s.target),
            obstacle: Some(s.obstacle),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
    /// Validation cost used to compare convergence speed.
    pub threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            variants: standard_variants(),
            threshold: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: String,
    pub problem: ProblemConfig,
    pub train: TrainConfig,
    pub baseline: BaselineOptions,
    pub shocks: Vec<ShockScenario>,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Defaults suited to the preset.
    pub fn for_preset(preset: Preset) -> Self {
        let mut train = TrainConfig::default();
        let mut baseline = BaselineOptions::default();
        match preset {
            Preset::Corridor => {}
            Preset::Swarm => {
                train.width = 128;
                train.n_t_train = 26;
                train.n_t_val = 80;
                baseline.n_t = 80;
            }
            Preset::Lqr => {
                train.iterations = 1000;
                train.lr0 = 0.1;
                train.lr_decay_every = 500;
                train.beta1 = 0.1;
                train.beta2 = 0.1;
                train.beta3 = 0.1;
            }
        }
        RunConfig {
            out_dir: "runs".into(),
            problem: ProblemConfig::preset(preset),
            train,
            baseline,
            shocks: vec![ShockScenario::with_magnitude(0.94, 0), ShockScenario::with_magnitude(6.2, 0)],
            ablation: AblationConfig::default(),
        }
    }

    /// Parses TOML, filling omitted fields from the preset defaults and
    /// rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {}", e.message())))?;
        let preset = match user.get("problem").and_then(|p| p.get("preset")) {
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|_| Error::Config(format!("unknown problem preset {v}")))?,
            None => return Err(Error::Config("missing problem.preset".into())),
        };
        let mut merged = toml::Table::try_from(RunConfig::for_preset(preset))?;
        merge_tables(&mut merged, user);
        let mut unknown = Vec::new();
        let merged_text = toml::to_string(&merged)?;
        let de = toml::Deserializer::new(&merged_text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.message().to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown fields: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.problem.resolve()?;
        self.train.validate()?;
        for s in &self.shocks {
            s.step(spec.horizon, self.train.n_t_val)?;
            s.resolve_xi(spec.d())?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        self.problem.resolve()
    }

    /// Fully resolved configuration as TOML.
    pub fn export(&self) -> Result<String> {
        let full = RunConfig {
            problem: self.problem.materialized()?,
            ..self.clone()
        };
        Ok(toml::to_string(&full)?)
    }

    /// Applies a seed to training and the baseline.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.baseline.seed = seed;
        self
    }

    /// Sets the validation resolution, keeping training no finer.
    pub fn with_validation_steps(mut self, n_t: usize) -> Self {
        self.train.n_t_val = n_t;
        self.train.n_t_train = self.train.n_t_train.min(n_t);
        self.baseline.n_t = n_t;
        self
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "obstacle" => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Self-describing JSON snapshot of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub problem_id: String,
    pub spec: ProblemSpec,
    pub config: TrainConfig,
    pub iteration: usize,
    pub dim: usize,
    pub width: usize,
    pub tensors: Vec<NamedTensor>,
    pub rng_state: Option<ChaCha8Rng>,
    pub best_validation: Option<ObjectiveTerms>,
}

impl Checkpoint {
    pub fn new(
        spec: &ProblemSpec,
        config: &TrainConfig,
        iteration: usize,
        params: &ValueFnParams,
        rng: Option<&ChaCha8Rng>,
        best_validation: Option<ObjectiveTerms>,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            problem_id: spec.id.clone(),
            spec: spec.clone(),
            config: config.clone(),
            iteration,
            dim: params.d,
            width: params.m,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, (shape, data))| NamedTensor {
                    name: name.to_string(),
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
            rng_state: rng.cloned(),
            best_validation,
        }
    }

    pub fn params(&self) -> Result<ValueFnParams> {
        let named: Vec<(String, [usize; 2], Vec<f64>)> =
            self.tensors.iter().map(|t| (t.name.clone(), t.shape, t.data.clone())).collect();
        ValueFnParams::from_named(self.dim, self.width, &named)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version: serde_json::Value = serde_json::from_str(text)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Serde(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Serde("checkpoint has no format_version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(version)?;
        ck.spec.validate()?;
        ck.params()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One trajectory in long format.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable {
    pub run_id: String,
    pub agents: usize,
    pub agent_dim: usize,
    pub times: Vec<f64>,
    pub states: Mat,
    pub controls: Mat,
    pub ell_cum: Vec<f64>,
    pub chjt_cum: Vec<f64>,
}

impl TrajectoryTable {
    pub fn from_record(run_id: &str, rec: &TrajectoryRecord, spec: &ProblemSpec) -> Self {
        TrajectoryTable {
            run_id: run_id.into(),
            agents: spec.agents,
            agent_dim: spec.agent_dim,
            times: rec.times.clone(),
            states: rec.states.clone(),
            controls: rec.controls.clone(),
            ell_cum: rec.ell.clone(),
            chjt_cum: rec.chjt.clone(),
        }
    }

    /// Rows up to and including grid row `last`.
    pub fn truncated(mut self, last: usize) -> Self {
        let rows = last + 1;
        self.times.truncate(rows);
        self.ell_cum.truncate(rows);
        self.chjt_cum.truncate(rows);
        self.states = Mat::from_vec(rows, self.states.cols, self.states.data[..rows * self.states.cols].to_vec());
        self.controls = Mat::from_vec(rows, self.controls.cols, self.controls.data[..rows * self.controls.cols].to_vec());
        self
    }

    /// Euler states of a baseline solution; the control after the last
    /// step is zero and the HJB residual is undefined.
    pub fn from_baseline(run_id: &str, sol: &BaselineSolution, spec: &ProblemSpec) -> Self {
        let n_t = sol.schedule.n_t();
        let d = spec.d();
        let mut controls = Mat::zeros(n_t + 1, d);
        controls.data[..n_t * d].copy_from_slice(&sol.schedule.controls.data);
        TrajectoryTable {
            run_id: run_id.into(),
            agents: spec.agents,
            agent_dim: spec.agent_dim,
            times: (0..=n_t).map(|k| sol.schedule.time(k)).collect(),
            states: sol.forward.states.clone(),
            controls,
            ell_cum: sol.forward.ell_cum.clone(),
            chjt_cum: vec![f64::NAN; n_t + 1],
        }
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn trajectory_header(agent_dim: usize) -> Vec<String> {
    let mut h = vec!["run_id".to_string(), "t".into(), "agent".into()];
    h.extend((0..agent_dim).map(|i| format!("coord{i}")));
    h.extend((0..agent_dim).map(|i| format!("u{i}")));
    h.extend(["ell_cum".to_string(), "chjt_cum".into()]);
    h
}

/// Writes trajectories sharing one agent dimension.
pub fn write_trajectories<W: Write>(out: W, tables: &[TrajectoryTable]) -> Result<()> {
    let q = tables.first().map_or(0, |t| t.agent_dim);
    if let Some(t) = tables.iter().find(|t| t.agent_dim != q) {
        return Err(Error::dim("trajectory agent dimension", q, t.agent_dim));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(q)).map_err(csv_err)?;
    for t in tables {
        for k in 0..t.times.len() {
            let (z, u) = (t.states.row(k), t.controls.row(k));
            for a in 0..t.agents {
                let mut rec = vec![t.run_id.clone(), fmt_f64(t.times[k]), a.to_string()];
                rec.extend(z[a * q..(a + 1) * q].iter().map(|v| fmt_f64(*v)));
                rec.extend(u[a * q..(a + 1) * q].iter().map(|v| fmt_f64(*v)));
                rec.push(fmt_f64(t.ell_cum[k]));
                rec.push(fmt_f64(t.chjt_cum[k]));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        reason: e.to_string(),
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        reason: format!("missing column {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        reason: format!("invalid {name} value {raw:?}"),
    })
}

/// Reads trajectories in file order, grouped by `run_id`.
pub fn read_trajectories<R: Read>(input: R) -> Result<Vec<TrajectoryTable>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols = header.len();
    if cols < 5 || (cols - 5) % 2 != 0 {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected trajectory header with {cols} columns"),
        });
    }
    let q = (cols - 5) / 2;
    let expected = trajectory_header(q);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header {}", expected.join(",")),
        });
    }

    struct Partial {
        run_id: String,
        times: Vec<f64>,
        rows: Vec<Vec<(usize, Vec<f64>, Vec<f64>)>>,
        ell: Vec<f64>,
        chjt: Vec<f64>,
    }
    let mut runs: Vec<Partial> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols {
            return Err(Error::Parse {
                line,
                reason: format!("expected {cols} fields, found {}", rec.len()),
            });
        }
        let run_id = rec[0].to_string();
        let t: f64 = parse_field(&rec, 1, line, "t")?;
        let agent: usize = parse_field(&rec, 2, line, "agent")?;
        let mut z = Vec::with_capacity(q);
        let mut u = Vec::with_capacity(q);
        for i in 0..q {
            z.push(parse_field(&rec, 3 + i, line, &expected[3 + i])?);
            u.push(parse_field(&rec, 3 + q + i, line, &expected[3 + q + i])?);
        }
        let ell: f64 = parse_field(&rec, 3 + 2 * q, line, "ell_cum")?;
        let chjt: f64 = parse_field(&rec, 4 + 2 * q, line, "chjt_cum")?;

        if runs.last().map_or(true, |p| p.run_id != run_id) {
            if runs.iter().any(|p| p.run_id == run_id) {
                return Err(Error::Parse {
                    line,
                    reason: format!("rows of run {run_id:?} are not contiguous"),
                });
            }
            runs.push(Partial {
                run_id,
                times: Vec::new(),
                rows: Vec::new(),
                ell: Vec::new(),
                chjt: Vec::new(),
            });
        }
        let p = runs.last_mut().expect("pushed above");
        if p.times.last() != Some(&t) || agent == 0 {
            if agent != 0 {
                return Err(Error::Parse {
                    line,
                    reason: format!("time {t} starts with agent {agent}, expected 0"),
                });
            }
            p.times.push(t);
            p.rows.push(Vec::new());
            p.ell.push(ell);
            p.chjt.push(chjt);
        }
        let row = p.rows.last_mut().expect("pushed above");
        if agent != row.len() {
            return Err(Error::Parse {
                line,
                reason: format!("expected agent {}, found {agent}", row.len()),
            });
        }
        row.push((agent, z, u));
    }

    runs.into_iter()
        .map(|p| {
            let agents = p.rows.first().map_or(0, |r| r.len());
            if let Some(bad) = p.rows.iter().position(|r| r.len() != agents) {
                return Err(Error::Parse {
                    line: 0,
                    reason: format!("run {:?}: time index {bad} has {} agents, expected {agents}", p.run_id, p.rows[bad].len()),
                });
            }
            let d = agents * q;
            let mut states = Mat::zeros(p.rows.len(), d);
            let mut controls = Mat::zeros(p.rows.len(), d);
            for (k, row) in p.rows.iter().enumerate() {
                for (a, z, u) in row {
                    states.row_mut(k)[a * q..(a + 1) * q].copy_from_slice(z);
                    controls.row_mut(k)[a * q..(a + 1) * q].copy_from_slice(u);
                }
            }
            Ok(TrajectoryTable {
                run_id: p.run_id,
                agents,
                agent_dim: q,
                times: p.times,
                states,
                controls,
                ell_cum: p.ell,
                chjt_cum: p.chjt,
            })
        })
        .collect()
}

pub const HISTORY_HEADER: [&str; 10] = [
    "iteration",
    "train_objective",
    "val_ell",
    "val_g",
    "val_ell_plus_g",
    "val_chjt",
    "val_chjfin",
    "val_chjgrad",
    "lr",
    "wall_time",
];

pub fn write_history<W: Write>(out: W, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER).map_err(csv_err)?;
    for r in &history.rows {
        let nums = [
            r.train_objective,
            r.val_ell,
            r.val_g,
            r.val_cost(),
            r.val_chjt,
            r.val_chjfin,
            r.val_chjgrad,
            r.lr,
            r.wall_time,
        ];
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(nums.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history<R: Read>(input: R) -> Result<TrainHistory> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HISTORY_HEADER) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header {}", HISTORY_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let f = |i: usize| parse_field::<f64>(&rec, i, line, HISTORY_HEADER[i]);
        rows.push(HistoryRow {
            iteration: parse_field(&rec, 0, line, "iteration")?,
            train_objective: f(1)?,
            val_ell: f(2)?,
            val_g: f(3)?,
            val_chjt: f(5)?,
            val_chjfin: f(6)?,
            val_chjgrad: f(7)?,
            lr: f(8)?,
            wall_time: f(9)?,
        });
    }
    Ok(TrainHistory { rows })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
