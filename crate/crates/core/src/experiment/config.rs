use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_csv;
use crate::qp::{AdmmSettings, ITERATIVE_MAX_ITER, ITERATIVE_TOL};
use crate::reference::{heart, sine, ReferenceTrajectory};
use crate::systems::{builtin, CostWeights, KoopmanSystem};

/// One experiment, as read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `slow_manifold`, `quartic_manifold` or `unicycle`.
    pub system: String,
    /// Required for sine references, checked against the others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub windows: Vec<usize>,
    pub t_ini: usize,
    pub weights: WeightSpec,
    pub reference: ReferenceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    pub controller: ControllerSpec,
    /// Start of the closed loop; defaults to `r_1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<OuterSweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// `Q_z = diag(q_z)`, `R = r_scale * I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub q_z: Vec<f64>,
    pub r_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `r_t[channel] = amplitude * sin(2 pi t / period)`, zero elsewhere.
    Sine {
        amplitude: f64,
        period: f64,
        #[serde(default = "default_channel")]
        channel: usize,
    },
    Heart { cycles: usize, steps_per_cycle: usize },
    /// One target per row, one column per state coordinate.
    Csv { path: PathBuf },
}

fn default_channel() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Fixed trajectory length; otherwise `length_per_window * W + length_offset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default = "default_per_window")]
    pub length_per_window: usize,
    #[serde(default = "default_offset")]
    pub length_offset: usize,
    pub input_low: Vec<f64>,
    pub input_high: Vec<f64>,
    /// Trajectory `k` uses `seed + k`.
    pub seed: u64,
    /// One start state per library.
    pub initial_states: Vec<Vec<f64>>,
    /// Load previously collected data from here instead of collecting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

fn default_per_window() -> usize {
    2
}

fn default_offset() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Lmpc,
    LmpcQp,
    Ddpc,
    RegDdpc {
        lambda_g: f64,
        lambda_z: f64,
        #[serde(default)]
        switching: bool,
        #[serde(default = "default_angle_index")]
        angle_index: usize,
        #[serde(default = "default_admm_tol")]
        admm_tol: f64,
        #[serde(default = "default_admm_max_iter")]
        admm_max_iter: usize,
    },
}

fn default_angle_index() -> usize {
    2
}

fn default_admm_tol() -> f64 {
    ITERATIVE_TOL
}

fn default_admm_max_iter() -> usize {
    ITERATIVE_MAX_ITER
}

impl ControllerSpec {
    pub fn needs_data(&self) -> bool {
        matches!(self, ControllerSpec::Ddpc | ControllerSpec::RegDdpc { .. })
    }

    pub fn admm_settings(&self) -> AdmmSettings {
        match *self {
            ControllerSpec::RegDdpc {
                admm_tol, admm_max_iter, ..
            } => AdmmSettings {
                tol: admm_tol,
                max_iter: admm_max_iter,
                ..AdmmSettings::default()
            },
            _ => AdmmSettings::default(),
        }
    }
}

/// Outer grid for `sweep`: one fit per `(r_scale, amplitude)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterSweep {
    #[serde(default)]
    pub r_scales: Vec<f64>,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parse and validate; relative paths are taken from the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without validation or path resolution.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| cfg_err(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ReferenceSpec::Csv { path } = &mut self.reference {
            fix(path);
        }
        if let Some(dir) = self.data.as_mut().and_then(|d| d.dir.as_mut()) {
            fix(dir);
        }
        if let Some(out) = self.output_dir.as_mut() {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.system()?;
        if self.t_ini == 0 {
            return Err(cfg_err("t_ini must be at least 1"));
        }
        if self.windows.is_empty() {
            return Err(cfg_err("windows must list at least one W"));
        }
        if let ReferenceSpec::Csv { path } = &self.reference {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
        let horizon = self.horizon()?;
        for &w in &self.windows {
            if w == 0 || w >= horizon {
                return Err(cfg_err(format!("window {w} must satisfy 1 <= W < T = {horizon}")));
            }
        }
        self.weights()?.check_dims(sys.n_z(), sys.n_u())?;
        if let Some(z) = &self.initial_state {
            if z.len() != sys.n_z() {
                return Err(cfg_err(format!("initial_state has {} entries, system has {}", z.len(), sys.n_z())));
            }
        }
        if let Some(s) = &self.sweep {
            if s.r_scales.iter().chain(&s.amplitudes).any(|v| !v.is_finite()) {
                return Err(cfg_err("sweep values must be finite"));
            }
        }
        match (&self.controller, sys.lifted()) {
            (ControllerSpec::Lmpc | ControllerSpec::LmpcQp, None) => {
                return Err(cfg_err(format!("{} has no lifted model; use a data-driven controller", sys.name())));
            }
            (ControllerSpec::Lmpc, _) if self.windows.iter().any(|&w| w < 2) => {
                return Err(cfg_err("the closed-form controller needs W >= 2"));
            }
            (ControllerSpec::RegDdpc { switching, angle_index, .. }, _) if *switching && *angle_index >= sys.n_z() => {
                return Err(cfg_err("angle_index is out of range"));
            }
            _ => {}
        }
        if self.controller.needs_data() {
            let data = self
                .data
                .as_ref()
                .ok_or_else(|| cfg_err("data-driven controllers need a data section"))?;
            let libs = self.library_count();
            if data.initial_states.len() != libs {
                return Err(cfg_err(format!(
                    "expected {libs} data initial state(s), got {}",
                    data.initial_states.len()
                )));
            }
            if data.initial_states.iter().any(|z| z.len() != sys.n_z()) {
                return Err(cfg_err("data initial state has the wrong dimension"));
            }
            if data.input_low.len() != sys.n_u() || data.input_high.len() != sys.n_u() {
                return Err(cfg_err("input bounds have the wrong dimension"));
            }
            if data.input_low.iter().zip(&data.input_high).any(|(l, h)| !(l <= h)) {
                return Err(cfg_err("input_low must not exceed input_high"));
            }
            if let Some(dir) = &data.dir {
                if !dir.exists() {
                    return Err(Error::MissingFile(dir.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<KoopmanSystem> {
        builtin(&self.system)
    }

    /// Number of data libraries: four with orientation switching, else one.
    pub fn library_count(&self) -> usize {
        match self.controller {
            ControllerSpec::RegDdpc { switching: true, .. } => 4,
            _ => 1,
        }
    }

    pub fn weights(&self) -> Result<CostWeights> {
        self.weights_with(self.weights.r_scale)
    }

    pub fn weights_with(&self, r_scale: f64) -> Result<CostWeights> {
        let n_u = self.system()?.n_u();
        CostWeights::diagonal(&self.weights.q_z, &vec![r_scale; n_u]).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn horizon(&self) -> Result<usize> {
        let derived = match &self.reference {
            ReferenceSpec::Sine { .. } => None,
            ReferenceSpec::Heart { cycles, steps_per_cycle } => Some(cycles * steps_per_cycle),
            ReferenceSpec::Csv { .. } => Some(self.reference()?.horizon()),
        };
        match (self.horizon, derived) {
            (Some(t), Some(d)) if t != d => Err(cfg_err(format!("horizon {t} disagrees with the reference length {d}"))),
            (Some(t), _) | (None, Some(t)) => Ok(t),
            (None, None) => Err(cfg_err("a sine reference needs an explicit horizon")),
        }
    }

    pub fn reference(&self) -> Result<ReferenceTrajectory> {
        let amplitude = match self.reference {
            ReferenceSpec::Sine { amplitude, .. } => amplitude,
            _ => 1.0,
        };
        self.reference_with(amplitude)
    }

    /// The reference with a sine amplitude override; other kinds ignore it.
    pub fn reference_with(&self, amplitude: f64) -> Result<ReferenceTrajectory> {
        let n_z = self.system()?.n_z();
        let r = match &self.reference {
            ReferenceSpec::Sine { period, channel, .. } => {
                let t = self.horizon.ok_or_else(|| cfg_err("a sine reference needs an explicit horizon"))?;
                if *channel >= n_z {
                    return Err(cfg_err(format!("sine channel {channel} out of range")));
                }
                sine(n_z, *channel, amplitude, *period, t)?
            }
            ReferenceSpec::Heart { cycles, steps_per_cycle } => heart(*cycles, *steps_per_cycle)?,
            ReferenceSpec::Csv { path } => {
                let (header, rows) = read_csv(path)?;
                if header.len() != n_z {
                    return Err(cfg_err(format!("{}: expected {n_z} columns", path.display())));
                }
                ReferenceTrajectory::new(rows.into_iter().map(DVector::from_vec).collect())?
            }
        };
        if r.dim() != n_z {
            return Err(cfg_err("reference dimension does not match the system"));
        }
        Ok(r)
    }

    pub fn data_length(&self, window: usize) -> Option<usize> {
        self.data
            .as_ref()
            .map(|d| d.length.unwrap_or(d.length_per_window * window + d.length_offset))
    }

    /// Closed-loop start state.
    pub fn start_state(&self, r: &ReferenceTrajectory) -> DVector<f64> {
        match &self.initial_state {
            Some(z) => DVector::from_column_slice(z),
            None => r.get(0).clone(),
        }
    }

    /// `(r_scale, amplitude)` pairs for `sweep`.
    pub fn sweep_grid(&self) -> Vec<(f64, f64)> {
        let base_m = match self.reference {
            ReferenceSpec::Sine { amplitude, .. } => amplitude,
            _ => 1.0,
        };
        let (rs, ms) = match &self.sweep {
            Some(s) => (
                if s.r_scales.is_empty() { vec![self.weights.r_scale] } else { s.r_scales.clone() },
                if s.amplitudes.is_empty() { vec![base_m] } else { s.amplitudes.clone() },
            ),
            None => (vec![self.weights.r_scale], vec![base_m]),
        };
        rs.iter().flat_map(|&r| ms.iter().map(move |&m| (r, m))).collect()
    }

    /// The quartic tracking setup: sine of amplitude 1 and period 60 on the
    /// second coordinate over 200 steps, `Q_z = diag(0, 1)`, `R = 1`.
    pub fn quartic(controller: ControllerSpec, windows: Vec<usize>) -> Self {
        Self {
            system: "quartic_manifold".into(),
            horizon: Some(200),
            windows,
            t_ini: 10,
            weights: WeightSpec {
                q_z: vec![0.0, 1.0],
                r_scale: 1.0,
            },
            reference: ReferenceSpec::Sine {
                amplitude: 1.0,
                period: 60.0,
                channel: 1,
            },
            data: Some(DataSpec {
                length: None,
                length_per_window: 2,
                length_offset: 24,
                input_low: vec![-1.0],
                input_high: vec![1.0],
                seed: 42,
                initial_states: vec![vec![0.5, 0.0]],
                dir: None,
            }),
            controller,
            initial_state: Some(vec![0.5, 0.0]),
            sweep: None,
            output_dir: None,
        }
    }

    /// The two-wheeled robot on the heart reference with four
    /// orientation-indexed libraries.
    pub fn robot(windows: Vec<usize>) -> Self {
        Self {
            system: "unicycle".into(),
            horizon: None,
            windows,
            t_ini: 5,
            weights: WeightSpec {
                q_z: vec![1.0, 1.0, 2.0],
                r_scale: 1.3e-3,
            },
            reference: ReferenceSpec::Heart {
                cycles: 2,
                steps_per_cycle: ROBOT_STEPS_PER_CYCLE,
            },
            data: Some(DataSpec {
                length: Some(1500),
                length_per_window: 2,
                length_offset: 24,
                input_low: vec![10.0, -PI / 6.0],
                input_high: vec![20.0, PI / 6.0],
                seed: 42,
                initial_states: (0..4).map(|k| vec![0.0, 0.0, (2 * k + 1) as f64 * PI / 4.0]).collect(),
                dir: None,
            }),
            controller: ControllerSpec::RegDdpc {
                lambda_g: 2.0,
                lambda_z: 3e6,
                switching: true,
                angle_index: 2,
                admm_tol: ROBOT_ADMM_TOL,
                admm_max_iter: ITERATIVE_MAX_ITER,
            },
            initial_state: None,
            sweep: None,
            output_dir: None,
        }
    }
}

/// Heart perimeter over the distance covered in one step at the mid-range
/// speed of 15 with `dt = 0.025`.
pub const ROBOT_STEPS_PER_CYCLE: usize = 273;

/// ADMM tolerance for the robot runs.
pub const ROBOT_ADMM_TOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::quartic(ControllerSpec::Ddpc, vec![5, 10]).validate().unwrap();
        ExperimentConfig::robot(vec![6]).validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::robot(vec![6, 9, 12]);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::quartic(ControllerSpec::Lmpc, vec![4]).to_json().unwrap()).unwrap();
        v["colour"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::quartic(ControllerSpec::Lmpc, vec![4]).to_json().unwrap()).unwrap();
        v["reference"]["phase"] = serde_json::json!(0.3);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn window_must_be_below_horizon() {
        let cfg = ExperimentConfig::quartic(ControllerSpec::Lmpc, vec![200]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lifted_controller_needs_embedding() {
        let mut cfg = ExperimentConfig::robot(vec![6]);
        cfg.controller = ControllerSpec::Lmpc;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn switching_needs_four_starts() {
        let mut cfg = ExperimentConfig::robot(vec![6]);
        cfg.data.as_mut().unwrap().initial_states.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_defaults_to_base_values() {
        let mut cfg = ExperimentConfig::quartic(ControllerSpec::Lmpc, vec![4]);
        assert_eq!(cfg.sweep_grid(), vec![(1.0, 1.0)]);
        cfg.sweep = Some(OuterSweep {
            r_scales: vec![1.0, 10.0],
            amplitudes: vec![],
        });
        assert_eq!(cfg.sweep_grid(), vec![(1.0, 1.0), (10.0, 1.0)]);
    }
}
