//! Run configuration loaded from a TOML file.
//!
//! Relative paths inside the file resolve against the file's directory.

use crate::driver::PurePursuit;
use crate::dynamics::VehicleParams;
use crate::geometry::Pose2;
use crate::localize::SearchWindow;
use crate::sensors::{ImuNoise, LidarSpec, OdomNoise};
use crate::twin::TwinParams;
use crate::world::{Opponent, OpponentState, OpponentTrajectory, WorldConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

/// A named preset or an inline parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Choice<T> {
    Preset(String),
    Inline(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpponentConfig {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub closed: bool,
    #[serde(default)]
    pub start_waypoint: usize,
    #[serde(default = "default_half_length")]
    pub half_length: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn yes() -> bool {
    true
}

fn default_half_length() -> f64 {
    0.25
}

fn default_half_width() -> f64 {
    0.15
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub resolution: f64,
    pub window: SearchWindow,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            window: SearchWindow::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverConfig {
    pub pursuit: PurePursuit,
    /// Search window used while driving with scan matching.
    pub window: SearchWindow,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            pursuit: PurePursuit::default(),
            window: SearchWindow {
                dx: 0.15,
                dy: 0.15,
                dpsi: 0.06,
                steps_xy: 13,
                steps_psi: 13,
                beam_stride: 4,
                refine_levels: 3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Physics step, s.
    pub dt: f64,
    pub seed: u64,
    /// Physics ticks per scan; derived from the LiDAR rate when absent.
    pub scan_every: Option<u64>,
    pub vehicle: Choice<VehicleParams>,
    pub lidar: Choice<LidarSpec>,
    pub imu_noise: ImuNoise,
    pub odom_noise: OdomNoise,
    pub start: Pose2,
    pub expose_ground_truth: bool,
    pub wall_clock: bool,
    pub map: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub reference_closed: bool,
    pub opponents: Vec<OpponentConfig>,
    pub twin: TwinParams,
    pub localize: LocalizeConfig,
    pub driver: DriverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            seed: 0,
            scan_every: None,
            vehicle: Choice::Preset("f1tenth".into()),
            lidar: Choice::Preset("ust10lx-like".into()),
            imu_noise: ImuNoise::default(),
            odom_noise: OdomNoise::default(),
            start: Pose2::default(),
            expose_ground_truth: false,
            wall_clock: false,
            map: None,
            reference: None,
            reference_closed: true,
            opponents: Vec::new(),
            twin: TwinParams::default(),
            localize: LocalizeConfig::default(),
            driver: DriverConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths and checks that referenced files exist.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.map.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.reference.as_mut() {
            resolve(p);
        }
        for o in &mut cfg.opponents {
            resolve(&mut o.path);
        }
        let files = cfg
            .map
            .iter()
            .chain(cfg.reference.iter())
            .chain(cfg.opponents.iter().map(|o| &o.path));
        for f in files {
            if !f.is_file() {
                return Err(ConfigError::File {
                    path: f.display().to_string(),
                    msg: "file not found".into(),
                });
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.scan_every == Some(0) {
            return Err(ConfigError::Invalid(
                "scan_every must be a positive integer".into(),
            ));
        }
        self.vehicle_params()?;
        self.lidar_spec()?;
        if !(self.localize.resolution > 0.0) {
            return Err(ConfigError::Invalid(
                "localize.resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn vehicle_params(&self) -> Result<VehicleParams, ConfigError> {
        let p = match &self.vehicle {
            Choice::Preset(name) => VehicleParams::preset(name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown vehicle preset {name:?}")))?,
            Choice::Inline(p) => *p,
        };
        p.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }

    pub fn lidar_spec(&self) -> Result<LidarSpec, ConfigError> {
        let s = match &self.lidar {
            Choice::Preset(name) => LidarSpec::preset(name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown lidar preset {name:?}")))?,
            Choice::Inline(s) => *s,
        };
        s.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }

    /// Ticks per scan. A LiDAR rate that is not an integer divisor of the
    /// physics rate is rounded with a warning.
    pub fn resolved_scan_every(&self) -> Result<u64, ConfigError> {
        if let Some(n) = self.scan_every {
            return Ok(n);
        }
        let spec = self.lidar_spec()?;
        let exact = 1.0 / (spec.rate * self.dt);
        let n = exact.round().max(1.0);
        if (exact - n).abs() > 1e-9 {
            log::warn!(
                "lidar rate {} Hz is not an integer fraction of the physics rate; scanning every {} ticks",
                spec.rate,
                n
            );
        }
        Ok(n as u64)
    }

    pub fn world_config(&self) -> Result<WorldConfig, ConfigError> {
        let mut w = WorldConfig::new(self.vehicle_params()?, self.lidar_spec()?);
        w.dt = self.dt;
        w.scan_every = self.resolved_scan_every()?;
        w.imu_noise = self.imu_noise;
        w.odom_noise = self.odom_noise;
        w.seed = self.seed;
        w.expose_ground_truth = self.expose_ground_truth;
        Ok(w)
    }

    pub fn load_opponents(&self) -> Result<Vec<Opponent>, ConfigError> {
        self.opponents
            .iter()
            .map(|o| {
                let text = std::fs::read_to_string(&o.path).map_err(|source| ConfigError::Io {
                    path: o.path.display().to_string(),
                    source,
                })?;
                let trajectory = OpponentTrajectory::from_csv(&text, o.closed).map_err(|e| {
                    ConfigError::File {
                        path: o.path.display().to_string(),
                        msg: e.to_string(),
                    }
                })?;
                let state = OpponentState::at_waypoint(&trajectory, o.start_waypoint);
                Ok(Opponent {
                    trajectory,
                    state,
                    half_length: o.half_length,
                    half_width: o.half_width,
                })
            })
            .collect()
    }
}
