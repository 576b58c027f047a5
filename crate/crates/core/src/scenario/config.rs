use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::geometry::TargetExtent;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneId {
    Pool,
    Street,
    Trees,
    Grass,
    MountainLake,
    Palace,
    SeasideTemple,
    WinterTown,
}

impl SceneId {
    pub const ALL: [SceneId; 8] = [
        SceneId::Pool,
        SceneId::Street,
        SceneId::Trees,
        SceneId::Grass,
        SceneId::MountainLake,
        SceneId::Palace,
        SceneId::SeasideTemple,
        SceneId::WinterTown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneId::Pool => "pool",
            SceneId::Street => "street",
            SceneId::Trees => "trees",
            SceneId::Grass => "grass",
            SceneId::MountainLake => "mountain_lake",
            SceneId::Palace => "palace",
            SceneId::SeasideTemple => "seaside_temple",
            SceneId::WinterTown => "winter_town",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The four multi-rotor airframes a scene can contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    QuadSmall,
    QuadLarge,
    Hexacopter,
    Octocopter,
}

impl ModelId {
    pub const ALL: [ModelId; 4] =
        [ModelId::QuadSmall, ModelId::QuadLarge, ModelId::Hexacopter, ModelId::Octocopter];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::QuadSmall => "quad_small",
            ModelId::QuadLarge => "quad_large",
            ModelId::Hexacopter => "hexacopter",
            ModelId::Octocopter => "octocopter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Body-frame half-sizes of the airframe's bounding cuboid.
    pub fn extent(self) -> TargetExtent<f64> {
        let (hx, hy, hz) = match self {
            ModelId::QuadSmall => (0.18, 0.18, 0.06),
            ModelId::QuadLarge => (0.35, 0.35, 0.10),
            ModelId::Hexacopter => (0.45, 0.45, 0.12),
            ModelId::Octocopter => (0.60, 0.60, 0.15),
        };
        TargetExtent { hx, hy, hz }
    }

    /// Number of rotor arms drawn on the sprite.
    pub fn arms(self) -> usize {
        match self {
            ModelId::QuadSmall | ModelId::QuadLarge => 4,
            ModelId::Hexacopter => 6,
            ModelId::Octocopter => 8,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// First-order autoregressive attitude jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibrationParams {
    /// Stationary standard deviation of each jitter angle, radians.
    pub amplitude: f64,
    /// Lag-one correlation in `[0, 1)`.
    pub persistence: f64,
}

impl Default for VibrationParams {
    fn default() -> Self {
        Self { amplitude: 0.003, persistence: 0.9 }
    }
}

/// One camera on the observer, mounted relative to its body frame
/// (x forward, y left, z up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Roll, pitch, yaw of the mount relative to looking along body +x.
    #[serde(default)]
    pub rpy_deg: [f64; 3],
    /// Mount position in the body frame, metres.
    #[serde(default)]
    pub offset: [f64; 3],
}

impl Default for CameraMount {
    fn default() -> Self {
        Self { width: 640, height: 640, hfov_deg: 60.0, rpy_deg: [0.0; 3], offset: [0.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self { position: [0.0, 0.0, 20.0], yaw_deg: 0.0, pitch_deg: 0.0 }
    }
}

fn default_dt() -> f64 {
    0.1
}

fn default_speed_range() -> [f64; 2] {
    [1.0, 4.0]
}

fn default_waypoints() -> usize {
    4
}

fn default_fov_margin() -> f64 {
    0.8
}

fn default_rig() -> Vec<CameraMount> {
    vec![CameraMount::default()]
}

/// Scenario description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub scene_id: SceneId,
    pub model_ids: Vec<ModelId>,
    pub target_count: usize,
    /// Line-of-sight distance range of target waypoints, metres.
    pub distance_range: [f64; 2],
    pub frame_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Simulation step between frames, seconds.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Target cruise speed range, m/s.
    #[serde(default = "default_speed_range")]
    pub speed_range: [f64; 2],
    #[serde(default = "default_waypoints")]
    pub waypoints_per_target: usize,
    /// Fraction of each camera's half field of view used to place waypoints.
    #[serde(default = "default_fov_margin")]
    pub fov_margin: f64,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default)]
    pub vibration: VibrationParams,
    #[serde(default = "default_rig")]
    pub cameras: Vec<CameraMount>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if self.model_ids.is_empty() {
            v.push("model_ids must not be empty".to_string());
        }
        if self.target_count < 1 {
            v.push("target_count must be at least 1".to_string());
        }
        let [dmin, dmax] = self.distance_range;
        if !(dmin > 0.0) || !dmin.is_finite() {
            v.push(format!("distance_range min must be positive, got {dmin}"));
        }
        if !(dmax >= dmin) || !dmax.is_finite() {
            v.push(format!("distance_range max must be >= min, got [{dmin}, {dmax}]"));
        }
        if self.frame_count < 1 {
            v.push("frame_count must be at least 1".to_string());
        }
        if !(self.dt > 0.0) {
            v.push(format!("dt must be positive, got {}", self.dt));
        }
        let [smin, smax] = self.speed_range;
        if !(smin >= 0.0 && smax >= smin && smax.is_finite()) {
            v.push(format!("speed_range must satisfy 0 <= min <= max, got [{smin}, {smax}]"));
        }
        if self.waypoints_per_target < 1 {
            v.push("waypoints_per_target must be at least 1".to_string());
        }
        if !(self.fov_margin > 0.0 && self.fov_margin <= 1.0) {
            v.push(format!("fov_margin must lie in (0, 1], got {}", self.fov_margin));
        }
        if !(self.vibration.amplitude >= 0.0) || !self.vibration.amplitude.is_finite() {
            v.push(format!("vibration.amplitude must be >= 0, got {}", self.vibration.amplitude));
        }
        if !(0.0..1.0).contains(&self.vibration.persistence) {
            v.push(format!("vibration.persistence must lie in [0, 1), got {}", self.vibration.persistence));
        }
        if self.cameras.is_empty() {
            v.push("cameras must list at least one mount".to_string());
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if c.width == 0 || c.height == 0 {
                v.push(format!("cameras[{i}]: image size must be positive"));
            }
            if !(c.hfov_deg > 0.0 && c.hfov_deg < 180.0) {
                v.push(format!("cameras[{i}]: hfov_deg must lie in (0, 180), got {}", c.hfov_deg));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::InvalidConfig(v))
        }
    }
}
