//! Synthetic joint plant with a first-order RC motor thermal model.
//!
//! Each joint is a single rotating mass, `τ = J·q̈ + b·q̇ + g·sin(q)`, driven
//! either by a sum of sinusoids (cruise) or held at a fixed posture against a
//! constant load (hold). Winding losses `R_w·(τ/k_t)²` heat the motor, which
//! relaxes to ambient through `R_th`:
//!
//! ```text
//! T[k+1] = T[k] + dt·(R_w·(τ/k_t)² − (T[k] − T_amb)/R_th) / C_th
//! ```

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Label, RobotState, Trajectory, MOTOR_ERROR_C};
use crate::random::{seeded, standard_normal};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("joint {joint} reached {temperature:.2} °C at t = {t:.1} s (limit {MOTOR_ERROR_C} °C); simulation stopped")]
    ThermalLimit {
        t: f64,
        joint: usize,
        temperature: f64,
        /// Samples recorded up to the violation.
        partial: Box<Trajectory>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    Cruise,
    Hold,
}

impl std::fmt::Display for MotionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionMode::Cruise => "cruise",
            MotionMode::Hold => "hold",
        })
    }
}

/// Physical constants of one joint and its motor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointParams {
    /// K/W
    pub thermal_resistance: f64,
    /// J/K
    pub thermal_capacitance: f64,
    /// Ω
    pub winding_resistance: f64,
    /// N·m/A
    pub torque_constant: f64,
    /// °C
    pub ambient: f64,
    /// kg·m²
    pub inertia: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// Peak gravity torque `g` in `g·sin(q)`, N·m.
    pub gravity_load: f64,
    /// Constant load torque while holding a posture, N·m.
    pub hold_torque: f64,
}

impl Default for JointParams {
    fn default() -> Self {
        // Time constant R_th·C_th = 150 s. Holding 2.8 N·m settles at
        // 25 + 2·0.5·(2.8/0.5)² ≈ 56.4 °C: above 40 °C, below the 60 °C warning.
        Self {
            thermal_resistance: 2.0,
            thermal_capacitance: 75.0,
            winding_resistance: 0.5,
            torque_constant: 0.5,
            ambient: 25.0,
            inertia: 0.5,
            damping: 0.8,
            gravity_load: 1.5,
            hold_torque: 2.8,
        }
    }
}

impl JointParams {
    pub fn time_constant(&self) -> f64 {
        self.thermal_resistance * self.thermal_capacitance
    }

    pub fn heat(&self, tau: f64) -> f64 {
        let current = tau / self.torque_constant;
        self.winding_resistance * current * current
    }

    /// Closed-form RC equilibrium under a constant torque.
    pub fn steady_state_temperature(&self, tau: f64) -> f64 {
        self.ambient + self.thermal_resistance * self.heat(tau)
    }

    /// One explicit-Euler step of the thermal model.
    pub fn thermal_step(&self, temperature: f64, tau: f64, dt: f64) -> f64 {
        let flow = self.heat(tau) - (temperature - self.ambient) / self.thermal_resistance;
        temperature + dt * flow / self.thermal_capacitance
    }
}

/// Ranges from which cruise motions are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    pub min_sinusoids: usize,
    pub max_sinusoids: usize,
    /// rad
    pub amplitude: [f64; 2],
    /// Hz
    pub frequency: [f64; 2],
    /// Offset of cruise motions and posture of hold motions, rad.
    pub posture: [f64; 2],
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            min_sinusoids: 2,
            max_sinusoids: 4,
            amplitude: [0.1, 0.4],
            frequency: [0.02, 0.12],
            posture: [-0.5, 0.5],
        }
    }
}

/// Standard deviations of additive sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub q: f64,
    pub qdot: f64,
    pub tau: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            q: 0.002,
            qdot: 0.005,
            tau: 0.02,
        }
    }
}

impl NoiseParams {
    pub fn none() -> Self {
        Self {
            q: 0.0,
            qdot: 0.0,
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub n_joints: usize,
    /// s
    pub dt: f64,
    pub joints: Vec<JointParams>,
    pub motion: MotionParams,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self::with_joints(1)
    }
}

impl PlantConfig {
    pub fn with_joints(n_joints: usize) -> Self {
        Self {
            n_joints,
            dt: 0.1,
            joints: vec![JointParams::default(); n_joints],
            motion: MotionParams::default(),
            noise: NoiseParams::default(),
            seed: 42,
        }
    }

    /// Parses a config; omitted fields take defaults, and an omitted `joints`
    /// list becomes `n_joints` default joints.
    pub fn from_json(text: &str) -> Result<Self, PlantError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PlantError::Config(e.to_string()))?;
        let has_joints = value.get("joints").is_some();
        let mut cfg: Self =
            serde_json::from_value(value).map_err(|e| PlantError::Config(e.to_string()))?;
        if !has_joints {
            cfg.joints = vec![JointParams::default(); cfg.n_joints];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let fail = |msg: String| Err(PlantError::Config(msg));
        if self.n_joints == 0 {
            return fail("n_joints must be at least 1".into());
        }
        if self.joints.len() != self.n_joints {
            return fail(format!(
                "{} joint entries for n_joints = {}",
                self.joints.len(),
                self.n_joints
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        for (k, j) in self.joints.iter().enumerate() {
            let positive = [
                ("thermal_resistance", j.thermal_resistance),
                ("thermal_capacitance", j.thermal_capacitance),
                ("winding_resistance", j.winding_resistance),
                ("torque_constant", j.torque_constant),
                ("inertia", j.inertia),
                ("damping", j.damping),
                ("gravity_load", j.gravity_load),
            ];
            for (name, v) in positive {
                if !(v > 0.0 && v.is_finite()) {
                    return fail(format!("joint {}: {name} must be positive, got {v}", k + 1));
                }
            }
            if !j.ambient.is_finite() || !(j.hold_torque >= 0.0 && j.hold_torque.is_finite()) {
                return fail(format!(
                    "joint {}: ambient must be finite and hold_torque non-negative",
                    k + 1
                ));
            }
            // Explicit Euler is monotone only for dt below the RC time constant.
            if self.dt >= j.time_constant() {
                return fail(format!(
                    "joint {}: dt {} must be below the thermal time constant {}",
                    k + 1,
                    self.dt,
                    j.time_constant()
                ));
            }
        }
        let m = &self.motion;
        if m.min_sinusoids == 0 || m.min_sinusoids > m.max_sinusoids {
            return fail("sinusoid count range is empty".into());
        }
        for (name, [lo, hi]) in [
            ("amplitude", m.amplitude),
            ("frequency", m.frequency),
            ("posture", m.posture),
        ] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return fail(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if m.amplitude[0] < 0.0 || m.frequency[0] <= 0.0 {
            return fail("amplitudes must be non-negative and frequencies positive".into());
        }
        let n = &self.noise;
        if [n.q, n.qdot, n.tau]
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return fail("noise standard deviations must be non-negative".into());
        }
        Ok(())
    }
}

fn draw<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

#[derive(Debug, Clone)]
struct Sinusoid {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

/// Noise-free kinematics and torque of one joint at time `t`.
enum JointMotion {
    Cruise { offset: f64, terms: Vec<Sinusoid> },
    Hold { posture: f64 },
}

impl JointMotion {
    fn sample<R: Rng>(mode: MotionMode, motion: &MotionParams, rng: &mut R) -> Self {
        match mode {
            MotionMode::Cruise => {
                let count = rng.gen_range(motion.min_sinusoids..=motion.max_sinusoids);
                let offset = draw(rng, motion.posture);
                let terms = (0..count)
                    .map(|_| Sinusoid {
                        amplitude: draw(rng, motion.amplitude),
                        omega: TAU * draw(rng, motion.frequency),
                        phase: TAU * rng.gen::<f64>(),
                    })
                    .collect();
                JointMotion::Cruise { offset, terms }
            }
            MotionMode::Hold => JointMotion::Hold {
                posture: draw(rng, motion.posture),
            },
        }
    }

    /// `(q, q̇, τ)` without noise.
    fn state(&self, joint: &JointParams, t: f64) -> (f64, f64, f64) {
        match self {
            JointMotion::Cruise { offset, terms } => {
                let (mut q, mut qd, mut qdd) = (*offset, 0.0, 0.0);
                for s in terms {
                    let arg = s.omega * t + s.phase;
                    q += s.amplitude * arg.sin();
                    qd += s.amplitude * s.omega * arg.cos();
                    qdd -= s.amplitude * s.omega * s.omega * arg.sin();
                }
                let tau = joint.inertia * qdd + joint.damping * qd + joint.gravity_load * q.sin();
                (q, qd, tau)
            }
            JointMotion::Hold { posture } => (*posture, 0.0, joint.hold_torque),
        }
    }
}

/// Simulates `duration` seconds (`round(duration/dt)` samples, `t = i·dt`).
///
/// The trajectory is labeled hot when any motor exceeds 40 °C. Exceeding
/// 75 °C aborts with [`PlantError::ThermalLimit`].
pub fn simulate(
    cfg: &PlantConfig,
    duration: f64,
    mode: MotionMode,
) -> Result<Trajectory, PlantError> {
    cfg.validate()?;
    let samples = (duration / cfg.dt).round() as usize;
    if !(duration.is_finite()) || samples < 2 {
        return Err(PlantError::Config(format!(
            "duration {duration} s gives fewer than two samples at dt = {}",
            cfg.dt
        )));
    }
    let mut rng = seeded(cfg.seed);
    let motions: Vec<JointMotion> = (0..cfg.n_joints)
        .map(|_| JointMotion::sample(mode, &cfg.motion, &mut rng))
        .collect();

    let mut temps: Vec<f64> = cfg.joints.iter().map(|j| j.ambient).collect();
    let mut states = Vec::with_capacity(samples);
    let id = format!("{mode}-{}", cfg.seed);
    for i in 0..samples {
        let t = i as f64 * cfg.dt;
        let n = cfg.n_joints;
        let (mut q, mut qdot, mut tau) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut true_tau = Vec::with_capacity(n);
        for (motion, joint) in motions.iter().zip(&cfg.joints) {
            let (qk, qdk, tk) = motion.state(joint, t);
            true_tau.push(tk);
            q.push(qk + cfg.noise.q * standard_normal(&mut rng));
            qdot.push(qdk + cfg.noise.qdot * standard_normal(&mut rng));
            tau.push(tk + cfg.noise.tau * standard_normal(&mut rng));
        }
        states.push(RobotState {
            t,
            q,
            qdot,
            tau,
            temp: temps.clone(),
        });
        if let Some((joint, &temperature)) = temps
            .iter()
            .enumerate()
            .find(|(_, &temp)| temp > MOTOR_ERROR_C)
        {
            return Err(PlantError::ThermalLimit {
                t,
                joint: joint + 1,
                temperature,
                partial: Box::new(Trajectory {
                    id,
                    states,
                    dt: cfg.dt,
                    label: Label::Hot,
                }),
            });
        }
        for ((temp, joint), tk) in temps.iter_mut().zip(&cfg.joints).zip(&true_tau) {
            *temp = joint.thermal_step(*temp, *tk, cfg.dt);
        }
    }
    let mut traj = Trajectory {
        id,
        states,
        dt: cfg.dt,
        label: Label::Unlabeled,
    };
    traj.label = Label::from_max_temperature(traj.max_temperature());
    Ok(traj)
}
