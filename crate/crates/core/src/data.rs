//! Robot joint-state data: trajectories, the CSV file contract, z-score
//! normalization and windowing.
//!
//! A state carries positions `q`, velocities `q̇` and total torques `τ` for
//! `n_J` joints, plus a motor temperature per joint. Temperature is used for
//! labeling only; the feature vector seen by the model is `[q; q̇; τ]`
//! (`3·n_J` channels, in that order).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod plant;

pub use plant::{
    simulate, JointParams, MotionMode, MotionParams, NoiseParams, PlantConfig, PlantError,
};

/// Trajectories whose motor temperature exceeds this are labeled hot.
pub const HOT_THRESHOLD_C: f64 = 40.0;
/// Motor temperature warning level of the reference arm.
pub const MOTOR_WARNING_C: f64 = 60.0;
/// Motor temperature error level; the plant aborts above it.
pub const MOTOR_ERROR_C: f64 = 75.0;

/// Allowed deviation of a sampling interval from the trajectory's nominal dt.
pub const DT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("trajectory has {0} samples; at least two are required")]
    TooShort(usize),
    #[error("sample {index}: {message}")]
    InvalidState { index: usize, message: String },
    #[error("channel {channel} has zero variance")]
    DegenerateChannel { channel: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cool,
    Hot,
    Unlabeled,
}

impl Label {
    /// Hot iff the maximum temperature is strictly above 40 °C.
    pub fn from_max_temperature(max_temp: f64) -> Self {
        if max_temp > HOT_THRESHOLD_C {
            Label::Hot
        } else {
            Label::Cool
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cool => "cool",
            Label::Hot => "hot",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cool" => Ok(Label::Cool),
            "hot" => Ok(Label::Hot),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

/// One timestamped sample of every joint.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
    pub temp: Vec<f64>,
}

impl RobotState {
    pub fn n_joints(&self) -> usize {
        self.q.len()
    }

    /// Feature vector `[q; q̇; τ]`.
    pub fn features(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * self.q.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.qdot);
        x.extend_from_slice(&self.tau);
        x
    }
}

/// Channel names in feature order, e.g. `q1, qd1, tau1` for one joint.
pub fn channel_names(n_joints: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(3 * n_joints);
    for prefix in ["q", "qd", "tau"] {
        names.extend((1..=n_joints).map(|k| format!("{prefix}{k}")));
    }
    names
}

/// Uniformly sampled sequence of states from a single joint-space motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<RobotState>,
    pub dt: f64,
    pub label: Label,
}

impl Trajectory {
    /// Validates joint counts, strictly increasing time and uniform sampling.
    pub fn new(id: impl Into<String>, states: Vec<RobotState>, label: Label) -> Result<Self> {
        if states.len() < 2 {
            return Err(DataError::TooShort(states.len()));
        }
        let n = states[0].n_joints();
        if n == 0 {
            return Err(DataError::InvalidState {
                index: 0,
                message: "no joints".into(),
            });
        }
        for (i, s) in states.iter().enumerate() {
            if s.qdot.len() != n || s.tau.len() != n || s.temp.len() != n || s.q.len() != n {
                return Err(DataError::InvalidState {
                    index: i,
                    message: format!("expected {n} joints in every field"),
                });
            }
        }
        let dt = (states[states.len() - 1].t - states[0].t) / (states.len() - 1) as f64;
        for (i, pair) in states.windows(2).enumerate() {
            let step = pair[1].t - pair[0].t;
            if step <= 0.0 {
                return Err(DataError::InvalidState {
                    index: i + 1,
                    message: format!("time {} does not increase past {}", pair[1].t, pair[0].t),
                });
            }
            if (step - dt).abs() > DT_TOLERANCE {
                return Err(DataError::InvalidState {
                    index: i + 1,
                    message: format!("sampling interval {step} differs from nominal {dt}"),
                });
            }
        }
        Ok(Self {
            id: id.into(),
            states,
            dt,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.states[0].n_joints()
    }

    pub fn channels(&self) -> usize {
        3 * self.n_joints()
    }

    pub fn max_temperature(&self) -> f64 {
        self.states
            .iter()
            .flat_map(|s| s.temp.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.states[0].t, self.states[self.states.len() - 1].t)
    }

    /// Feature value of `channel` at sample `index`.
    pub fn feature(&self, index: usize, channel: usize) -> f64 {
        let s = &self.states[index];
        let n = s.n_joints();
        match channel / n {
            0 => s.q[channel % n],
            1 => s.qdot[channel % n],
            _ => s.tau[channel % n],
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv_to(file)
    }

    /// Writes the trajectory as `t,q1..qn,qd1..qdn,tau1..taun,temp1..tempn`.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.n_joints();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let to_err = |e: csv::Error| DataError::Invalid(format!("csv write failed: {e}"));
        w.write_record(csv_header(n)).map_err(to_err)?;
        for s in &self.states {
            let row = std::iter::once(s.t)
                .chain(s.q.iter().copied())
                .chain(s.qdot.iter().copied())
                .chain(s.tau.iter().copied())
                .chain(s.temp.iter().copied())
                .map(|v| v.to_string());
            w.write_record(row).map_err(to_err)?;
        }
        w.flush()
            .map_err(|e| DataError::Invalid(format!("csv write failed: {e}")))?;
        Ok(())
    }
}

pub fn csv_header(n_joints: usize) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    for prefix in ["q", "qd", "tau", "temp"] {
        header.extend((1..=n_joints).map(|k| format!("{prefix}{k}")));
    }
    header
}

/// Reads a trajectory file; the id is the file stem and the label is
/// [`Label::Unlabeled`] (labels travel in manifests, not trajectory files).
pub fn load_csv(path: &Path) -> Result<Trajectory> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, id)
}

pub fn read_csv<R: Read>(reader: R, id: impl Into<String>) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => {
            return Err(DataError::Csv {
                line: 1,
                message: "file is empty".into(),
            })
        }
        Some(r) => r.map_err(|e| csv_error(1, e))?,
    };
    let columns = header.len();
    if columns < 5 || (columns - 1) % 4 != 0 {
        return Err(DataError::Csv {
            line: 1,
            message: format!("header has {columns} columns; expected 1 + 4·n_J"),
        });
    }
    let n = (columns - 1) / 4;
    let expected = csv_header(n);
    if header.iter().zip(&expected).any(|(a, b)| a.trim() != b) {
        return Err(DataError::Csv {
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }

    let mut states = Vec::new();
    let mut prev: Option<(f64, u64)> = None;
    let mut nominal_dt: Option<f64> = None;
    for record in records {
        let record = record.map_err(|e| csv_error(0, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != columns {
            return Err(DataError::Csv {
                line,
                message: format!("expected {columns} fields, found {}", record.len()),
            });
        }
        let mut values = Vec::with_capacity(columns);
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Csv {
                line,
                message: format!(
                    "column {} ('{}') is not a number: '{cell}'",
                    col + 1,
                    expected[col]
                ),
            })?;
            if !v.is_finite() {
                return Err(DataError::Csv {
                    line,
                    message: format!("column {} ('{}') is not finite", col + 1, expected[col]),
                });
            }
            values.push(v);
        }
        let t = values[0];
        if let Some((t_prev, _)) = prev {
            let step = t - t_prev;
            if step <= 0.0 {
                return Err(DataError::Csv {
                    line,
                    message: format!("time {t} is not after previous time {t_prev}"),
                });
            }
            match nominal_dt {
                None => nominal_dt = Some(step),
                Some(dt) if (step - dt).abs() > DT_TOLERANCE => {
                    return Err(DataError::Csv {
                        line,
                        message: format!("sampling interval {step} differs from {dt}"),
                    })
                }
                _ => {}
            }
        }
        prev = Some((t, line));
        states.push(RobotState {
            t,
            q: values[1..1 + n].to_vec(),
            qdot: values[1 + n..1 + 2 * n].to_vec(),
            tau: values[1 + 2 * n..1 + 3 * n].to_vec(),
            temp: values[1 + 3 * n..1 + 4 * n].to_vec(),
        });
    }
    if states.is_empty() {
        return Err(DataError::Csv {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Trajectory::new(id, states, Label::Unlabeled)
}

fn csv_error(line: u64, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(line);
    DataError::Csv {
        line,
        message: e.to_string(),
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let norm = Self { mean, std };
        norm.validate()?;
        Ok(norm)
    }

    /// Mean 0, std 1 on every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(DataError::Invalid(
                "normalizer mean/std lengths differ or are empty".into(),
            ));
        }
        if let Some(i) = self.std.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(DataError::DegenerateChannel {
                channel: format!("#{}", i + 1),
            });
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(DataError::Invalid("normalizer mean is not finite".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population (divide-by-N) mean and standard deviation over all samples
    /// of all trajectories.
    pub fn fit(trajs: &[&Trajectory]) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| DataError::Invalid("no trajectories to fit".into()))?;
        let channels = first.channels();
        if let Some(t) = trajs.iter().find(|t| t.channels() != channels) {
            return Err(DataError::Invalid(format!(
                "trajectory {} has {} channels, expected {channels}",
                t.id,
                t.channels()
            )));
        }
        let count: usize = trajs.iter().map(|t| t.len()).sum();
        let mut mean = vec![0.0; channels];
        for t in trajs {
            for s in &t.states {
                for (m, x) in mean.iter_mut().zip(s.features()) {
                    *m += x;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; channels];
        for t in trajs {
            for s in &t.states {
                for ((v, x), m) in var.iter_mut().zip(s.features()).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let names = channel_names(first.n_joints());
        let mut std = Vec::with_capacity(channels);
        for (c, v) in var.into_iter().enumerate() {
            let s = (v / count as f64).sqrt();
            // Relative test: variance that is pure round-off counts as constant.
            if !(s > 1e-12 * mean[c].abs().max(1.0)) {
                return Err(DataError::DegenerateChannel {
                    channel: names[c].clone(),
                });
            }
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSource {
    pub trajectory: String,
    pub start: usize,
}

/// Normalized `[window_len × channels]` slice of a trajectory, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub window_len: usize,
    pub channels: usize,
    pub source: WindowSource,
}

impl Window {
    pub fn new(
        values: Vec<f64>,
        window_len: usize,
        channels: usize,
        source: WindowSource,
    ) -> Result<Self> {
        if window_len == 0 || channels == 0 || values.len() != window_len * channels {
            return Err(DataError::Invalid(format!(
                "window of {} values cannot be {window_len}×{channels}",
                values.len()
            )));
        }
        if !channels.is_multiple_of(3) {
            return Err(DataError::Invalid(format!(
                "{channels} channels is not a multiple of 3"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(
                "window contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            window_len,
            channels,
            source,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn get(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels + channel]
    }
}

/// Normalized windows starting at offsets `0, stride, 2·stride, …`; a
/// trailing partial window is dropped.
pub fn windows(
    traj: &Trajectory,
    norm: &Normalizer,
    window_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if window_len == 0 || stride == 0 {
        return Err(DataError::Invalid(
            "window length and stride must be positive".into(),
        ));
    }
    if traj.len() < window_len {
        return Err(DataError::Invalid(format!(
            "trajectory {} has {} samples, shorter than the window length {window_len}",
            traj.id,
            traj.len()
        )));
    }
    if norm.channels() != traj.channels() {
        return Err(DataError::Invalid(format!(
            "normalizer has {} channels but trajectory {} has {}",
            norm.channels(),
            traj.id,
            traj.channels()
        )));
    }
    let normalized: Vec<Vec<f64>> = traj
        .states
        .iter()
        .map(|s| norm.normalize(&s.features()))
        .collect();
    (0..=traj.len() - window_len)
        .step_by(stride)
        .map(|start| {
            let values = normalized[start..start + window_len].concat();
            Window::new(
                values,
                window_len,
                traj.channels(),
                WindowSource {
                    trajectory: traj.id.clone(),
                    start,
                },
            )
        })
        .collect()
}

/// Writes windows as `window,step,<channel names>` rows.
pub fn write_windows_csv<W: Write>(windows: &[Window], writer: W) -> Result<()> {
    let to_err = |e: csv::Error| DataError::Invalid(format!("csv write failed: {e}"));
    let first = windows
        .first()
        .ok_or_else(|| DataError::Invalid("no windows to write".into()))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["window".to_string(), "step".to_string()];
    header.extend(channel_names(first.channels / 3));
    w.write_record(&header).map_err(to_err)?;
    for (i, win) in windows.iter().enumerate() {
        for t in 0..win.window_len {
            let row = [i.to_string(), t.to_string()]
                .into_iter()
                .chain(win.row(t).iter().map(|v| v.to_string()));
            w.write_record(row).map_err(to_err)?;
        }
    }
    w.flush()
        .map_err(|e| DataError::Invalid(format!("csv write failed: {e}")))?;
    Ok(())
}

/// Parses the format written by [`write_windows_csv`].
pub fn read_windows_csv<R: Read>(reader: R) -> Result<Vec<Window>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(1, e))?.clone();
    if header.len() < 5
        || (header.len() - 2) % 3 != 0
        || &header[0] != "window"
        || &header[1] != "step"
    {
        return Err(DataError::Csv {
            line: 1,
            message: "expected header `window,step,<3·n_J channels>`".into(),
        });
    }
    let channels = header.len() - 2;
    let expected = channel_names(channels / 3);
    if header.iter().skip(2).zip(&expected).any(|(a, b)| a != b) {
        return Err(DataError::Csv {
            line: 1,
            message: format!("channel columns must be {}", expected.join(",")),
        });
    }
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(0, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_idx = |s: &str| {
            s.parse::<usize>().map_err(|_| DataError::Csv {
                line,
                message: format!("'{s}' is not an index"),
            })
        };
        let (w, step) = (parse_idx(&record[0])?, parse_idx(&record[1])?);
        let mut row = Vec::with_capacity(channels);
        for cell in record.iter().skip(2) {
            row.push(cell.parse::<f64>().map_err(|_| DataError::Csv {
                line,
                message: format!("'{cell}' is not a number"),
            })?);
        }
        match out.last_mut() {
            Some((idx, values)) if *idx == w => {
                if step != values.len() / channels {
                    return Err(DataError::Csv {
                        line,
                        message: format!("step {step} out of order"),
                    });
                }
                values.extend(row);
            }
            _ => {
                if w != out.len() || step != 0 {
                    return Err(DataError::Csv {
                        line,
                        message: format!("window {w} step {step} out of order"),
                    });
                }
                out.push((w, row));
            }
        }
    }
    let window_len = out.first().map(|(_, v)| v.len() / channels).unwrap_or(0);
    out.into_iter()
        .map(|(i, values)| {
            if values.len() != window_len * channels {
                return Err(DataError::Invalid(format!(
                    "window {i} has a different length"
                )));
            }
            Window::new(
                values,
                window_len,
                channels,
                WindowSource {
                    trajectory: "generated".into(),
                    start: i,
                },
            )
        })
        .collect()
}
