//! Anomaly scoring, threshold calibration, thermal difficulty and latent
//! exports on top of a trained [`VaeModel`].
//!
//! All scoring runs the encoder's posterior mean through the decoder (no
//! sampling), so verdicts are a pure function of model and data.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Label, Normalizer, Trajectory, Window, WindowSource};
use crate::vae::{fingerprint, VaeError, VaeModel};

pub const DEFAULT_PERCENTILE: f64 = 99.0;
pub const MIN_CALIBRATION_WINDOWS: usize = 20;
/// Tolerance on `total == Σ per_joint` when validating a report.
pub const TOTAL_TOLERANCE: f64 = 1e-12;
/// Largest `f64` below 1; difficulties saturate here instead of reaching 1.
pub const MAX_DIFFICULTY: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("threshold calibration needs at least {needed} windows, got {got}")]
    TooFewWindows { needed: usize, got: usize },
    #[error("invalid horizon: {0}")]
    Horizon(String),
    #[error("invalid report: {0}")]
    Report(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MonitorError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MonitorError + '_ {
    move |source| MonitorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mean absolute error over every element of the window.
pub fn window_score(x: &Window, x_pred: &Window) -> f64 {
    x.values
        .iter()
        .zip(&x_pred.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.values.len() as f64
}

/// Scores each window against its deterministic reconstruction.
pub fn score_windows(model: &VaeModel, windows: &[Window]) -> Result<Vec<f64>> {
    let refs: Vec<&Window> = windows.iter().collect();
    let recon = model.reconstruct_batch(&refs)?;
    Ok(windows
        .iter()
        .zip(&recon)
        .map(|(x, r)| window_score(x, r))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyVerdict {
    pub window: WindowSource,
    pub score: f64,
    pub threshold: f64,
    pub is_anomalous: bool,
}

impl AnomalyVerdict {
    pub fn new(window: WindowSource, score: f64, threshold: f64) -> Self {
        Self {
            window,
            score,
            threshold,
            is_anomalous: score > threshold,
        }
    }
}

/// Reconstruction errors of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub channels: usize,
    pub windows: Vec<WindowSource>,
    /// Per-window mean absolute error.
    pub scores: Vec<f64>,
    /// `[samples × channels]` absolute errors, averaged over every window
    /// covering the sample; zero where `coverage` is zero.
    pub timestep_errors: Vec<f64>,
    pub coverage: Vec<usize>,
}

impl ErrorSeries {
    pub fn samples(&self) -> usize {
        self.coverage.len()
    }

    pub fn timestep(&self, i: usize) -> &[f64] {
        &self.timestep_errors[i * self.channels..(i + 1) * self.channels]
    }

    pub fn verdicts(&self, threshold: f64) -> Vec<AnomalyVerdict> {
        self.windows
            .iter()
            .zip(&self.scores)
            .map(|(w, &s)| AnomalyVerdict::new(w.clone(), s, threshold))
            .collect()
    }
}

/// Windows the trajectory, reconstructs each window and collects window
/// scores and coverage-averaged per-sample errors.
pub fn recon_error_series(
    model: &VaeModel,
    traj: &Trajectory,
    norm: &Normalizer,
    window_len: usize,
    stride: usize,
) -> Result<ErrorSeries> {
    let channels = traj.channels();
    if channels != model.config.channels {
        return Err(MonitorError::Invalid(format!(
            "trajectory {} has {channels} channels, model expects {}",
            traj.id, model.config.channels
        )));
    }
    let windows = crate::data::windows(traj, norm, window_len, stride)?;
    let refs: Vec<&Window> = windows.iter().collect();
    let recon = model.reconstruct_batch(&refs)?;

    let mut sums = vec![0.0; traj.len() * channels];
    let mut coverage = vec![0usize; traj.len()];
    let mut scores = Vec::with_capacity(windows.len());
    for (w, r) in windows.iter().zip(&recon) {
        scores.push(window_score(w, r));
        for t in 0..window_len {
            let i = w.source.start + t;
            coverage[i] += 1;
            for c in 0..channels {
                sums[i * channels + c] += (w.get(t, c) - r.get(t, c)).abs();
            }
        }
    }
    for (i, &n) in coverage.iter().enumerate() {
        if n > 1 {
            for v in &mut sums[i * channels..(i + 1) * channels] {
                *v /= n as f64;
            }
        }
    }
    Ok(ErrorSeries {
        channels,
        windows: windows.into_iter().map(|w| w.source).collect(),
        scores,
        timestep_errors: sums,
        coverage,
    })
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n − 1)`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return Err(MonitorError::Invalid(format!(
            "percentile {p} of {} values is undefined",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MonitorError::Invalid(
            "percentile input contains non-finite values".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// 99th-percentile threshold over scores of cool validation windows.
pub fn calibrate_threshold(scores: &[f64]) -> Result<f64> {
    calibrate_threshold_at(scores, DEFAULT_PERCENTILE)
}

pub fn calibrate_threshold_at(scores: &[f64], percentile_rank: f64) -> Result<f64> {
    if scores.len() < MIN_CALIBRATION_WINDOWS {
        return Err(MonitorError::TooFewWindows {
            needed: MIN_CALIBRATION_WINDOWS,
            got: scores.len(),
        });
    }
    percentile(scores, percentile_rank)
}

pub fn anomaly_rate(verdicts: &[AnomalyVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| v.is_anomalous).count() as f64 / verdicts.len() as f64
}

pub fn write_verdicts_csv<W: Write>(verdicts: &[AnomalyVerdict], writer: W) -> Result<()> {
    let to_err = |e: csv::Error| MonitorError::Invalid(format!("csv write failed: {e}"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(["offset", "score", "threshold", "verdict"])
        .map_err(to_err)?;
    for v in verdicts {
        let verdict = if v.is_anomalous {
            "anomalous"
        } else {
            "normal"
        };
        w.write_record([
            v.window.start.to_string(),
            v.score.to_string(),
            v.threshold.to_string(),
            verdict.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| MonitorError::Invalid(format!("csv write failed: {e}")))
}

/// Parses verdict rows; the window's trajectory id is set to `trajectory`.
pub fn read_verdicts_csv<R: Read>(reader: R, trajectory: &str) -> Result<Vec<AnomalyVerdict>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| MonitorError::Invalid(e.to_string()))?;
    if header != vec!["offset", "score", "threshold", "verdict"] {
        return Err(MonitorError::Invalid(format!(
            "unexpected verdict header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| MonitorError::Invalid(e.to_string()))?;
        let line = i + 2;
        let bad = |what: &str| MonitorError::Invalid(format!("line {line}: invalid {what}"));
        let start: usize = rec[0].parse().map_err(|_| bad("offset"))?;
        let score: f64 = rec[1].parse().map_err(|_| bad("score"))?;
        let threshold: f64 = rec[2].parse().map_err(|_| bad("threshold"))?;
        let v = AnomalyVerdict::new(
            WindowSource {
                trajectory: trajectory.to_string(),
                start,
            },
            score,
            threshold,
        );
        let expected = if v.is_anomalous {
            "anomalous"
        } else {
            "normal"
        };
        if &rec[3] != expected {
            return Err(bad("verdict"));
        }
        out.push(v);
    }
    Ok(out)
}

/// `1 − exp(−e)` for a mean absolute error `e ≥ 0`, kept strictly below 1.
pub fn thermal_difficulty(mean_abs_error: f64) -> f64 {
    (-(-mean_abs_error).exp_m1()).min(MAX_DIFFICULTY)
}

/// Per-joint difficulties over the covered samples with `t_l ≤ t ≤ t_h`.
///
/// `|e_k(t)|` sums the joint's position, velocity and torque errors; `d_k`
/// applies [`thermal_difficulty`] to its mean over the selected samples.
pub fn joint_difficulties(
    series: &ErrorSeries,
    times: &[f64],
    horizon: [f64; 2],
) -> Result<Vec<f64>> {
    let [t_l, t_h] = horizon;
    if !(t_l.is_finite() && t_h.is_finite() && t_l < t_h) {
        return Err(MonitorError::Horizon(format!(
            "need t_l < t_h, got [{t_l}, {t_h}]"
        )));
    }
    if times.len() != series.samples() {
        return Err(MonitorError::Invalid(format!(
            "{} timestamps for {} samples",
            times.len(),
            series.samples()
        )));
    }
    let n_joints = series.channels / 3;
    let mut totals = vec![0.0; n_joints];
    let mut n = 0usize;
    for (i, &t) in times.iter().enumerate() {
        if t < t_l || t > t_h || series.coverage[i] == 0 {
            continue;
        }
        let e = series.timestep(i);
        for (k, total) in totals.iter_mut().enumerate() {
            *total += e[k] + e[n_joints + k] + e[2 * n_joints + k];
        }
        n += 1;
    }
    if n == 0 {
        return Err(MonitorError::Horizon(format!(
            "no scored samples in [{t_l}, {t_h}]"
        )));
    }
    Ok(totals
        .into_iter()
        .map(|s| thermal_difficulty(s / n as f64))
        .collect())
}

/// Shareable thermal-difficulty score of a planned motion. Field order is
/// the canonical JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyReport {
    pub robot_id: String,
    pub horizon: [f64; 2],
    pub per_joint: Vec<f64>,
    pub total: f64,
    pub model_fingerprint: String,
    pub created_at: String,
}

impl DifficultyReport {
    pub fn new(
        robot_id: impl Into<String>,
        horizon: [f64; 2],
        per_joint: Vec<f64>,
        model_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let report = Self {
            robot_id: robot_id.into(),
            horizon,
            total: per_joint.iter().sum(),
            per_joint,
            model_fingerprint: model_fingerprint.into(),
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MonitorError::Report(m));
        let [t_l, t_h] = self.horizon;
        if !(t_l.is_finite() && t_h.is_finite() && t_l < t_h) {
            return fail(format!("horizon [{t_l}, {t_h}] must satisfy t_l < t_h"));
        }
        if self.per_joint.is_empty() {
            return fail("per_joint is empty".into());
        }
        for (k, d) in self.per_joint.iter().enumerate() {
            if !(0.0..1.0).contains(d) {
                return fail(format!("per_joint[{k}] = {d} is outside [0, 1)"));
            }
        }
        let sum: f64 = self.per_joint.iter().sum();
        if !self.total.is_finite() || (self.total - sum).abs() > TOTAL_TOLERANCE {
            return fail(format!(
                "total {} differs from Σ per_joint = {sum}",
                self.total
            ));
        }
        if self.model_fingerprint.is_empty()
            || !self
                .model_fingerprint
                .chars()
                .all(|c| c.is_ascii_hexdigit())
        {
            return fail(format!(
                "model_fingerprint '{}' is not a hex digest",
                self.model_fingerprint
            ));
        }
        if DateTime::parse_from_rfc3339(&self.created_at).is_err() {
            return fail(format!(
                "created_at '{}' is not an RFC 3339 timestamp",
                self.created_at
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| MonitorError::Report(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }
}

/// Thermal difficulty of `planned` over `horizon`, scored with windows of
/// the model's length at `stride`. The report's fingerprint is the SHA-256
/// of the model's serialized form, which equals the hash of its saved file.
pub fn difficulty(
    model: &VaeModel,
    planned: &Trajectory,
    norm: &Normalizer,
    horizon: [f64; 2],
    stride: usize,
) -> Result<DifficultyReport> {
    let (start, end) = planned.time_range();
    if horizon[0] < start || horizon[1] > end {
        return Err(MonitorError::Horizon(format!(
            "[{}, {}] is outside the trajectory's time range [{start}, {end}]",
            horizon[0], horizon[1]
        )));
    }
    let series = recon_error_series(model, planned, norm, model.config.window_len, stride)?;
    let times: Vec<f64> = planned.states.iter().map(|s| s.t).collect();
    let per_joint = joint_difficulties(&series, &times, horizon)?;
    DifficultyReport::new(
        planned.id.clone(),
        horizon,
        per_joint,
        fingerprint(model.to_json().as_bytes()),
    )
}

pub fn emit_report(report: &DifficultyReport, path: &Path) -> Result<()> {
    report.validate()?;
    std::fs::write(path, report.to_json()).map_err(io_err(path))
}

pub fn parse_report(path: &Path) -> Result<DifficultyReport> {
    DifficultyReport::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Mean absolute reconstruction error per channel kind, averaged over
/// joints, timesteps and windows, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelErrors {
    pub position: f64,
    pub velocity: f64,
    pub torque: f64,
}

impl ChannelErrors {
    /// Rows in the order torque, position, velocity.
    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [
            ("Torque", self.torque),
            ("Position", self.position),
            ("Velocity", self.velocity),
        ]
    }

    pub fn table(&self, epochs: usize) -> String {
        let mut s = format!("{:<10} {:>12}\n", "channel", format!("n_e={epochs}"));
        for (name, v) in self.rows() {
            s.push_str(&format!("{name:<10} {v:>12.4}\n"));
        }
        s
    }
}

pub fn channel_errors(model: &VaeModel, windows: &[Window]) -> Result<ChannelErrors> {
    if windows.is_empty() {
        return Err(MonitorError::Invalid("no windows to evaluate".into()));
    }
    let refs: Vec<&Window> = windows.iter().collect();
    let recon = model.reconstruct_batch(&refs)?;
    let n_joints = model.config.n_joints();
    let mut sums = [0.0; 3];
    for (w, r) in windows.iter().zip(&recon) {
        for t in 0..w.window_len {
            for c in 0..w.channels {
                sums[c / n_joints] += (w.get(t, c) - r.get(t, c)).abs();
            }
        }
    }
    let n = (windows.len() * model.config.window_len * n_joints) as f64;
    Ok(ChannelErrors {
        position: sums[0] / n,
        velocity: sums[1] / n,
        torque: sums[2] / n,
    })
}

/// Area under the ROC curve for scores where positives should rank high;
/// ties count one half.
pub fn roc_auc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(MonitorError::Invalid(
            "AUC needs both negative and positive scores".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives (Mann–Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean silhouette coefficient of 2-D points under the given cluster labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(MonitorError::Invalid(
            "points and labels differ in length".into(),
        ));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(MonitorError::Invalid(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[own] == 1 {
            continue; // s(i) = 0 for singletons
        }
        let mut sums = vec![0.0; k];
        for (q, &l) in points.iter().zip(labels) {
            sums[l] += dist(p, q);
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRow {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub label: Label,
}

/// Sum of the posterior densities on a `size × size` grid of cell centres.
/// `values` is row-major with rows along `mu2` and columns along `mu1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub mu1_range: [f64; 2],
    pub mu2_range: [f64; 2],
    pub size: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_area(&self) -> f64 {
        let dx = (self.mu1_range[1] - self.mu1_range[0]) / self.size as f64;
        let dy = (self.mu2_range[1] - self.mu2_range[0]) / self.size as f64;
        dx * dy
    }

    /// Centre `(mu1, mu2)` of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let step =
            |[lo, hi]: [f64; 2], i: usize| lo + (i as f64 + 0.5) * (hi - lo) / self.size as f64;
        [step(self.mu1_range, col), step(self.mu2_range, row)]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("grid serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)
            .map_err(|e| MonitorError::Invalid(format!("density grid: {e}")))?;
        if g.size == 0 || g.values.len() != g.size * g.size || g.values.iter().any(|v| !(*v >= 0.0))
        {
            return Err(MonitorError::Invalid(
                "density grid shape or values are invalid".into(),
            ));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentExport {
    pub rows: Vec<LatentRow>,
    pub grid: Option<DensityGrid>,
}

/// Posterior means and standard deviations of labeled windows, plus the
/// summed density on a `grid_size²` grid whose box extends `margin ≥ 3`
/// standard deviations around every mean. `grid_size = 0` skips the grid.
pub fn export_latent(
    model: &VaeModel,
    windows: &[(Window, Label)],
    grid_size: usize,
    margin: f64,
) -> Result<LatentExport> {
    if !(margin >= 3.0 && margin.is_finite()) {
        return Err(MonitorError::Invalid(format!(
            "grid margin must be at least 3σ, got {margin}"
        )));
    }
    let refs: Vec<&Window> = windows.iter().map(|(w, _)| w).collect();
    let codes = model.encode_batch(&refs)?;
    let rows: Vec<LatentRow> = codes
        .iter()
        .zip(windows)
        .map(|(c, (_, label))| LatentRow {
            mu: c.mu,
            sigma: c.sigma(),
            label: *label,
        })
        .collect();
    let grid = (grid_size > 0 && !rows.is_empty()).then(|| density_grid(&rows, grid_size, margin));
    Ok(LatentExport { rows, grid })
}

pub fn density_grid(rows: &[LatentRow], size: usize, margin: f64) -> DensityGrid {
    let bound = |d: usize| {
        let lo = rows
            .iter()
            .map(|r| r.mu[d] - margin * r.sigma[d])
            .fold(f64::INFINITY, f64::min);
        let hi = rows
            .iter()
            .map(|r| r.mu[d] + margin * r.sigma[d])
            .fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    };
    let mut grid = DensityGrid {
        mu1_range: bound(0),
        mu2_range: bound(1),
        size,
        values: vec![0.0; size * size],
    };
    for row in 0..size {
        for col in 0..size {
            let [x, y] = grid.cell_center(row, col);
            grid.values[row * size + col] = rows
                .iter()
                .map(|r| {
                    let zx = (x - r.mu[0]) / r.sigma[0];
                    let zy = (y - r.mu[1]) / r.sigma[1];
                    (-0.5 * (zx * zx + zy * zy)).exp()
                        / (std::f64::consts::TAU * r.sigma[0] * r.sigma[1])
                })
                .sum();
        }
    }
    grid
}

pub fn write_latent_csv<W: Write>(rows: &[LatentRow], writer: W) -> Result<()> {
    let to_err = |e: csv::Error| MonitorError::Invalid(format!("csv write failed: {e}"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(["mu1", "mu2", "sigma1", "sigma2", "label"])
        .map_err(to_err)?;
    for r in rows {
        w.write_record([
            r.mu[0].to_string(),
            r.mu[1].to_string(),
            r.sigma[0].to_string(),
            r.sigma[1].to_string(),
            r.label.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| MonitorError::Invalid(format!("csv write failed: {e}")))
}

pub fn read_latent_csv<R: Read>(reader: R) -> Result<Vec<LatentRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| MonitorError::Invalid(e.to_string()))?;
    if header != vec!["mu1", "mu2", "sigma1", "sigma2", "label"] {
        return Err(MonitorError::Invalid(format!(
            "unexpected latent header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| MonitorError::Invalid(e.to_string()))?;
        let line = i + 2;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| {
                MonitorError::Invalid(format!("line {line}: invalid number '{}'", &rec[j]))
            })
        };
        out.push(LatentRow {
            mu: [num(0)?, num(1)?],
            sigma: [num(2)?, num(3)?],
            label: rec[4]
                .parse()
                .map_err(|e| MonitorError::Invalid(format!("line {line}: {e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, MotionMode, PlantConfig};
    use crate::random::seeded;
    use crate::vae::VaeConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn series_from(errors: Vec<f64>, channels: usize) -> ErrorSeries {
        let samples = errors.len() / channels;
        ErrorSeries {
            channels,
            windows: Vec::new(),
            scores: Vec::new(),
            timestep_errors: errors,
            coverage: vec![1; samples],
        }
    }

    fn times(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * 0.1).collect()
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(calibrate_threshold(&[0.37; 100]).unwrap(), 0.37);
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((calibrate_threshold(&scores).unwrap() - 99.01).abs() < 1e-9);
        assert!(matches!(
            calibrate_threshold(&scores[..19]),
            Err(MonitorError::TooFewWindows {
                needed: 20,
                got: 19
            })
        ));
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[5.0], 99.0).unwrap(), 5.0);
    }

    proptest! {
        #[test]
        fn at_most_one_percent_exceed(scores in prop::collection::vec(0.0..10.0f64, 20..400)) {
            let th = calibrate_threshold(&scores).unwrap();
            let above = scores.iter().filter(|&&s| s > th).count();
            // Only order statistics above rank 0.99·(n − 1) can exceed it.
            prop_assert!(above <= (0.01 * (scores.len() - 1) as f64).ceil() as usize);
        }

        #[test]
        fn difficulty_monotone_and_bounded(a in 0.0..50.0f64, b in 0.0..50.0f64) {
            let (da, db) = (thermal_difficulty(a), thermal_difficulty(b));
            prop_assert!((0.0..1.0).contains(&da));
            if a < b {
                prop_assert!(da <= db);
            }
        }

        #[test]
        fn difficulty_invariant_under_time_reindexing(
            errs in prop::collection::vec(0.0..2.0f64, 30),
            offset in -100.0..100.0f64,
            scale in 0.01..10.0f64,
        ) {
            let series = series_from(errs, 3);
            let t = times(10);
            let base = joint_difficulties(&series, &t, [0.0, 0.9]).unwrap();
            let moved: Vec<f64> = t.iter().map(|x| offset + scale * x).collect();
            let other = joint_difficulties(&series, &moved, [offset, offset + scale * 0.9 + 1e-9]).unwrap();
            prop_assert!((base[0] - other[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn difficulty_law() {
        assert_eq!(thermal_difficulty(0.0), 0.0);
        assert!((thermal_difficulty(2f64.ln()) - 0.5).abs() < 1e-12);
        assert!(thermal_difficulty(1e6) < 1.0);
        let series = series_from(vec![0.0; 60], 6);
        let d = joint_difficulties(&series, &times(10), [0.0, 0.9]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn joint_error_sums_its_three_channels() {
        // Two joints: channels q1 q2 qd1 qd2 tau1 tau2.
        let ln2 = 2f64.ln();
        let row = [ln2 / 2.0, 0.0, ln2 / 4.0, 1.0, ln2 / 4.0, 0.0];
        let series = series_from(row.repeat(5), 6);
        let d = joint_difficulties(&series, &times(5), [0.0, 0.4]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - (1.0 - (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn horizon_selection() {
        let mut errs = vec![0.0; 30];
        errs[27] = 9.0; // last sample, joint position error
        let series = series_from(errs, 3);
        let t = times(10);
        assert_eq!(
            joint_difficulties(&series, &t, [0.0, 0.85]).unwrap(),
            vec![0.0]
        );
        assert!(joint_difficulties(&series, &t, [0.0, 0.9]).unwrap()[0] > 0.0);
        assert!(matches!(
            joint_difficulties(&series, &t, [0.5, 0.5]),
            Err(MonitorError::Horizon(_))
        ));
        assert!(matches!(
            joint_difficulties(&series, &t, [5.0, 6.0]),
            Err(MonitorError::Horizon(_))
        ));
    }

    fn sample_report() -> DifficultyReport {
        DifficultyReport::new("arm-1", [0.0, 10.0], vec![0.25, 0.5], "ab12").unwrap()
    }

    #[test]
    fn report_round_trip_and_key_order() {
        let r = sample_report();
        let text = r.to_json();
        assert_eq!(DifficultyReport::from_json(&text).unwrap(), r);
        let keys = [
            "robot_id",
            "horizon",
            "per_joint",
            "total",
            "model_fingerprint",
            "created_at",
        ];
        let pos: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(pos.windows(2).all(|p| p[0] < p[1]));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        emit_report(&r, &path).unwrap();
        assert_eq!(parse_report(&path).unwrap(), r);
    }

    #[test]
    fn report_rejects_violations() {
        let doc: serde_json::Value = serde_json::from_str(&sample_report().to_json()).unwrap();
        let reject = |f: &dyn Fn(&mut serde_json::Value)| {
            let mut d = doc.clone();
            f(&mut d);
            assert!(DifficultyReport::from_json(&d.to_string()).is_err(), "{d}");
        };
        reject(&|d| d["total"] = 0.8.into());
        reject(&|d| {
            d["per_joint"] = serde_json::json!([1.0, 0.0]);
            d["total"] = 1.0.into();
        });
        reject(&|d| d["horizon"] = serde_json::json!([3.0, 3.0]));
        reject(&|d| d["created_at"] = "yesterday".into());
        reject(&|d| d["model_fingerprint"] = "not hex".into());
        reject(&|d| d["extra"] = 1.into());
        assert!(DifficultyReport::from_json("{").is_err());
    }

    #[test]
    fn auc_and_silhouette_oracles() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3, 0.4], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        // Brute-force pair count.
        let mut rng = seeded(4);
        let neg: Vec<f64> = (0..40)
            .map(|_| (rng.gen_range(0..10) as f64) / 3.0)
            .collect();
        let pos: Vec<f64> = (0..30)
            .map(|_| (rng.gen_range(3..14) as f64) / 3.0)
            .collect();
        let pairs: f64 = pos
            .iter()
            .flat_map(|p| {
                neg.iter().map(move |n| {
                    if p > n {
                        1.0
                    } else if p == n {
                        0.5
                    } else {
                        0.0
                    }
                })
            })
            .sum();
        let expected = pairs / (pos.len() * neg.len()) as f64;
        assert!((roc_auc(&neg, &pos).unwrap() - expected).abs() < 1e-12);

        // Two points per cluster, unit spacing, clusters 10 apart.
        let pts = [[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let expected = [
            (10.5 - 1.0) / 10.5,
            (9.5 - 1.0) / 9.5,
            (9.5 - 1.0) / 9.5,
            (10.5 - 1.0) / 10.5,
        ];
        assert!((s - expected.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!(silhouette(&pts, &[0, 1, 0, 1]).unwrap() < 0.0);
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn density_grid_oracles() {
        let one = [LatentRow {
            mu: [0.0, 0.0],
            sigma: [1.0, 1.0],
            label: Label::Cool,
        }];
        let g = density_grid(&one, 21, 3.0);
        let argmax = g
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 10 * 21 + 10);

        let mut rng = seeded(12);
        let rows: Vec<LatentRow> = (0..7)
            .map(|_| LatentRow {
                mu: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                sigma: [rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5)],
                label: Label::Hot,
            })
            .collect();
        let g = density_grid(&rows, 120, 5.0);
        let integral = g.cell_area() * g.values.iter().sum::<f64>();
        assert!((integral - 7.0).abs() / 7.0 < 0.05, "{integral}");
        assert_eq!(DensityGrid::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn latent_csv_round_trip() {
        let rows = vec![
            LatentRow {
                mu: [0.1, -2.5],
                sigma: [0.3, 1.0 / 3.0],
                label: Label::Cool,
            },
            LatentRow {
                mu: [3.0, 4.0],
                sigma: [0.01, 0.02],
                label: Label::Hot,
            },
        ];
        let mut buf = Vec::new();
        write_latent_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"mu1,mu2,sigma1,sigma2,label\n"));
        assert_eq!(read_latent_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn verdict_csv_round_trip() {
        let vs: Vec<AnomalyVerdict> = [(0, 0.25), (16, 0.75), (32, 0.5)]
            .iter()
            .map(|&(start, s)| {
                AnomalyVerdict::new(
                    WindowSource {
                        trajectory: "x".into(),
                        start,
                    },
                    s,
                    0.5,
                )
            })
            .collect();
        assert_eq!(anomaly_rate(&vs), 1.0 / 3.0);
        let mut buf = Vec::new();
        write_verdicts_csv(&vs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "offset,score,threshold,verdict\n0,0.25,0.5,normal\n16,0.75,0.5,anomalous\n32,0.5,0.5,normal\n");
        assert_eq!(read_verdicts_csv(buf.as_slice(), "x").unwrap(), vs);
        assert!(read_verdicts_csv(
            "offset,score,threshold,verdict\n0,0.9,0.5,normal\n".as_bytes(),
            "x"
        )
        .is_err());
    }

    fn small_model(seed: u64) -> (VaeModel, Trajectory) {
        let traj = simulate(&PlantConfig::with_joints(1), 20.0, MotionMode::Cruise).unwrap();
        let norm = Normalizer::fit(&[&traj]).unwrap();
        let mut cfg = VaeConfig::new(3, 16);
        cfg.encoder_hidden = 6;
        cfg.decoder_hidden = 6;
        (VaeModel::new(cfg, norm, seed).unwrap(), traj)
    }

    #[test]
    fn non_overlapping_series_matches_window_scores() {
        let (model, traj) = small_model(3);
        let norm = model.normalizer.clone();
        let series = recon_error_series(&model, &traj, &norm, 16, 16).unwrap();
        let ws = crate::data::windows(&traj, &norm, 16, 16).unwrap();
        assert_eq!(series.scores, score_windows(&model, &ws).unwrap());
        for (w, &score) in ws.iter().zip(&series.scores) {
            let start = w.source.start;
            let per_sample: f64 = (start..start + 16)
                .flat_map(|i| series.timestep(i).to_vec())
                .sum();
            assert!((per_sample / 48.0 - score).abs() < 1e-12);
            assert!(series.coverage[start..start + 16].iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn overlapping_series_averages_by_coverage() {
        let (model, traj) = small_model(4);
        let norm = model.normalizer.clone();
        let series = recon_error_series(&model, &traj, &norm, 16, 4).unwrap();
        let ws = crate::data::windows(&traj, &norm, 16, 4).unwrap();
        let refs: Vec<&Window> = ws.iter().collect();
        let recon = model.reconstruct_batch(&refs).unwrap();
        let i = 20;
        let (mut sum, mut n) = (0.0, 0);
        for (w, r) in ws.iter().zip(&recon) {
            if (w.source.start..w.source.start + 16).contains(&i) {
                sum += (w.get(i - w.source.start, 1) - r.get(i - w.source.start, 1)).abs();
                n += 1;
            }
        }
        assert_eq!(series.coverage[i], n);
        assert!((series.timestep(i)[1] - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn scoring_is_label_free_and_deterministic() {
        let (model, mut traj) = small_model(5);
        let norm = model.normalizer.clone();
        let a = recon_error_series(&model, &traj, &norm, 16, 8).unwrap();
        traj.label = Label::Hot;
        let b = recon_error_series(&model, &traj, &norm, 16, 8).unwrap();
        assert_eq!(a, b);
        let th = a.scores[0];
        assert_eq!(a.verdicts(th), b.verdicts(th));
    }

    #[test]
    fn difficulty_report_from_model() {
        let (model, traj) = small_model(6);
        let norm = model.normalizer.clone();
        let r = difficulty(&model, &traj, &norm, [1.0, 10.0], 8).unwrap();
        assert_eq!(r.per_joint.len(), 1);
        assert_eq!(r.robot_id, traj.id);
        assert_eq!(r.model_fingerprint, fingerprint(model.to_json().as_bytes()));
        assert!(difficulty(&model, &traj, &norm, [1.0, 100.0], 8).is_err());
        assert!(difficulty(&model, &traj, &norm, [2.0, 2.0], 8).is_err());
    }

    #[test]
    fn channel_table_rows() {
        let e = ChannelErrors {
            position: 0.1,
            velocity: 0.2,
            torque: 0.3,
        };
        let table = e.table(60);
        let names: Vec<&str> = table
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(names, ["Torque", "Position", "Velocity"]);
    }
}
