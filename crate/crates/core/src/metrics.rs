//! Trace-based evaluation: collapse gate, stability frontier, trajectory
//! drift, physical plausibility, highlight saturation and solver ablations.
//!
//! Every function here is pure: it reads traces or telemetry and returns a
//! report, with no access to simulation state.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vec3;
use crate::trace::{SubstepRecord, Trace};

/// Added to denominators that may vanish.
pub const EPS: f64 = 1e-12;
/// Collapsed-mass fraction above which a frame counts as an exceedance.
pub const BMF_THRESHOLD: f64 = 0.5;
/// Exceedance ratio above which a run fails the gate.
pub const GATE_THRESHOLD: f64 = 0.5;
/// Luminance at or above which a pixel is saturated.
pub const SATURATION_THRESHOLD: f64 = 0.98;
/// Multipliers of the standard stability sweep.
pub const STANDARD_MULTIPLIERS: [u32; 11] = [1, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20];

/// Per-frame fraction of total mass held by clamped particles.
pub fn bmf_series(trace: &Trace) -> Result<Vec<f64>> {
    if trace.clamp_masks.len() != trace.frame_count() {
        return Err(Error::Mismatch(format!(
            "{} clamp masks for {} frames",
            trace.clamp_masks.len(),
            trace.frame_count()
        )));
    }
    let total = trace.total_mass();
    Ok(trace
        .clamp_masks
        .iter()
        .map(|mask| {
            if total > 0.0 {
                mask.iter_set().map(|i| trace.masses[i]).sum::<f64>() / total
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    /// Fraction of frames whose BMF exceeds the threshold.
    pub r: f64,
    pub failed: bool,
    /// Frames the ratio is taken over, including frames missing from an
    /// aborted run.
    pub frames: usize,
}

/// Gate over a BMF series. Frames beyond the series but within
/// `expected_frames` count as exceedances.
pub fn gate_series(bmf: &[f64], expected_frames: usize) -> Result<GateResult> {
    let frames = bmf.len().max(expected_frames);
    if frames == 0 {
        return Err(Error::param("frames", "gate needs at least one frame"));
    }
    let over = bmf.iter().filter(|&&b| b > BMF_THRESHOLD).count() + (frames - bmf.len());
    let r = over as f64 / frames as f64;
    Ok(GateResult {
        r,
        failed: r > GATE_THRESHOLD,
        frames,
    })
}

pub fn gate(trace: &Trace) -> Result<GateResult> {
    gate_series(&bmf_series(trace)?, trace.meta.expected_frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub multipliers: Vec<u32>,
    pub exceedance: Vec<f64>,
    pub passed: Vec<bool>,
    /// Largest passing multiplier, 0 if none passes.
    pub k_max: u32,
    pub fail_percent: f64,
}

impl StabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,r,passed\n");
        for ((k, r), p) in self
            .multipliers
            .iter()
            .zip(&self.exceedance)
            .zip(&self.passed)
        {
            let _ = writeln!(s, "{k},{r},{p}");
        }
        s
    }
}

/// Summarizes a gated sweep; entries are sorted by multiplier.
pub fn stability_frontier(results: &[(u32, GateResult)]) -> Result<StabilityReport> {
    if results.is_empty() {
        return Err(Error::param("sweep", "no multipliers tested"));
    }
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|(k, _)| *k);
    let passed: Vec<bool> = sorted.iter().map(|(_, g)| !g.failed).collect();
    let failures = passed.iter().filter(|p| !**p).count();
    Ok(StabilityReport {
        multipliers: sorted.iter().map(|(k, _)| *k).collect(),
        exceedance: sorted.iter().map(|(_, g)| g.r).collect(),
        k_max: sorted
            .iter()
            .filter(|(_, g)| !g.failed)
            .map(|(k, _)| *k)
            .max()
            .unwrap_or(0),
        fail_percent: 100.0 * failures as f64 / sorted.len() as f64,
        passed,
    })
}

/// Per-frame series and its time mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    pub series: Vec<f64>,
    pub mean: f64,
}

impl DriftSeries {
    fn from_series(series: Vec<f64>) -> Self {
        let mean = if series.is_empty() {
            0.0
        } else {
            series.iter().sum::<f64>() / series.len() as f64
        };
        DriftSeries { series, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub multiplier: u32,
    pub reference: String,
    pub comd: DriftSeries,
    pub mwrmsd: DriftSeries,
}

/// Mass-weighted center of frame `t`.
pub fn center_of_mass(trace: &Trace, t: usize) -> Vec3 {
    let total = trace.total_mass();
    let mut c = Vec3::zeros();
    for (i, m) in trace.masses.iter().enumerate() {
        c += trace.position(t, i) * *m;
    }
    if total > 0.0 {
        c / total
    } else {
        c
    }
}

/// Checks that `trace` and `reference` describe the same particles. Returns
/// the number of frames present in `trace`; a shorter trace is accepted only
/// when it was aborted.
fn check_pair(trace: &Trace, reference: &Trace) -> Result<usize> {
    if trace.particle_count() != reference.particle_count() {
        return Err(Error::Mismatch(format!(
            "particle counts {} and {}",
            trace.particle_count(),
            reference.particle_count()
        )));
    }
    for (a, b) in trace.masses.iter().zip(&reference.masses) {
        if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
            return Err(Error::Mismatch(format!(
                "particle masses differ ({a} vs {b})"
            )));
        }
    }
    if trace.meta.grid_lim != reference.meta.grid_lim {
        return Err(Error::Mismatch("grid_lim differs".into()));
    }
    if reference.meta.aborted {
        return Err(Error::Mismatch("reference run was aborted".into()));
    }
    let (t, t_ref) = (trace.frame_count(), reference.frame_count());
    if t > t_ref || (t < t_ref && !trace.meta.aborted) {
        return Err(Error::Mismatch(format!("frame counts {t} and {t_ref}")));
    }
    Ok(t)
}

/// Normalized center-of-mass displacement against a reference. Frames
/// missing from an aborted trace score 1.
pub fn comd(trace: &Trace, reference: &Trace) -> Result<DriftSeries> {
    let present = check_pair(trace, reference)?;
    let lim = reference.meta.grid_lim;
    let series = (0..reference.frame_count())
        .map(|t| {
            if t < present {
                (center_of_mass(trace, t) - center_of_mass(reference, t)).norm() / lim
            } else {
                1.0
            }
        })
        .collect();
    Ok(DriftSeries::from_series(series))
}

/// Mass-weighted RMS particle deviation against a reference, normalized
/// by `grid_lim`. Particles clamped in either trace take the full penalty
/// `grid_lim`; others are capped at it. Frames missing from an aborted trace
/// score 1.
pub fn mwrmsd(trace: &Trace, reference: &Trace) -> Result<DriftSeries> {
    let present = check_pair(trace, reference)?;
    let d_max = reference.meta.grid_lim;
    let total = reference.total_mass();
    let series = (0..reference.frame_count())
        .map(|t| {
            if t >= present {
                return 1.0;
            }
            let (ma, mb) = (&trace.clamp_masks[t], &reference.clamp_masks[t]);
            let mut acc = 0.0;
            for (i, m) in reference.masses.iter().enumerate() {
                let d = if ma.get(i) || mb.get(i) {
                    d_max
                } else {
                    (trace.position(t, i) - reference.position(t, i))
                        .norm()
                        .min(d_max)
                };
                acc += m * d * d;
            }
            if total > 0.0 {
                (acc / total).sqrt() / d_max
            } else {
                0.0
            }
        })
        .collect();
    Ok(DriftSeries::from_series(series))
}

pub fn drift_report(trace: &Trace, reference: &Trace, reference_id: &str) -> Result<DriftReport> {
    Ok(DriftReport {
        multiplier: trace.meta.multiplier,
        reference: reference_id.to_string(),
        comd: comd(trace, reference)?,
        mwrmsd: mwrmsd(trace, reference)?,
    })
}

/// Normalized area under a drift-versus-multiplier curve over the valid
/// multipliers only. Fewer than two valid points give the worst case, 1.
pub fn drift_auc(multipliers: &[u32], drift: &[f64], valid: &[bool]) -> f64 {
    let mut pts: Vec<(f64, f64)> = multipliers
        .iter()
        .zip(drift)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((k, d), _)| (*k as f64, *d))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 2 {
        return 1.0;
    }
    let span = pts[pts.len() - 1].0 - pts[0].0;
    if span <= 0.0 {
        return 1.0;
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    area / span
}

/// `|M_t - M_1| / (M_1 + eps)` for a series of total masses.
pub fn mass_drift_series(totals: &[f64]) -> Vec<f64> {
    let Some(&first) = totals.first() else {
        return Vec::new();
    };
    totals
        .iter()
        .map(|m| (m - first).abs() / (first + EPS))
        .collect()
}

/// Mass drift of a trace. Masses are stored once, so this is zero unless
/// the trace came from a tool that changes them.
pub fn mass_drift(trace: &Trace) -> Vec<f64> {
    mass_drift_series(&vec![trace.total_mass(); trace.frame_count()])
}

/// Linear momentum, angular momentum about the center of mass, and the
/// center of mass per frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentumSeries {
    pub linear: Vec<Vec3>,
    pub angular: Vec<Vec3>,
    pub center: Vec<Vec3>,
}

/// Finite-difference velocity of particle `i` at frame `t`: forward at the
/// first frame, backward at the last, central elsewhere.
fn fd_velocity(trace: &Trace, t: usize, i: usize, dt: f64) -> Vec3 {
    let last = trace.frame_count() - 1;
    if t == 0 {
        (trace.position(1, i) - trace.position(0, i)) / dt
    } else if t == last {
        (trace.position(last, i) - trace.position(last - 1, i)) / dt
    } else {
        (trace.position(t + 1, i) - trace.position(t - 1, i)) / (2.0 * dt)
    }
}

/// Momentum series from trajectories, with `dt` the frame interval.
pub fn momentum_series_with_dt(trace: &Trace, dt: f64) -> Result<MomentumSeries> {
    let frames = trace.frame_count();
    if frames < 2 {
        return Err(Error::param(
            "frames",
            format!("momentum needs T >= 2, got {frames}"),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::param("dt", "frame interval must be positive"));
    }
    let mut out = MomentumSeries::default();
    for t in 0..frames {
        let c = center_of_mass(trace, t);
        let mut p = Vec3::zeros();
        let mut l = Vec3::zeros();
        for (i, m) in trace.masses.iter().enumerate() {
            let mv = fd_velocity(trace, t, i, dt) * *m;
            p += mv;
            l += (trace.position(t, i) - c).cross(&mv);
        }
        out.linear.push(p);
        out.angular.push(l);
        out.center.push(c);
    }
    Ok(out)
}

pub fn momentum_series(trace: &Trace) -> Result<MomentumSeries> {
    momentum_series_with_dt(trace, trace.meta.frame_interval())
}

/// `|x_t - 2 x_{t-1} + x_{t-2}| / (scale + eps)` for `t >= 2`.
pub fn second_difference(series: &[Vec3], scale: f64) -> Vec<f64> {
    series
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).norm() / (scale + EPS))
        .collect()
}

/// Impulse and torque irregularity of a momentum series.
pub fn irregularity(
    momenta: &MomentumSeries,
    total_mass: f64,
    grid_lim: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let frames = momenta.linear.len();
    if frames < 3 {
        return Err(Error::param(
            "frames",
            format!("irregularity needs T >= 3, got {frames}"),
        ));
    }
    let p_scale = total_mass * grid_lim / dt;
    let l_scale = total_mass * grid_lim * grid_lim / dt;
    Ok((
        second_difference(&momenta.linear, p_scale),
        second_difference(&momenta.angular, l_scale),
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub mass_drift: Vec<f64>,
    /// Empty when the trace has fewer than three frames.
    pub impulse_irregularity: Vec<f64>,
    pub torque_irregularity: Vec<f64>,
    pub momenta: MomentumSeries,
}

impl PlausibilityReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("frame,mass_drift,impulse_irr,torque_irr,px,py,pz,lx,ly,lz,cx,cy,cz\n");
        for t in 0..self.mass_drift.len() {
            let irr = |v: &[f64]| {
                t.checked_sub(2)
                    .and_then(|j| v.get(j))
                    .map(|x| x.to_string())
                    .unwrap_or_default()
            };
            let vec = |v: &[Vec3]| {
                v.get(t)
                    .map(|x| format!("{},{},{}", x.x, x.y, x.z))
                    .unwrap_or_else(|| ",,".into())
            };
            let _ = writeln!(
                s,
                "{t},{},{},{},{},{},{}",
                self.mass_drift[t],
                irr(&self.impulse_irregularity),
                irr(&self.torque_irregularity),
                vec(&self.momenta.linear),
                vec(&self.momenta.angular),
                vec(&self.momenta.center)
            );
        }
        s
    }
}

pub fn plausibility_report(trace: &Trace) -> Result<PlausibilityReport> {
    let mut report = PlausibilityReport {
        mass_drift: mass_drift(trace),
        ..Default::default()
    };
    if trace.frame_count() >= 2 {
        report.momenta = momentum_series(trace)?;
    }
    if trace.frame_count() >= 3 {
        let (imp, tor) = irregularity(
            &report.momenta,
            trace.total_mass(),
            trace.meta.grid_lim,
            trace.meta.frame_interval(),
        )?;
        report.impulse_irregularity = imp;
        report.torque_irregularity = tor;
    }
    Ok(report)
}

/// Rec. 709 luminance.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.2126 * r + 0.7152 * g + 0.0722 * b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationSummary {
    pub per_frame: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over frames.
    pub std: f64,
    pub range: f64,
}

/// Fraction of saturated pixels per luminance frame, with summary
/// statistics over frames.
pub fn sat_ratio(frames: &[Vec<f64>]) -> Result<SaturationSummary> {
    if frames.is_empty() || frames.iter().any(|f| f.is_empty()) {
        return Err(Error::param("frames", "no pixels"));
    }
    let per_frame: Vec<f64> = frames
        .iter()
        .map(|f| f.iter().filter(|&&y| y >= SATURATION_THRESHOLD).count() as f64 / f.len() as f64)
        .collect();
    let n = per_frame.len() as f64;
    let mean = per_frame.iter().sum::<f64>() / n;
    let var = per_frame.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let max = per_frame.iter().copied().fold(f64::MIN, f64::max);
    let min = per_frame.iter().copied().fold(f64::MAX, f64::min);
    Ok(SaturationSummary {
        per_frame,
        mean,
        std: var.sqrt(),
        range: max - min,
    })
}

/// Luminance frame from interleaved RGB values in `[0, 1]`.
pub fn rgb_to_luminance(rgb: &[f64]) -> Result<Vec<f64>> {
    if !rgb.len().is_multiple_of(3) {
        return Err(Error::param("rgb", "length is not a multiple of 3"));
    }
    Ok(rgb
        .chunks_exact(3)
        .map(|p| luminance(p[0], p[1], p[2]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Percent of frames whose substeps all converged.
    pub success_rate: f64,
    /// Baseline Newton time over variant Newton time.
    pub speedup: f64,
    /// Mean `r_end / r0` over converged substeps; absent if none converged.
    pub rel_end: Option<f64>,
    /// Mean and max GMRES iterations over the linear solves of converged
    /// substeps.
    pub gmres_mean: Option<f64>,
    pub gmres_max: Option<usize>,
    pub frames: usize,
    pub substeps: usize,
}

pub fn ablation_report(
    variant: &[SubstepRecord],
    base: &[SubstepRecord],
) -> Result<AblationReport> {
    if variant.is_empty() || base.is_empty() {
        return Err(Error::param("telemetry", "empty telemetry"));
    }
    let mut frames: BTreeMap<usize, bool> = BTreeMap::new();
    for r in variant {
        *frames.entry(r.frame).or_insert(true) &= r.converged;
    }
    let ok = frames.values().filter(|v| **v).count();
    let time = |rs: &[SubstepRecord]| rs.iter().map(|r| r.wall_time).sum::<f64>();
    let converged: Vec<&SubstepRecord> = variant.iter().filter(|r| r.converged).collect();
    let rel_end = (!converged.is_empty()).then(|| {
        converged
            .iter()
            .map(|r| if r.r0 > 0.0 { r.r_end / r.r0 } else { 0.0 })
            .sum::<f64>()
            / converged.len() as f64
    });
    let solves: Vec<usize> = converged
        .iter()
        .flat_map(|r| r.gmres_iters.iter().copied())
        .collect();
    Ok(AblationReport {
        success_rate: 100.0 * ok as f64 / frames.len() as f64,
        speedup: time(base) / time(variant).max(f64::MIN_POSITIVE),
        rel_end,
        gmres_mean: (!solves.is_empty())
            .then(|| solves.iter().sum::<usize>() as f64 / solves.len() as f64),
        gmres_max: solves.iter().copied().max(),
        frames: frames.len(),
        substeps: variant.len(),
    })
}
