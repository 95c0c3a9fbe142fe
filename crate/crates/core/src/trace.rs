//! On-disk simulation traces.
//!
//! A trace directory holds
//!
//! * `meta.json`: header ([`TraceMeta`]),
//! * `static.bin`: `N` masses then `N` reference volumes,
//! * `frames.bin`: `T` frames of `N x 3` coordinates, particle-major,
//! * `clamps.bin`: `T` frames of `ceil(N/8)` bytes, particle `i` at byte
//!   `i / 8`, bit `i % 8` (LSB first),
//! * `solver.log`: one JSON record per implicit substep, newline-terminated.
//!
//! Reals are 8-byte little-endian IEEE-754.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vec3;

pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const STATIC: &str = "static.bin";
const FRAMES: &str = "frames.bin";
const CLAMPS: &str = "clamps.bin";
const SOLVER_LOG: &str = "solver.log";

/// Per-frame bitmask of clamped particles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampMask {
    len: usize,
    bytes: Vec<u8>,
}

impl ClampMask {
    pub fn new(len: usize) -> Self {
        ClampMask {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Mismatch(format!(
                "{} mask bytes for {len} particles",
                bytes.len()
            )));
        }
        Ok(ClampMask { len, bytes })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn set(&mut self, i: usize) {
        self.bytes[i / 8] |= 1 << (i % 8);
    }

    pub fn get(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.bytes.iter().any(|&b| b != 0)
    }

    pub fn union_with(&mut self, other: &ClampMask) {
        for (a, b) in self.bytes.iter_mut().zip(&other.bytes) {
            *a |= b;
        }
    }

    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }
}

/// Solver telemetry of one implicit substep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstepRecord {
    /// Global substep index.
    pub substep: usize,
    /// Frame the substep belongs to (0-based).
    pub frame: usize,
    pub converged: bool,
    #[serde(default)]
    pub stagnated: bool,
    pub newton_iters: usize,
    /// GMRES iterations of each Newton linear solve.
    pub gmres_iters: Vec<usize>,
    pub r0: f64,
    pub r_end: f64,
    #[serde(default)]
    pub tolerance: f64,
    /// Seconds spent in the Newton solve.
    pub wall_time: f64,
    #[serde(default)]
    pub fallback_used: bool,
}

/// Header of a trace directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u32,
    pub scene: String,
    pub method: String,
    pub particle_count: usize,
    pub frame_count: usize,
    pub grid_lim: f64,
    /// Configured frame duration.
    pub frame_dt: f64,
    /// Effective substep length (already multiplied by `multiplier`).
    pub substep_dt: f64,
    pub steps_per_frame: usize,
    pub multiplier: u32,
    pub clamp_margin: f64,
    /// Impulse forces after the `1/k` rescaling, one per impulse condition.
    #[serde(default)]
    pub impulse_forces: Vec<[f64; 3]>,
    /// Total momentum added by impulse conditions over the run.
    #[serde(default)]
    pub imparted_momentum: [f64; 3],
    /// Frames the schedule asked for; larger than `frame_count` when the
    /// run aborted.
    pub expected_frames: usize,
    pub aborted: bool,
    #[serde(default)]
    pub abort_reason: Option<String>,
    pub telemetry_records: usize,
}

impl TraceMeta {
    /// Time between consecutive recorded frames.
    pub fn frame_interval(&self) -> f64 {
        self.steps_per_frame as f64 * self.substep_dt
    }
}

/// Per-frame particle trajectories plus static per-particle data.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub masses: Vec<f64>,
    pub ref_volumes: Vec<f64>,
    /// `T * N * 3` coordinates.
    pub positions: Vec<f64>,
    pub clamp_masks: Vec<ClampMask>,
    pub telemetry: Vec<SubstepRecord>,
}

impl Trace {
    /// Empty trace (no frames) for the given static data.
    pub fn new(meta: TraceMeta, masses: Vec<f64>, ref_volumes: Vec<f64>) -> Self {
        Trace {
            meta,
            masses,
            ref_volumes,
            positions: Vec::new(),
            clamp_masks: Vec::new(),
            telemetry: Vec::new(),
        }
    }

    pub fn particle_count(&self) -> usize {
        self.masses.len()
    }

    pub fn frame_count(&self) -> usize {
        self.clamp_masks.len()
    }

    pub fn push_frame(&mut self, positions: &[Vec3], mask: ClampMask) {
        for p in positions {
            self.positions.extend_from_slice(p.as_slice());
        }
        self.clamp_masks.push(mask);
        self.meta.frame_count = self.clamp_masks.len();
    }

    pub fn position(&self, frame: usize, particle: usize) -> Vec3 {
        let o = 3 * (frame * self.particle_count() + particle);
        Vec3::new(
            self.positions[o],
            self.positions[o + 1],
            self.positions[o + 2],
        )
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Checks the structural invariants shared by the writer and reader.
    pub fn validate(&self) -> Result<()> {
        let n = self.particle_count();
        let t = self.frame_count();
        if n == 0 {
            return Err(Error::Invariant("trace has no particles".into()));
        }
        if self.meta.particle_count != n || self.meta.frame_count != t {
            return Err(Error::Mismatch(format!(
                "header says {} particles x {} frames, data has {n} x {t}",
                self.meta.particle_count, self.meta.frame_count
            )));
        }
        if self.ref_volumes.len() != n {
            return Err(Error::Mismatch(format!(
                "{} reference volumes for {n} particles",
                self.ref_volumes.len()
            )));
        }
        if self.positions.len() != t * n * 3 {
            return Err(Error::Mismatch(format!(
                "{} coordinates for {t} frames of {n} particles",
                self.positions.len()
            )));
        }
        if let Some(i) = self
            .masses
            .iter()
            .position(|m| !(*m > 0.0) || !m.is_finite())
        {
            return Err(Error::Invariant(format!(
                "mass of particle {i} is {}",
                self.masses[i]
            )));
        }
        if let Some(i) = self
            .ref_volumes
            .iter()
            .position(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::Invariant(format!(
                "reference volume of particle {i} is {}",
                self.ref_volumes[i]
            )));
        }
        let lim = self.meta.grid_lim;
        if let Some(i) = self.positions.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("position coordinate {i}")));
        }
        if let Some(i) = self.positions.iter().position(|c| !(0.0..=lim).contains(c)) {
            return Err(Error::Invariant(format!(
                "position coordinate {i} = {} outside [0, {lim}]",
                self.positions[i]
            )));
        }
        if let Some(m) = self.clamp_masks.iter().find(|m| m.len() != n) {
            return Err(Error::Mismatch(format!(
                "clamp mask over {} particles, expected {n}",
                m.len()
            )));
        }
        if self.meta.telemetry_records != self.telemetry.len() {
            return Err(Error::Mismatch(format!(
                "header lists {} telemetry records, found {}",
                self.meta.telemetry_records,
                self.telemetry.len()
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a trace directory, creating it if needed.
pub fn write_trace(trace: &Trace, dir: &Path) -> Result<()> {
    let mut trace_meta = trace.meta.clone();
    trace_meta.telemetry_records = trace.telemetry.len();
    trace_meta.frame_count = trace.frame_count();
    let checked = Trace {
        meta: trace_meta,
        ..trace.clone()
    };
    checked.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = serde_json::to_string_pretty(&checked.meta).expect("trace header serializes");
    write_file(&dir.join(META), meta.as_bytes())?;

    let mut stat = Vec::with_capacity(16 * checked.particle_count());
    put_f64s(&mut stat, &checked.masses);
    put_f64s(&mut stat, &checked.ref_volumes);
    write_file(&dir.join(STATIC), &stat)?;

    let mut frames = Vec::with_capacity(8 * checked.positions.len());
    put_f64s(&mut frames, &checked.positions);
    write_file(&dir.join(FRAMES), &frames)?;

    let clamps: Vec<u8> = checked
        .clamp_masks
        .iter()
        .flat_map(|m| m.bytes().iter().copied())
        .collect();
    write_file(&dir.join(CLAMPS), &clamps)?;

    let mut log = String::new();
    for rec in &checked.telemetry {
        log.push_str(&serde_json::to_string(rec).expect("telemetry serializes"));
        log.push('\n');
    }
    write_file(&dir.join(SOLVER_LOG), log.as_bytes())
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::corrupt(
            path,
            format!(
                "{} trailing bytes after the expected {expected}",
                bytes.len() - expected
            ),
        ));
    }
    Ok(bytes)
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Reads and validates a trace directory.
pub fn read_trace(dir: &Path) -> Result<Trace> {
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TraceMeta =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(
            &meta_path,
            format!("unsupported format version {}", meta.format_version),
        ));
    }
    let n = meta.particle_count;
    let t = meta.frame_count;
    if n == 0 {
        return Err(Error::corrupt(&meta_path, "particle_count is 0"));
    }

    let stat = f64s(&read_exact_len(&dir.join(STATIC), 16 * n)?);
    let positions = f64s(&read_exact_len(&dir.join(FRAMES), 24 * n * t)?);
    let mask_len = n.div_ceil(8);
    let clamp_bytes = read_exact_len(&dir.join(CLAMPS), mask_len * t)?;
    let clamp_masks = clamp_bytes
        .chunks(mask_len.max(1))
        .take(t)
        .map(|c| ClampMask::from_bytes(n, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let log_path = dir.join(SOLVER_LOG);
    let log = match fs::read_to_string(&log_path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && meta.telemetry_records == 0 => {
            String::new()
        }
        Err(e) => return Err(Error::io(&log_path, e)),
    };
    if !log.is_empty() && !log.ends_with('\n') {
        return Err(Error::corrupt(
            &log_path,
            "last record is not newline-terminated",
        ));
    }
    let telemetry = log
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::corrupt(&log_path, format!("record {i}: {e}")))
        })
        .collect::<Result<Vec<SubstepRecord>>>()?;

    let trace = Trace {
        meta,
        masses: stat[..n].to_vec(),
        ref_volumes: stat[n..].to_vec(),
        positions,
        clamp_masks,
        telemetry,
    };
    trace.validate()?;
    Ok(trace)
}

/// Reads a point-set file: a count line, then one `x y z` line per point.
pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::corrupt(path, "missing count line"))?;
    let count: usize = header
        .trim()
        .parse()
        .map_err(|_| Error::corrupt(path, format!("bad count line {header:?}")))?;
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::corrupt(path, format!("point {i}: {line:?}")))?;
        if coords.len() != 3 || !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::corrupt(
                path,
                format!("point {i}: expected three finite reals"),
            ));
        }
        points.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    if points.len() != count {
        return Err(Error::corrupt(
            path,
            format!("header announces {count} points, file has {}", points.len()),
        ));
    }
    Ok(points)
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut text = format!("{}\n", points.len());
    for p in points {
        text.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    write_file(path, text.as_bytes())
}
