//! Robustness benchmark: one factor is swept over a controlled range while
//! the others are drawn from their default random ranges; every trial is
//! scored by the rotation/translation error of the recovered pose.

pub mod shapes;
pub mod synth;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_error, translation_error, PointCloud};
use crate::registration::{register, RegistrationConfig};
pub use synth::{synthesize_pair, SyntheticPair, TrialFactors};

pub const ROTATION_SUCCESS: f64 = 0.2;
pub const TRANSLATION_SUCCESS: f64 = 0.1;

pub fn is_success(rot_error: f64, trans_error: f64) -> bool {
    rot_error < ROTATION_SUCCESS && trans_error < TRANSLATION_SUCCESS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Rotation,
    Outliers,
    Noise,
    Occlusion,
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Factor::Rotation => "rotation",
            Factor::Outliers => "outliers",
            Factor::Noise => "noise",
            Factor::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(Factor::Rotation),
            "outliers" => Ok(Factor::Outliers),
            "noise" => Ok(Factor::Noise),
            "occlusion" => Ok(Factor::Occlusion),
            other => Err(Error::InvalidArgument(format!("unknown factor '{other}'"))),
        }
    }
}

/// Random range plus controlled sweep for one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRange {
    pub random: (f64, f64),
    pub controlled: (f64, f64),
    pub step: f64,
}

impl FactorRange {
    fn new(random: (f64, f64), controlled: (f64, f64), step: f64) -> Self {
        Self { random, controlled, step }
    }

    /// Controlled values from `controlled.0` to `controlled.1` inclusive.
    pub fn sweep(&self) -> Vec<f64> {
        let n = ((self.controlled.1 - self.controlled.0) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| {
                let v = self.controlled.0 + k as f64 * self.step;
                // keep printed values clean (0.3 rather than 0.30000000000000004)
                (v * 1e9).round() / 1e9
            })
            .collect()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.step > 0.0 && self.random.0 <= self.random.1 && self.controlled.0 <= self.controlled.1) {
            return Err(Error::Config(format!("factor range '{name}' is malformed")));
        }
        Ok(())
    }
}

/// Perturbation ranges: random ranges for nuisance factors and the
/// controlled sweep for the factor under study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorRanges {
    /// Degrees per axis.
    pub rotation_deg: FactorRange,
    pub outliers: FactorRange,
    /// Fraction of the model radius.
    pub noise_std_frac: FactorRange,
    pub occlusion_frac: FactorRange,
    pub sample_rate_fixed: f64,
    pub sample_rate_moving: f64,
    /// Fraction of the model radius.
    pub translation_frac: f64,
    pub outlier_box_scale: f64,
    /// Fraction of the model radius.
    pub noise_floor_frac: f64,
}

impl Default for FactorRanges {
    fn default() -> Self {
        Self {
            rotation_deg: FactorRange::new((-20.0, 20.0), (-60.0, 60.0), 8.0),
            outliers: FactorRange::new((0.0, 500.0), (0.0, 2000.0), 200.0),
            noise_std_frac: FactorRange::new((0.0, 0.2), (0.0, 0.3), 0.03),
            occlusion_frac: FactorRange::new((0.0, 0.15), (0.0, 0.3), 0.03),
            sample_rate_fixed: 0.90,
            sample_rate_moving: 0.85,
            translation_frac: 0.1,
            outlier_box_scale: 1.2,
            noise_floor_frac: 0.05,
        }
    }
}

impl FactorRanges {
    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.validate("rotation_deg")?;
        self.outliers.validate("outliers")?;
        self.noise_std_frac.validate("noise_std_frac")?;
        self.occlusion_frac.validate("occlusion_frac")?;
        for (name, v) in [
            ("noise_std_frac", self.noise_std_frac.random.1.max(self.noise_std_frac.controlled.1)),
            ("occlusion_frac", self.occlusion_frac.random.1.max(self.occlusion_frac.controlled.1)),
            ("sample_rate_fixed", self.sample_rate_fixed),
            ("sample_rate_moving", self.sample_rate_moving),
            ("translation_frac", self.translation_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn range(&self, factor: Factor) -> &FactorRange {
        match factor {
            Factor::Rotation => &self.rotation_deg,
            Factor::Outliers => &self.outliers,
            Factor::Noise => &self.noise_std_frac,
            Factor::Occlusion => &self.occlusion_frac,
        }
    }

    /// Draws every factor from its random range, then pins `factor` to
    /// `value`.
    pub fn draw(&self, factor: Factor, value: f64, rng: &mut impl Rng) -> TrialFactors {
        let pick = |r: &FactorRange, rng: &mut dyn rand::RngCore| {
            if r.random.1 > r.random.0 {
                rng.random_range(r.random.0..=r.random.1)
            } else {
                r.random.0
            }
        };
        let mut f = TrialFactors {
            rotation_deg: pick(&self.rotation_deg, rng),
            outliers: pick(&self.outliers, rng).round() as usize,
            noise_std_frac: pick(&self.noise_std_frac, rng),
            occlusion_frac: pick(&self.occlusion_frac, rng),
            sample_rate_fixed: self.sample_rate_fixed,
            sample_rate_moving: self.sample_rate_moving,
            translation_frac: self.translation_frac,
            outlier_box_scale: self.outlier_box_scale,
            noise_floor_frac: self.noise_floor_frac,
        };
        match factor {
            Factor::Rotation => f.rotation_deg = value,
            Factor::Outliers => f.outliers = value.round().max(0.0) as usize,
            Factor::Noise => f.noise_std_frac = value,
            Factor::Occlusion => f.occlusion_frac = value,
        }
        f
    }
}

/// Settings of one sweep.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub instances: usize,
    /// Controlled values; `None` uses the factor's full sweep.
    pub values: Option<Vec<f64>>,
    pub registration: RegistrationConfig,
    /// Write measured wall time; when off the column is written as 0 so
    /// record files are reproducible byte for byte.
    pub record_wall_time: bool,
    /// Replace every covariance by the identity before registering.
    pub identity_covariances: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 3,
            values: None,
            registration: RegistrationConfig::default(),
            record_wall_time: true,
            identity_covariances: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub factor_name: String,
    pub factor_value: f64,
    pub shape_id: usize,
    pub instance_id: usize,
    pub rot_error: f64,
    pub trans_error: f64,
    pub success: bool,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub note: Option<String>,
}

/// Identifies a trial for resumption.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrialKey {
    pub factor_name: String,
    pub factor_value_bits: u64,
    pub shape_id: usize,
    pub instance_id: usize,
}

impl ExperimentRecord {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            factor_name: self.factor_name.clone(),
            factor_value_bits: self.factor_value.to_bits(),
            shape_id: self.shape_id,
            instance_id: self.instance_id,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one trial, so results do not depend on the
/// order in which trials run.
pub fn trial_seed(seed: u64, factor: Factor, value_index: usize, shape: usize, instance: usize) -> u64 {
    [factor as u64, value_index as u64, shape as u64, instance as u64]
        .iter()
        .fold(splitmix(seed), |acc, v| splitmix(acc ^ splitmix(*v)))
}

struct Trial {
    value_index: usize,
    value: f64,
    shape: usize,
    instance: usize,
}

fn run_trial(
    model: &PointCloud,
    factor: Factor,
    ranges: &FactorRanges,
    cfg: &ExperimentConfig,
    t: &Trial,
) -> ExperimentRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, factor, t.value_index, t.shape, t.instance));
    let factors = ranges.draw(factor, t.value, &mut rng);
    let mut record = ExperimentRecord {
        factor_name: factor.name().to_string(),
        factor_value: t.value,
        shape_id: t.shape,
        instance_id: t.instance,
        rot_error: f64::NAN,
        trans_error: f64::NAN,
        success: false,
        wall_time_s: 0.0,
        note: None,
    };
    let outcome = synthesize_pair(model, &factors, &mut rng).and_then(|pair| {
        let (fixed, moving) = if cfg.identity_covariances {
            (pair.fixed.with_unit_covariances(), pair.moving.with_unit_covariances())
        } else {
            (pair.fixed, pair.moving)
        };
        let start = Instant::now();
        let result = register(&fixed, &moving, &cfg.registration)?;
        Ok((pair.truth, result, start.elapsed().as_secs_f64()))
    });
    match outcome {
        Ok((truth, result, secs)) => {
            record.rot_error = rotation_error(truth.rotation(), result.transform.rotation());
            record.trans_error = translation_error(truth.translation(), result.transform.translation());
            record.success = is_success(record.rot_error, record.trans_error);
            if cfg.record_wall_time {
                record.wall_time_s = secs;
            }
        }
        Err(e) => record.note = Some(e.to_string()),
    }
    record
}

/// Runs the controlled × shape × instance triple loop.
///
/// Trials whose key is in `done` are skipped. Finished records are passed to
/// `sink` in canonical loop order, batch by batch, and also returned. A
/// failing trial becomes a non-success record with a note; it never stops
/// the sweep.
pub fn run_experiment(
    models: &[PointCloud],
    factor: Factor,
    ranges: &FactorRanges,
    cfg: &ExperimentConfig,
    done: &HashSet<TrialKey>,
    mut sink: impl FnMut(&ExperimentRecord) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("at least one model is required".into()));
    }
    ranges.validate()?;
    cfg.registration.validate()?;
    let values = cfg.values.clone().unwrap_or_else(|| ranges.range(factor).sweep());
    let mut pending = Vec::new();
    for (value_index, &value) in values.iter().enumerate() {
        for shape in 0..models.len() {
            for instance in 0..cfg.instances {
                let key = TrialKey {
                    factor_name: factor.name().to_string(),
                    factor_value_bits: value.to_bits(),
                    shape_id: shape,
                    instance_id: instance,
                };
                if !done.contains(&key) {
                    pending.push(Trial {
                        value_index,
                        value,
                        shape,
                        instance,
                    });
                }
            }
        }
    }
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut out = Vec::with_capacity(pending.len());
    for chunk in pending.chunks(batch) {
        let records: Vec<ExperimentRecord> = chunk
            .par_iter()
            .map(|t| run_trial(&models[t.shape], factor, ranges, cfg, t))
            .collect();
        for r in records {
            sink(&r)?;
            out.push(r);
        }
    }
    Ok(out)
}

pub const RECORD_HEADER: &str =
    "factor_name,factor_value,shape_id,instance_id,rot_error,trans_error,success,wall_time_s";

/// Append-only CSV record file.
pub struct RecordWriter {
    file: File,
}

impl RecordWriter {
    /// Opens `path` for appending, writing the header if the file is new or
    /// empty. Missing parent directories are created.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{RECORD_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &ExperimentRecord) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{}",
            r.factor_name,
            r.factor_value,
            r.shape_id,
            r.instance_id,
            r.rot_error,
            r.trans_error,
            r.success,
            r.wall_time_s
        )?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads a record file; a missing file yields no records. A truncated last
/// line (from an interrupted run) is ignored.
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 8 {
            continue;
        }
        match row.deserialize::<ExperimentRecord>(None) {
            Ok(r) => out.push(r),
            Err(_) => continue,
        }
    }
    Ok(out)
}

/// Aggregates for one controlled value. Errors and wall time are averaged
/// over successful trials only; they are NaN when no trial succeeded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorSummary {
    pub factor_name: String,
    pub factor_value: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub rot_error_mean: f64,
    pub rot_error_std: f64,
    pub trans_error_mean: f64,
    pub trans_error_std: f64,
    pub wall_time_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups records by (factor, value) in first-appearance order.
pub fn summarize(records: &[ExperimentRecord]) -> Vec<FactorSummary> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(n, v)| *n == r.factor_name && v.to_bits() == r.factor_value.to_bits()) {
            keys.push((r.factor_name.clone(), r.factor_value));
        }
    }
    keys.into_iter()
        .map(|(name, value)| {
            let group: Vec<&ExperimentRecord> = records
                .iter()
                .filter(|r| r.factor_name == name && r.factor_value.to_bits() == value.to_bits())
                .collect();
            let ok: Vec<&&ExperimentRecord> = group.iter().filter(|r| r.success).collect();
            let rot: Vec<f64> = ok.iter().map(|r| r.rot_error).collect();
            let tr: Vec<f64> = ok.iter().map(|r| r.trans_error).collect();
            let time: Vec<f64> = ok.iter().map(|r| r.wall_time_s).collect();
            let (rm, rs) = mean_std(&rot);
            let (tm, ts) = mean_std(&tr);
            FactorSummary {
                factor_name: name,
                factor_value: value,
                trials: group.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / group.len() as f64,
                rot_error_mean: rm,
                rot_error_std: rs,
                trans_error_mean: tm,
                trans_error_std: ts,
                wall_time_mean: mean_std(&time).0,
            }
        })
        .collect()
}

/// Writes `summary.csv` plus one whitespace-delimited curve file per metric
/// (`success_rate.dat`, `rot_error.dat`, `trans_error.dat`, `wall_time.dat`).
pub fn write_summary(dir: &Path, summary: &[FactorSummary]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    let curves: [(&str, fn(&FactorSummary) -> String); 4] = [
        ("success_rate", |s| format!("{}", s.success_rate)),
        ("rot_error", |s| format!("{} {}", s.rot_error_mean, s.rot_error_std)),
        ("trans_error", |s| format!("{} {}", s.trans_error_mean, s.trans_error_std)),
        ("wall_time", |s| format!("{}", s.wall_time_mean)),
    ];
    for (name, column) in curves {
        let mut f = File::create(dir.join(format!("{name}.dat")))?;
        writeln!(f, "# factor_value {name}")?;
        for s in summary {
            writeln!(f, "{} {}", s.factor_value, column(s))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(value: f64, rot: f64, trans: f64) -> ExperimentRecord {
        ExperimentRecord {
            factor_name: "rotation".into(),
            factor_value: value,
            shape_id: 0,
            instance_id: 0,
            rot_error: rot,
            trans_error: trans,
            success: is_success(rot, trans),
            wall_time_s: 1.0,
            note: None,
        }
    }

    #[test]
    fn sweeps_match_the_table() {
        let r = FactorRanges::default();
        let rot = r.rotation_deg.sweep();
        assert_eq!(rot.len(), 16);
        assert_eq!(rot[0], -60.0);
        assert_eq!(*rot.last().unwrap(), 60.0);
        assert_eq!(r.outliers.sweep().len(), 11);
        let noise = r.noise_std_frac.sweep();
        assert_eq!(noise.len(), 11);
        assert_eq!(noise[10], 0.3);
        assert_eq!(r.occlusion_frac.sweep().len(), 11);
    }

    #[test]
    fn summary_of_perfect_trials() {
        let s = summarize(&[rec(8.0, 0.0, 0.0), rec(8.0, 0.0, 0.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].success_rate, 1.0);
        assert_eq!(s[0].rot_error_mean, 0.0);
        assert_eq!(s[0].trans_error_mean, 0.0);
    }

    #[test]
    fn summary_counts_only_successes_in_means() {
        let s = summarize(&[rec(8.0, 0.05, 0.01), rec(8.0, 0.5, 0.01), rec(8.0, 0.15, 0.01)]);
        assert_relative_eq!(s[0].success_rate, 2.0 / 3.0);
        assert_relative_eq!(s[0].rot_error_mean, 0.10, epsilon = 1e-15);
    }

    #[test]
    fn summary_without_successes() {
        let s = summarize(&[rec(40.0, 1.0, 0.5)]);
        assert_eq!(s[0].success_rate, 0.0);
        assert!(s[0].rot_error_mean.is_nan());
        assert!(s[0].wall_time_mean.is_nan());
    }

    #[test]
    fn success_flag_is_recomputable() {
        for (r, t) in [(0.19, 0.09), (0.2, 0.0), (0.0, 0.1), (0.5, 0.5)] {
            let x = rec(0.0, r, t);
            assert_eq!(x.success, is_success(x.rot_error, x.trans_error));
        }
        assert!(is_success(0.19, 0.09));
        assert!(!is_success(0.2, 0.0));
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let mut seen = HashSet::new();
        for f in [Factor::Rotation, Factor::Noise] {
            for v in 0..5 {
                for s in 0..5 {
                    for i in 0..3 {
                        assert!(seen.insert(trial_seed(1, f, v, s, i)));
                    }
                }
            }
        }
    }

    #[test]
    fn draw_pins_the_controlled_factor() {
        let ranges = FactorRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let f = ranges.draw(Factor::Noise, 0.27, &mut rng);
            assert_eq!(f.noise_std_frac, 0.27);
            assert!((-20.0..=20.0).contains(&f.rotation_deg));
            assert!(f.outliers <= 500);
            assert!((0.0..=0.15).contains(&f.occlusion_frac));
        }
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut w = RecordWriter::open(&path).unwrap();
        let a = rec(-8.0, 0.012345678901234567, 0.5);
        w.append(&a).unwrap();
        drop(w);
        let mut w = RecordWriter::open(&path).unwrap();
        w.append(&rec(8.0, f64::NAN, f64::NAN)).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], a);
        assert!(back[1].rot_error.is_nan());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECORD_HEADER);
        assert_eq!(text.lines().filter(|l| *l == RECORD_HEADER).count(), 1);
    }
}
