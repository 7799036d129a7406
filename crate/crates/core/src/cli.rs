//! Command-line front end and on-disk formats.
//!
//! Cloud files are plain text:
//!
//! ```text
//! # comments start with '#'
//! dugma-cloud version=1 dim=3 count=2 covariance=1
//! x y z  c11 c12 c13 c22 c23 c33
//! ...
//! ```
//!
//! Each row holds `dim` coordinates, followed (when `covariance=1`) by the
//! upper triangle of the covariance, row by row. Transform files hold the
//! rotation matrix row by row and then the translation, one row per line,
//! after a `dim=D` line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 registration did not
//! converge.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::SVD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{
    self, shapes, synthesize_pair, ExperimentConfig, Factor, FactorRanges, RecordWriter, TrialFactors,
};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, translation_error, Mat3, PointCloud, RigidTransform, Vec3};
use crate::registration::{register, RegistrationConfig, RegistrationResult};
use crate::uncertainty::{covariance_from_noise_std, covariance_from_uncertainty, sensor_uncertainty, SensorModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

const CLOUD_MAGIC: &str = "dugma-cloud";
const CLOUD_VERSION: u32 = 1;

// ---------------------------------------------------------------- clouds

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("expected a finite number, found '{tok}'"),
        })
}

/// A parsed cloud file. `has_covariance` is false when the file carried no
/// covariances; the cloud then holds identity placeholders.
#[derive(Debug, Clone)]
pub struct CloudFile {
    pub cloud: PointCloud,
    pub has_covariance: bool,
}

pub fn parse_cloud(text: &str) -> Result<CloudFile> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(CLOUD_MAGIC) {
        return Err(Error::Parse {
            line: hline,
            message: format!("header must start with '{CLOUD_MAGIC}'"),
        });
    }
    let (mut version, mut dim, mut count, mut cov) = (None, None, None, None);
    for tok in toks {
        let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: hline,
            message: format!("expected key=value, found '{tok}'"),
        })?;
        let parsed: usize = value.parse().map_err(|_| Error::Parse {
            line: hline,
            message: format!("bad value for '{key}': '{value}'"),
        })?;
        match key {
            "version" => version = Some(parsed),
            "dim" => dim = Some(parsed),
            "count" => count = Some(parsed),
            "covariance" if parsed <= 1 => cov = Some(parsed == 1),
            _ => {
                return Err(Error::Parse {
                    line: hline,
                    message: format!("unknown header field '{tok}'"),
                })
            }
        }
    }
    let missing = |what: &str| Error::Parse {
        line: hline,
        message: format!("header lacks '{what}'"),
    };
    if version.ok_or_else(|| missing("version"))? != CLOUD_VERSION as usize {
        return Err(Error::Parse {
            line: hline,
            message: format!("unsupported format version (expected {CLOUD_VERSION})"),
        });
    }
    let dim = dim.ok_or_else(|| missing("dim"))?;
    if dim != 2 && dim != 3 {
        return Err(Error::UnsupportedDimension(dim));
    }
    let count = count.ok_or_else(|| missing("count"))?;
    let has_covariance = cov.ok_or_else(|| missing("covariance"))?;
    let width = dim + if has_covariance { dim * (dim + 1) / 2 } else { 0 };

    let mut points = Vec::with_capacity(count);
    let mut covs = Vec::with_capacity(count);
    let mut last_line = hline;
    for (line, row) in lines {
        last_line = line;
        let vals = row
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} values, found {}", vals.len()),
            });
        }
        if points.len() == count {
            return Err(Error::Parse {
                line,
                message: format!("more rows than the declared count {count}"),
            });
        }
        let mut p = Vec3::zeros();
        p.as_mut_slice()[..dim].copy_from_slice(&vals[..dim]);
        points.push(p);
        if has_covariance {
            let mut c = Mat3::identity();
            let mut k = dim;
            for r in 0..dim {
                for s in r..dim {
                    c[(r, s)] = vals[k];
                    c[(s, r)] = vals[k];
                    k += 1;
                }
            }
            covs.push(c);
        }
    }
    if points.len() != count {
        return Err(Error::Parse {
            line: last_line,
            message: format!("declared {count} points but found {}", points.len()),
        });
    }
    let cloud = if has_covariance {
        PointCloud::new(dim, points, covs)?
    } else {
        PointCloud::with_identity_covariances(dim, points)?
    };
    Ok(CloudFile { cloud, has_covariance })
}

/// Formats with 17 significant digits, enough to round-trip every `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_cloud(cloud: &PointCloud, with_covariance: bool) -> String {
    let dim = cloud.dim();
    let mut s = format!(
        "{CLOUD_MAGIC} version={CLOUD_VERSION} dim={dim} count={} covariance={}\n",
        cloud.len(),
        u8::from(with_covariance)
    );
    for (p, c) in cloud.points().iter().zip(cloud.covariances()) {
        let mut row: Vec<String> = (0..dim).map(|k| num(p[k])).collect();
        if with_covariance {
            for r in 0..dim {
                for q in r..dim {
                    row.push(num(c[(r, q)]));
                }
            }
        }
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_cloud(path: &Path) -> Result<CloudFile> {
    parse_cloud(&std::fs::read_to_string(path)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, with_covariance: bool) -> Result<()> {
    std::fs::write(path, format_cloud(cloud, with_covariance))?;
    Ok(())
}

// ------------------------------------------------------------ transforms

pub fn format_transform(t: &RigidTransform) -> String {
    let dim = t.dim();
    let mut s = format!("dim={dim}\n");
    for r in 0..dim {
        let row: Vec<String> = (0..dim).map(|c| num(t.rotation()[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let row: Vec<String> = (0..dim).map(|k| num(t.translation()[k])).collect();
    s.push_str(&row.join(" "));
    s.push('\n');
    s
}

/// Parses a transform file. Rotations stored with limited precision are
/// accepted up to 1e-6 and projected onto the nearest rotation.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty transform file".into(),
    })?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or(Error::Parse {
            line: hline,
            message: "expected 'dim=2' or 'dim=3'".into(),
        })?;
    if dim != 2 && dim != 3 {
        return Err(Error::UnsupportedDimension(dim));
    }
    let mut rows = Vec::new();
    let mut last = hline;
    for (line, row) in lines {
        last = line;
        let vals = row
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != dim {
            return Err(Error::Parse {
                line,
                message: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        rows.push(vals);
    }
    if rows.len() != dim + 1 {
        return Err(Error::Parse {
            line: last,
            message: format!("expected {} rows, found {}", dim + 1, rows.len()),
        });
    }
    let mut r = Mat3::identity();
    for (i, row) in rows[..dim].iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            r[(i, j)] = *v;
        }
    }
    let mut t = Vec3::zeros();
    t.as_mut_slice()[..dim].copy_from_slice(&rows[dim]);
    let invalid = || Error::Parse {
        line: hline,
        message: "rotation block is not a proper rotation".into(),
    };
    if (r.transpose() * r - Mat3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(invalid());
    }
    let svd = SVD::new(r, true, true);
    let (u, vt) = (svd.u.ok_or_else(invalid)?, svd.v_t.ok_or_else(invalid)?);
    RigidTransform::new(dim, u * vt, t).map_err(|_| invalid())
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    parse_transform(&std::fs::read_to_string(path)?)
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    std::fs::write(path, format_transform(t))?;
    Ok(())
}

// -------------------------------------------------------------- config

/// Settings of a benchmark sweep. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub factor: Factor,
    /// Controlled values; the factor's full sweep when absent.
    pub values: Option<Vec<f64>>,
    pub instances: usize,
    /// Directory of `*.cloud` models; the built-in shapes when absent.
    pub models_dir: Option<PathBuf>,
    /// Number of built-in shapes (at most 5).
    pub shapes: usize,
    /// Target size of the built-in shapes.
    pub model_points: usize,
    pub records: PathBuf,
    pub summary_dir: PathBuf,
    /// When false the wall-time column is written as 0, making the record
    /// file reproducible byte for byte.
    pub record_wall_time: bool,
    pub identity_covariances: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            factor: Factor::Rotation,
            values: None,
            instances: 3,
            models_dir: None,
            shapes: 5,
            model_points: 1000,
            records: PathBuf::from("records.csv"),
            summary_dir: PathBuf::from("summary"),
            record_wall_time: true,
            identity_covariances: false,
        }
    }
}

/// Top-level TOML configuration. Every section and key is optional; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub registration: RegistrationConfig,
    pub ranges: FactorRanges,
    pub sensor: SensorModelParams,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.registration.validate()?;
        cfg.ranges.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

// ------------------------------------------------------------------ args

#[derive(Debug, Parser)]
#[command(name = "dugma", version, about = "Rigid point-cloud registration with per-point uncertainty")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "DUGMA_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving cloud onto a fixed cloud.
    Register(RegisterArgs),
    /// Generate a perturbed fixed/moving pair from a model.
    Synth(SynthArgs),
    /// Run a benchmark sweep described by a config file.
    Bench(BenchArgs),
    /// Compare an estimated transform with the ground truth.
    Eval(EvalArgs),
    /// Convert an ASCII XYZ or PLY point file into a cloud file.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    /// Output transform file; the iteration trace is appended as comments.
    #[arg(short, long)]
    pub out: PathBuf,
    /// TOML config; its [registration] keys override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use identity covariances for clouds stored without them.
    #[arg(long)]
    pub identity_cov: bool,
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Model cloud file; use --shape for a built-in model instead.
    #[arg(required_unless_present = "shape")]
    pub model: Option<PathBuf>,
    /// Built-in model: chair, critter, drill, terrain or knot.
    #[arg(long, conflicts_with = "model")]
    pub shape: Option<String>,
    #[arg(short, long)]
    pub out_dir: PathBuf,
    /// Per-axis rotation magnitude in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rotation: f64,
    #[arg(long, default_value_t = 0)]
    pub outliers: usize,
    /// Maximum per-axis noise std as a fraction of the radius.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_fixed: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_moving: f64,
    /// Translation range as a fraction of the radius.
    #[arg(long, default_value_t = 0.0)]
    pub translation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub gt: PathBuf,
    pub est: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    /// Attach isotropic covariances with this standard deviation.
    #[arg(long, conflicts_with = "sensor")]
    pub noise_std: Option<f64>,
    /// Attach covariances from the depth-sensor model; needs normals and
    /// assumes the sensor at the origin looking along +z.
    #[arg(long)]
    pub sensor: bool,
    /// Sensor model weights from a config file's [sensor] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

// -------------------------------------------------------------- commands

fn format_trace(res: &RegistrationResult) -> String {
    let mut s = format!("# converged={} iterations={}\n", res.converged, res.iterations);
    s.push_str("# iteration sigma objective_start objective rotation_step translation_step solver_status solver_evaluations active_pairs\n");
    for r in &res.trace {
        let _ = writeln!(
            s,
            "# {} {} {} {} {} {} {} {} {}",
            r.iteration,
            r.sigma,
            r.objective_start,
            r.objective,
            r.rotation_step,
            r.translation_step,
            r.solver_status,
            r.solver_evaluations,
            r.active_pairs
        );
    }
    s
}

/// Registration settings from the flags, with any keys present in the
/// config file's `[registration]` table taking precedence.
fn registration_config(args: &RegisterArgs) -> Result<RegistrationConfig> {
    let mut base = RegistrationConfig {
        max_em_iters: args.max_iters,
        ..Default::default()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(over)) = table.get("registration") {
            let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in over {
                merged.insert(k.clone(), v.clone());
            }
            base = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        }
    }
    base.validate()?;
    Ok(base)
}

pub fn cmd_register(args: &RegisterArgs, err: &mut dyn Write) -> Result<i32> {
    let config = registration_config(args)?;
    let fixed = read_cloud(&args.fixed)?;
    let moving = read_cloud(&args.moving)?;
    for (name, f) in [("fixed", &fixed), ("moving", &moving)] {
        if !f.has_covariance && !args.identity_cov {
            return Err(Error::InvalidArgument(format!(
                "{name} cloud has no covariances; pass --identity-cov to use identity matrices"
            )));
        }
    }
    let res = register(&fixed.cloud, &moving.cloud, &config)?;
    let mut text = format_transform(&res.transform);
    text.push_str(&format_trace(&res));
    std::fs::write(&args.out, text)?;
    if res.converged {
        Ok(EXIT_OK)
    } else {
        writeln!(err, "registration did not converge within {} iterations", res.iterations)?;
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn shape_by_name(name: &str) -> Result<shapes::ShapeKind> {
    shapes::ShapeKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown shape '{name}'")))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let model = match (&args.model, &args.shape) {
        (Some(path), _) => read_cloud(path)?.cloud,
        (None, Some(name)) => shapes::model(shape_by_name(name)?, args.seed, 1000)?,
        (None, None) => return Err(Error::InvalidArgument("a model file or --shape is required".into())),
    };
    let factors = TrialFactors {
        rotation_deg: args.rotation,
        outliers: args.outliers,
        noise_std_frac: args.noise,
        occlusion_frac: args.occlusion,
        sample_rate_fixed: args.sample_fixed,
        sample_rate_moving: args.sample_moving,
        translation_frac: args.translation,
        ..TrialFactors::none()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let pair = synthesize_pair(&model, &factors, &mut rng)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_cloud(&args.out_dir.join("fixed.cloud"), &pair.fixed, true)?;
    write_cloud(&args.out_dir.join("moving.cloud"), &pair.moving, true)?;
    write_transform(&args.out_dir.join("gt_transform.txt"), &pair.truth)?;
    Ok(EXIT_OK)
}

fn load_models(cfg: &RunConfig, base: &Path) -> Result<Vec<PointCloud>> {
    match &cfg.bench.models_dir {
        Some(dir) => {
            let dir = base.join(dir);
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "cloud"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::InvalidArgument(format!("no .cloud models in {}", dir.display())));
            }
            paths.iter().map(|p| read_cloud(p).map(|f| f.cloud)).collect()
        }
        None => {
            let n = cfg.bench.shapes.clamp(1, shapes::ShapeKind::ALL.len());
            shapes::ShapeKind::ALL[..n]
                .iter()
                .map(|k| shapes::model(*k, cfg.seed, cfg.bench.model_points))
                .collect()
        }
    }
}

pub fn cmd_bench(args: &BenchArgs, err: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let models = load_models(&cfg, base)?;
    let records_path = base.join(&cfg.bench.records);
    let previous = bench::read_records(&records_path)?;
    let done = previous.iter().map(|r| r.key()).collect();
    let mut writer = RecordWriter::open(&records_path)?;
    let exp = ExperimentConfig {
        seed: cfg.seed,
        instances: cfg.bench.instances,
        values: cfg.bench.values.clone(),
        registration: cfg.registration.clone(),
        record_wall_time: cfg.bench.record_wall_time,
        identity_covariances: cfg.bench.identity_covariances,
    };
    let mut failures = Vec::new();
    bench::run_experiment(&models, cfg.bench.factor, &cfg.ranges, &exp, &done, |r| {
        if let Some(note) = &r.note {
            failures.push(format!(
                "trial {}={} shape {} instance {} failed: {note}",
                r.factor_name, r.factor_value, r.shape_id, r.instance_id
            ));
        }
        writer.append(r)
    })?;
    for f in failures {
        writeln!(err, "{f}")?;
    }
    let all = bench::read_records(&records_path)?;
    bench::write_summary(&base.join(&cfg.bench.summary_dir), &bench::summarize(&all))?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let gt = read_transform(&args.gt)?;
    let est = read_transform(&args.est)?;
    if gt.dim() != est.dim() {
        return Err(Error::DimensionMismatch {
            expected: gt.dim(),
            actual: est.dim(),
        });
    }
    let re = rotation_error(gt.rotation(), est.rotation());
    let te = translation_error(gt.translation(), est.translation());
    writeln!(out, "rot_error={re}")?;
    writeln!(out, "trans_error={te}")?;
    writeln!(out, "success={}", bench::is_success(re, te))?;
    Ok(EXIT_OK)
}

struct RawPoints {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

fn parse_ply(text: &str) -> Result<RawPoints> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim()));
    let (mut count, mut props, mut in_vertex) = (None, Vec::new(), false);
    for (line, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Parse {
                    line,
                    message: "only ASCII PLY is supported".into(),
                })
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad vertex count '{n}'"),
                })?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Parse {
                    line,
                    message: "list properties on vertices are not supported".into(),
                })
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or(Error::Parse {
        line: 1,
        message: "PLY header has no vertex element".into(),
    })?;
    let col = |n: &str| props.iter().position(|p| p == n);
    let xyz = [col("x"), col("y"), col("z")];
    let nrm = [col("nx"), col("ny"), col("nz")];
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for (line, l) in lines.take(count) {
        let vals = l
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != props.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} values, found {}", props.len(), vals.len()),
            });
        }
        let get = |c: [Option<usize>; 3]| Vec3::new(
            c[0].map_or(0.0, |k| vals[k]),
            c[1].map_or(0.0, |k| vals[k]),
            c[2].map_or(0.0, |k| vals[k]),
        );
        points.push(get(xyz));
        normals.push(get(nrm));
    }
    if points.len() != count {
        return Err(Error::Parse {
            line: 0,
            message: format!("PLY declares {count} vertices but holds {}", points.len()),
        });
    }
    Ok(RawPoints {
        points,
        normals: nrm.iter().all(Option::is_some).then_some(normals),
    })
}

/// `x y z [nx ny nz]` per line; '#' and '//' lines are skipped. Normals are
/// taken when every row has six columns.
fn parse_xyz(text: &str, dim: usize) -> Result<RawPoints> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut all_normals = true;
    for (line, l) in text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())) {
        if l.is_empty() || l.starts_with('#') || l.starts_with("//") {
            continue;
        }
        let vals = l
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() < dim {
            return Err(Error::Parse {
                line,
                message: format!("expected at least {dim} coordinates"),
            });
        }
        let mut p = Vec3::zeros();
        p.as_mut_slice()[..dim].copy_from_slice(&vals[..dim]);
        points.push(p);
        if dim == 3 && vals.len() >= 6 {
            normals.push(Vec3::new(vals[3], vals[4], vals[5]));
        } else {
            all_normals = false;
        }
    }
    Ok(RawPoints {
        points,
        normals: (all_normals && !normals.is_empty()).then_some(normals),
    })
}

fn sensor_covariances(raw: &RawPoints, params: &SensorModelParams) -> Result<Vec<Mat3>> {
    let normals = raw
        .normals
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--sensor needs per-point normals".into()))?;
    raw.points
        .iter()
        .zip(normals)
        .enumerate()
        .map(|(k, (p, n))| {
            let (ray, normal) = (p.try_normalize(0.0), n.try_normalize(0.0));
            let (ray, normal) = ray.zip(normal).ok_or_else(|| {
                Error::InvalidArgument(format!("point {k} sits at the sensor or has a zero normal"))
            })?;
            let alpha = ray.dot(&normal).abs().min(1.0).acos();
            covariance_from_uncertainty(sensor_uncertainty(alpha, p.z.abs(), params)?, 3)
        })
        .collect()
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.input)?;
    let raw = if text.trim_start().starts_with("ply") {
        if args.dim != 3 {
            return Err(Error::InvalidArgument("PLY input is always 3D".into()));
        }
        parse_ply(&text)?
    } else {
        if args.dim != 2 && args.dim != 3 {
            return Err(Error::UnsupportedDimension(args.dim));
        }
        parse_xyz(&text, args.dim)?
    };
    let (covs, with_cov) = if let Some(s) = args.noise_std {
        let c = covariance_from_noise_std(&vec![s; args.dim])?;
        (vec![c; raw.points.len()], true)
    } else if args.sensor {
        let params = match &args.config {
            Some(p) => RunConfig::load(p)?.sensor,
            None => SensorModelParams::default(),
        };
        (sensor_covariances(&raw, &params)?, true)
    } else {
        (vec![Mat3::identity(); raw.points.len()], false)
    };
    let cloud = PointCloud::new(args.dim, raw.points, covs)?;
    write_cloud(&args.output, &cloud, with_cov)?;
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if the pool was already built, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Register(a) => cmd_register(a, err),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Convert(a) => cmd_convert(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_INPUT
        }
    }
}
