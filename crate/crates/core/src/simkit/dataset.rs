//! Simulated trajectory corpora and their on-disk layout.
//!
//! ```text
//! <root>/manifest.json          version "dvse-ds/1"
//! <root>/traj_0000/imu.csv      t,ax,ay,az,gx,gy,gz
//! <root>/traj_0000/gnss.csv     t,speed
//! <root>/traj_0000/truth.csv    t,speed,alpha,beta,gamma
//! ```
//!
//! All CSV values are written with six decimals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profile::{gen_speed_profile, ManeuverConfig, SAMPLES_PER_SECOND};
use super::synth::{synth_gnss, synth_imu_scheduled, GnssStream, ImuStream, NoiseConfig, PoseSchedule};
use crate::geom::{random_rotation, AngleRanges, EulerAngles, Vec3};
use crate::{Error, Result};

pub const DATASET_VERSION: &str = "dvse-ds/1";

/// SplitMix64 finalizer; derives independent child seeds from a parent.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PosePolicy {
    Fixed { pose: EulerAngles },
    Random { ranges: AngleRanges },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePolicy {
    Zero,
    /// Default white/walk/vibration levels; per-trajectory biases drawn
    /// uniformly per axis from `±accel_bias_max` and `±gyro_bias_max`.
    Default { accel_bias_max: f64, gyro_bias_max: f64 },
    Fixed { noise: NoiseConfig },
}

impl NoisePolicy {
    pub fn default_noise() -> Self {
        NoisePolicy::Default {
            accel_bias_max: 0.1,
            gyro_bias_max: 0.005,
        }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub duration_s: usize,
    pub seed: u64,
    pub pose_policy: PosePolicy,
    pub noise_policy: NoisePolicy,
    pub delay_fraction: f64,
    #[serde(default = "default_gnss_sigma")]
    pub gnss_sigma: f64,
    #[serde(default)]
    pub maneuver: ManeuverConfig,
    /// One seeded mid-trajectory pose change per trajectory.
    #[serde(default)]
    pub pose_change: bool,
}

fn default_gnss_sigma() -> f64 {
    0.1
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::invalid("n_traj must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.delay_fraction) {
            return Err(Error::invalid(format!(
                "delay_fraction {} not in [0, 1]",
                self.delay_fraction
            )));
        }
        if let PosePolicy::Random { ranges } = &self.pose_policy {
            ranges.validate()?;
        }
        Ok(())
    }

    /// Number of trajectories that receive a 1 s GNSS delay.
    pub fn n_delayed(&self) -> usize {
        (self.delay_fraction * self.n_traj as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub id: String,
    pub seed: u64,
    pub pose: EulerAngles,
    pub pose_change: Option<(f64, EulerAngles)>,
    pub noise: NoiseConfig,
    pub delay_s: u32,
}

/// One simulated drive.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub imu: ImuStream,
    pub gnss: GnssStream,
    /// Ground-truth speed at whole seconds `0..=duration`.
    pub truth_speed: Vec<f64>,
    /// Phone-to-vehicle pose at whole seconds `0..=duration`.
    pub truth_pose: Vec<EulerAngles>,
    pub meta: TrajectoryMeta,
}

impl TrajectoryRecord {
    pub fn duration_s(&self) -> usize {
        self.truth_speed.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub config: DatasetConfig,
    pub trajectories: Vec<TrajectoryMeta>,
}

/// Generates one trajectory from its own seed.
pub fn generate_trajectory(cfg: &DatasetConfig, index: usize, delay_s: u32) -> Result<TrajectoryRecord> {
    let seed = derive_seed(cfg.seed, index as u64);
    let profile = gen_speed_profile(derive_seed(seed, 0), cfg.duration_s, &cfg.maneuver)?;

    let mut pose_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let draw_pose = |rng: &mut ChaCha8Rng| -> Result<EulerAngles> {
        match &cfg.pose_policy {
            PosePolicy::Fixed { pose } => Ok(*pose),
            PosePolicy::Random { ranges } => Ok(random_rotation(rng, ranges)?.0),
        }
    };
    let pose = draw_pose(&mut pose_rng)?;
    let pose_change = if cfg.pose_change {
        let tc = cfg.duration_s as f64 * (0.3 + 0.4 * pose_rng.random::<f64>());
        let tc = tc.round();
        Some((tc, draw_pose(&mut pose_rng)?))
    } else {
        None
    };

    let noise = match cfg.noise_policy {
        NoisePolicy::Zero => NoiseConfig::ZERO,
        NoisePolicy::Fixed { noise } => noise,
        NoisePolicy::Default {
            accel_bias_max,
            gyro_bias_max,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
            let mut sym = |m: f64| m * (2.0 * rng.random::<f64>() - 1.0);
            let accel_bias = Vec3::new(sym(accel_bias_max), sym(accel_bias_max), sym(accel_bias_max));
            let gyro_bias = Vec3::new(sym(gyro_bias_max), sym(gyro_bias_max), sym(gyro_bias_max));
            NoiseConfig {
                accel_bias,
                gyro_bias,
                ..NoiseConfig::default_levels()
            }
        }
    };

    let schedule = PoseSchedule { initial: pose, change: pose_change };
    let imu = synth_imu_scheduled(&profile, &schedule, &noise, derive_seed(seed, 3))?;
    let gnss = synth_gnss(&profile, delay_s, cfg.gnss_sigma, derive_seed(seed, 4))?;
    let truth_speed = (0..=cfg.duration_s).map(|k| profile.speed_at_second(k)).collect();
    let truth_pose = (0..=cfg.duration_s).map(|k| schedule.at(k as f64)).collect();

    Ok(TrajectoryRecord {
        imu,
        gnss,
        truth_speed,
        truth_pose,
        meta: TrajectoryMeta {
            id: format!("traj_{index:04}"),
            seed,
            pose,
            pose_change,
            noise,
            delay_s,
        },
    })
}

/// Per-trajectory delays: exactly `n_delayed` ones, positions shuffled by seed.
fn assign_delays(cfg: &DatasetConfig) -> Vec<u32> {
    let mut delays: Vec<u32> = (0..cfg.n_traj).map(|i| u32::from(i < cfg.n_delayed())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    delays.shuffle(&mut rng);
    delays
}

/// Generates the whole corpus in memory.
pub fn generate_records(cfg: &DatasetConfig) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    assign_delays(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, d)| generate_trajectory(cfg, i, d))
        .collect()
}

/// Generates the corpus and writes it under `out`.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let records = generate_records(cfg)?;
    write_dataset(cfg, &records, out)
}

pub fn write_dataset(cfg: &DatasetConfig, records: &[TrajectoryRecord], out: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for rec in records {
        write_trajectory(rec, &out.join(&rec.meta.id))?;
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION.to_string(),
        config: cfg.clone(),
        trajectories: records.iter().map(|r| r.meta.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    atomic_write(&out.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn imu_to_csv(imu: &ImuStream) -> String {
    let mut s = String::with_capacity(imu.len() * 72 + 32);
    s.push_str("t,ax,ay,az,gx,gy,gz\n");
    for i in 0..imu.len() {
        let (a, g) = (imu.accel[i], imu.gyro[i]);
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            imu.t[i], a.x, a.y, a.z, g.x, g.y, g.z
        ));
    }
    s
}

fn write_trajectory(rec: &TrajectoryRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("imu.csv"), imu_to_csv(&rec.imu).as_bytes())?;

    let mut gnss = String::from("t,speed\n");
    for (t, v) in rec.gnss.t.iter().zip(&rec.gnss.speed) {
        gnss.push_str(&format!("{t:.6},{v:.6}\n"));
    }
    atomic_write(&dir.join("gnss.csv"), gnss.as_bytes())?;

    let mut truth = String::from("t,speed,alpha,beta,gamma\n");
    for (k, (v, p)) in rec.truth_speed.iter().zip(&rec.truth_pose).enumerate() {
        truth.push_str(&format!(
            "{:.6},{v:.6},{:.6},{:.6},{:.6}\n",
            k as f64, p.alpha, p.beta, p.gamma
        ));
    }
    atomic_write(&dir.join("truth.csv"), truth.as_bytes())
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if got != header {
        return Err(Error::Parse(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            got,
            header
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), line + 2)))?;
        if row.len() != header.len() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("{} row {}: bad field count or value", path.display(), line + 2)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads an `imu.csv` file.
pub fn read_imu_csv(path: &Path) -> Result<ImuStream> {
    let rows = read_table(path, &["t", "ax", "ay", "az", "gx", "gy", "gz"])?;
    let imu = ImuStream {
        t: rows.iter().map(|r| r[0]).collect(),
        accel: rows.iter().map(|r| Vec3::new(r[1], r[2], r[3])).collect(),
        gyro: rows.iter().map(|r| Vec3::new(r[4], r[5], r[6])).collect(),
    };
    imu.validate()?;
    Ok(imu)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if m.version != DATASET_VERSION {
        return Err(Error::Parse(format!(
            "dataset version {:?}, expected {DATASET_VERSION:?}",
            m.version
        )));
    }
    Ok(m)
}

/// Loads every trajectory listed in the manifest.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<TrajectoryRecord>)> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.trajectories.len());
    for meta in &manifest.trajectories {
        let dir: PathBuf = root.join(&meta.id);
        let imu = read_imu_csv(&dir.join("imu.csv"))?;
        let gnss_rows = read_table(&dir.join("gnss.csv"), &["t", "speed"])?;
        let truth_rows = read_table(&dir.join("truth.csv"), &["t", "speed", "alpha", "beta", "gamma"])?;
        if truth_rows.len() != imu.len() / SAMPLES_PER_SECOND + 1 || gnss_rows.len() + 1 != truth_rows.len() {
            return Err(Error::Parse(format!("{}: stream lengths disagree", meta.id)));
        }
        let gnss = GnssStream {
            t: gnss_rows.iter().map(|r| r[0]).collect(),
            speed: gnss_rows.iter().map(|r| r[1]).collect(),
            delay_s: meta.delay_s,
            sigma: manifest.config.gnss_sigma,
        };
        out.push(TrajectoryRecord {
            imu,
            gnss,
            truth_speed: truth_rows.iter().map(|r| r[1]).collect(),
            truth_pose: truth_rows
                .iter()
                .map(|r| EulerAngles { alpha: r[2], beta: r[3], gamma: r[4] })
                .collect(),
            meta: meta.clone(),
        });
    }
    Ok((manifest, out))
}
