//! Ground-truth motion and sensor synthesis, standing in for recorded drives.

pub mod dataset;
pub mod profile;
pub mod synth;

pub use dataset::{
    atomic_write, derive_seed, generate_records, generate_trajectory, load_dataset, make_dataset, read_imu_csv, read_manifest, write_dataset,
    DatasetConfig, DatasetManifest, NoisePolicy, PosePolicy, TrajectoryMeta, TrajectoryRecord, DATASET_VERSION,
};
pub use profile::{gen_speed_profile, ManeuverConfig, Segment, SpeedProfile, DT, SAMPLES_PER_SECOND};
pub use synth::{synth_gnss, synth_imu, synth_imu_scheduled, GnssStream, ImuStream, NoiseConfig, PoseSchedule};
