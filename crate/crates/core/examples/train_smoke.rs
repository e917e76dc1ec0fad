// scratch: watch the rpm-only subset learn
use std::collections::BTreeMap;

use driverid_core::dcrnn::{ArchitectureConfig, Dcrnn};
use driverid_core::encoding::{encode_trajectory, BasicFeature, EncodingConfig, SegmentRecord};
use driverid_core::sampling::{DatasetManifest, ManifestEntry, ParamsRecord, Split, Strategy};
use driverid_core::similarity::SimilarityStats;
use driverid_core::synth::{generate_trajectory, StyleProfile};
use driverid_core::train::{assemble_dataset, split_manifest, train, TrainConfig};

fn style(cruise: f64, agg: f64, idle: f64, slope: f64) -> StyleProfile {
    let speeds = [0.0, 8.0, 16.0, 25.0, 40.0];
    let mults = [1.6, 1.2, 0.9, 0.7];
    let mut curve = vec![(0.0, idle)];
    let mut rpm = idle;
    for (k, w) in speeds.windows(2).enumerate() {
        rpm += slope * mults[k] * (w[1] - w[0]);
        curve.push((w[1], rpm));
    }
    StyleProfile { cruise_speed_mean: cruise, cruise_speed_std: 1.5, accel_aggressiveness: agg,
        rpm_curve: curve, stop_frequency: 0.6, heading_drift_rate: 1.5, smoothness: 0.5 }
}

fn main() {
    let profiles = [style(20.0, 1.0, 650.0, 50.0), style(20.0, 1.0, 1600.0, 70.0), style(20.0, 1.0, 2600.0, 90.0)];
    let enc = EncodingConfig { l1: 64, l2: 4, features: vec![BasicFeature::Rpm] };
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (d, prof) in profiles.iter().enumerate() {
        for t in 0..14 {
            let id = format!("d{d:02}_t{t:03}");
            let traj = generate_trajectory(prof, &format!("d{d:02}"), &id, 600, 300 + (d * 100 + t) as u64, 0).unwrap();
            for (i, map) in encode_trajectory(&traj, &enc).unwrap().into_iter().enumerate() {
                records.push(SegmentRecord { trajectory_id: id.clone(), segment_index: i as u32, map });
            }
            entries.push(ManifestEntry { driver_id: format!("d{d:02}"), trajectory_id: id, split: Split::Train });
        }
    }
    let manifest = DatasetManifest { name: "rpm".into(), strategy: Strategy::Random,
        params: ParamsRecord { nu: None, thresholds: None, n_trajectories: 14, n_drivers: 3 },
        seed: 0, stats: SimilarityStats::zero(), entries };
    let split = split_manifest(&manifest, 0.85, 11).unwrap();
    let dataset = assemble_dataset(&records, &split).unwrap();
    println!("train {} test {}", dataset.train.len(), dataset.test.len());
    let arch = ArchitectureConfig::new(1, enc.time_len(), 3);
    let mut model = Dcrnn::build(arch, driverid_core::seeding::derive_seed(11, "model-init")).unwrap();
    // peek at standardized input scale
    let cfg = TrainConfig { epochs: 14, eval_every: 1, seed: 11, ..TrainConfig::default() };
    let history = train(&mut model, &dataset, &cfg).unwrap();
    for h in &history {
        println!("epoch {:>2} loss {:.4} seg {:?} traj {:?}", h.epoch, h.loss, h.seg_accuracy, h.traj_accuracy);
    }
}
