//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! The heavy criteria (5 and 6) train real models on synthetic data and
//! dominate the suite's runtime; everything here runs on a desktop CPU.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use driverid_core::dcrnn::{ArchitectureConfig, Dcrnn};
use driverid_core::encoding::{encode_trajectory, EncodingConfig, SegmentRecord};
use driverid_core::nn::{
    self, batch_norm_backward, batch_norm_forward, conv2d_backward, conv2d_forward,
    dense_backward, dense_forward, gradient_check, gradient_check_with, gru_backward,
    gru_forward, maxpool_feature_backward, maxpool_feature_forward, softmax_cross_entropy,
    Activation, CoordSelection, GruWeights, Mode, ParameterStore, Tensor,
};
use driverid_core::resolution::{affinity_propagation, ami, estimation_error, ApConfig};
use driverid_core::sampling::{
    manifest_stats, random_sample, stratified_sample, threshold_sample, DatasetManifest,
    SamplingParams, Split,
};
use driverid_core::seeding::{derive_seed, stream_rng};
use driverid_core::similarity::{
    haversine, read_matrix_csv, similarity_score, MatchThreshold, SimilarityMatrix,
};
use driverid_core::synth::{generate_dataset, generate_trajectory, SynthConfig};
use driverid_core::telemetry::{preprocess, PreprocessConfig, Trajectory};
use driverid_core::train::{
    assemble_dataset, average_probabilities, split_manifest, train, Dataset, TrainConfig,
};

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = stream_rng(seed, "acceptance-fixture");
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "acceptance-projection");
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// criterion 1: gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();

    // conv2d
    {
        let pad = (1, 1);
        let mut store = ParameterStore::new();
        store.insert("input", random_tensor(&[2, 5, 8], 1, 1.0));
        store.insert("kernels", random_tensor(&[3, 2, 3, 3], 2, 0.5));
        let out = conv2d_forward(store.value("input"), store.value("kernels"), pad).unwrap();
        let c = projection(out.len(), 3);
        let gout = Tensor::from_vec(out.shape(), c.clone()).unwrap();
        let (gi, gk) =
            conv2d_backward(store.value("input"), store.value("kernels"), pad, &gout).unwrap();
        store.get_mut("input").grad = gi;
        store.get_mut("kernels").grad = gk;
        let report = gradient_check(
            &mut store,
            |s| {
                let out = conv2d_forward(s.value("input"), s.value("kernels"), pad)?;
                Ok(dot(out.data(), &c))
            },
            1e-6,
            40,
            7,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "conv2d {report:?}");
    }

    // max-pool
    {
        let mut store = ParameterStore::new();
        store.insert("input", random_tensor(&[16, 4], 4, 1.0));
        let (out, argmax) = maxpool_feature_forward(store.value("input"), 8).unwrap();
        let c = projection(out.len(), 5);
        let gout = Tensor::from_vec(out.shape(), c.clone()).unwrap();
        store.get_mut("input").grad = maxpool_feature_backward((16, 4), 8, &argmax, &gout).unwrap();
        let report = gradient_check(
            &mut store,
            |s| {
                let (out, _) = maxpool_feature_forward(s.value("input"), 8)?;
                Ok(dot(out.data(), &c))
            },
            1e-6,
            64,
            8,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "maxpool {report:?}");
    }

    // GRU over a short sequence
    {
        let (t, d, h) = (5usize, 4usize, 3usize);
        let mut store = ParameterStore::new();
        store.insert("inputs", random_tensor(&[t, d], 10, 1.0));
        for (i, name) in ["wz", "wr", "wh"].iter().enumerate() {
            store.insert(name, random_tensor(&[h, d], 11 + i as u64, 0.6));
        }
        for (i, name) in ["uz", "ur", "uh"].iter().enumerate() {
            store.insert(name, random_tensor(&[h, h], 14 + i as u64, 0.6));
        }
        for (i, name) in ["bz", "br", "bh"].iter().enumerate() {
            store.insert(name, random_tensor(&[h], 17 + i as u64, 0.3));
        }
        fn weights(s: &ParameterStore) -> GruWeights<'_> {
            GruWeights {
                wz: s.value("wz"),
                uz: s.value("uz"),
                bz: s.value("bz"),
                wr: s.value("wr"),
                ur: s.value("ur"),
                br: s.value("br"),
                wh: s.value("wh"),
                uh: s.value("uh"),
                bh: s.value("bh"),
            }
        }
        let (out, cache) = gru_forward(&weights(&store), store.value("inputs")).unwrap();
        let c = projection(out.len(), 20);
        let gout = Tensor::from_vec(out.shape(), c.clone()).unwrap();
        let (grads, gi) = gru_backward(&weights(&store), &cache, &gout).unwrap();
        store.get_mut("inputs").grad = gi;
        for (name, grad) in [
            ("wz", grads.wz),
            ("uz", grads.uz),
            ("bz", grads.bz),
            ("wr", grads.wr),
            ("ur", grads.ur),
            ("br", grads.br),
            ("wh", grads.wh),
            ("uh", grads.uh),
            ("bh", grads.bh),
        ] {
            store.get_mut(name).grad = grad;
        }
        let report = gradient_check(
            &mut store,
            |s| {
                let (out, _) = gru_forward(&weights(s), s.value("inputs"))?;
                Ok(dot(out.data(), &c))
            },
            1e-6,
            20,
            21,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "gru {report:?}");
    }

    // dense (both activations)
    for activation in [Activation::Sigmoid, Activation::None] {
        let mut store = ParameterStore::new();
        store.insert("input", random_tensor(&[2, 4], 30, 1.0));
        store.insert("w", random_tensor(&[3, 4], 31, 0.8));
        store.insert("b", random_tensor(&[3], 32, 0.5));
        let out = dense_forward(
            store.value("input"),
            store.value("w"),
            store.value("b"),
            activation,
        )
        .unwrap();
        let c = projection(out.len(), 33);
        let gout = Tensor::from_vec(out.shape(), c.clone()).unwrap();
        let (gi, gw, gb) = dense_backward(
            store.value("input"),
            store.value("w"),
            &out,
            activation,
            &gout,
        )
        .unwrap();
        store.get_mut("input").grad = gi;
        store.get_mut("w").grad = gw;
        store.get_mut("b").grad = gb;
        let report = gradient_check(
            &mut store,
            |s| {
                let out = dense_forward(s.value("input"), s.value("w"), s.value("b"), activation)?;
                Ok(dot(out.data(), &c))
            },
            1e-6,
            30,
            34,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "dense {activation:?} {report:?}");
    }

    // batch normalization
    {
        let mut store = ParameterStore::new();
        store.insert("input", random_tensor(&[8, 5], 40, 1.5));
        store.insert("gamma", random_tensor(&[5], 41, 0.9));
        store.insert("beta", random_tensor(&[5], 42, 0.5));
        let forward = |s: &ParameterStore| {
            let mut rm = Tensor::zeros(&[5]);
            let mut rv = Tensor::filled(&[5], 1.0);
            let (out, cache) = batch_norm_forward(
                s.value("input"),
                s.value("gamma"),
                s.value("beta"),
                &mut rm,
                &mut rv,
                Mode::Train,
                0.99,
                1e-5,
                false,
            )?;
            Ok((out, cache.expect("train cache")))
        };
        let (out, cache) = forward(&store).unwrap();
        let c = projection(out.len(), 43);
        let gout = Tensor::from_vec(out.shape(), c.clone()).unwrap();
        let (gx, ggamma, gbeta) =
            batch_norm_backward(&cache, store.value("gamma"), &gout).unwrap();
        store.get_mut("input").grad = gx;
        store.get_mut("gamma").grad = ggamma;
        store.get_mut("beta").grad = gbeta;
        let report = gradient_check(
            &mut store,
            |s| {
                let (out, _) = forward(s)?;
                Ok(dot(out.data(), &c))
            },
            1e-6,
            40,
            44,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "batch_norm {report:?}");
    }

    // softmax cross-entropy
    {
        let labels = [1usize, 4, 0];
        let mut store = ParameterStore::new();
        store.insert("logits", random_tensor(&[3, 5], 60, 2.0));
        let (_, grad) = softmax_cross_entropy(store.value("logits"), &labels).unwrap();
        store.get_mut("logits").grad = grad;
        let report = gradient_check(
            &mut store,
            |s| Ok(softmax_cross_entropy(s.value("logits"), &labels)?.0),
            1e-6,
            15,
            61,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "softmax-ce {report:?}");
    }

    // the full network on a tiny configuration
    {
        let mut cfg = ArchitectureConfig::new(1, 8, 2);
        cfg.dropout = 0.0;
        let mut model = Dcrnn::build(cfg.clone(), 3).unwrap();
        let x1 = random_tensor(&[7, 8], 70, 1.0);
        let x2 = random_tensor(&[7, 8], 71, 1.0);
        let labels = [0usize, 0];
        model
            .backward_for_gradient_check(&[&x1, &x2], &labels)
            .unwrap();
        let inputs = [x1.clone(), x2.clone()];
        let mut store = std::mem::take(&mut model.store);
        let report = gradient_check_with(
            &mut store,
            |s| {
                let mut probe = Dcrnn::build(cfg.clone(), 3)?;
                probe.store = s.clone();
                let refs: Vec<&Tensor> = inputs.iter().collect();
                probe.loss_for_gradient_check(&refs, &labels)
            },
            1e-5,
            6,
            11,
            CoordSelection::LargestAnalytic,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "full model {report:?}");
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "gradient fidelity took {elapsed:?}, budget is 2 minutes"
    );
    println!("criterion 1 (gradient fidelity): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 2: similarity oracle equivalence
// ---------------------------------------------------------------------------

/// Naive replay of the greedy matcher: no prefilters, no short-circuit.
fn replay_score(t1: &Trajectory, t2: &Trajectory, tau: f64) -> f64 {
    let n2 = t2.points.len();
    let mut matched = vec![false; n2];
    let mut count = 0usize;
    for p1 in &t1.points {
        for (j, p2) in t2.points.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let d = haversine(
                (p1.lat.unwrap(), p1.lng.unwrap()),
                (p2.lat.unwrap(), p2.lng.unwrap()),
            );
            if d < tau {
                matched[j] = true;
                count += 1;
                break;
            }
        }
    }
    count as f64 / t1.points.len().min(n2) as f64
}

/// Clone a trajectory with every point shifted by a random offset around
/// the matching threshold, so scores land strictly inside (0, 1).
fn perturbed_clone(t: &Trajectory, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut out = t.clone();
    out.trajectory_id.push('p');
    for p in &mut out.points {
        // 1e-3 degrees of latitude is about 111 m
        let shift = rng.gen_range(0.0..2.2e-3);
        p.lat = Some(p.lat.unwrap() + shift);
    }
    out
}

#[test]
fn criterion_2_similarity_oracle_equivalence() {
    let mut rng = stream_rng(2024, "criterion2");
    let profile = driverid_core::synth::generate_profile(5, 1.0);
    let base: Vec<Trajectory> = (0..10)
        .map(|i| {
            generate_trajectory(&profile, "d", &format!("t{i}"), 300, 9000 + i, 0).unwrap()
        })
        .collect();

    let mut pairs: Vec<(Trajectory, Trajectory)> = Vec::new();
    // natural pairs (mostly disjoint routes)
    for i in 0..10 {
        for j in (i + 1)..10 {
            if pairs.len() < 50 {
                pairs.push((base[i].clone(), base[j].clone()));
            }
        }
    }
    // perturbed clones with partial overlap
    let mut k = 0usize;
    while pairs.len() < 100 {
        let t = &base[k % base.len()];
        pairs.push((t.clone(), perturbed_clone(t, &mut rng)));
        k += 1;
    }
    assert_eq!(pairs.len(), 100);

    let taus = [25.0, 50.0, 100.0, 200.0, 400.0];
    let mut nonzero = 0usize;
    for (a, b) in &pairs {
        let mut previous = -1.0f64;
        for tau in taus {
            let thr = MatchThreshold::new(tau).unwrap();
            let ours = similarity_score(a, b, &thr).unwrap();
            let oracle = replay_score(a, b, tau);
            assert_eq!(
                ours, oracle,
                "score mismatch for {}/{} at tau {tau}",
                a.trajectory_id, b.trajectory_id
            );
            assert!((0.0..=1.0).contains(&ours));
            assert!(
                ours >= previous,
                "tau-monotonicity violated at tau {tau}: {previous} -> {ours}"
            );
            previous = ours;
            if ours > 0.0 {
                nonzero += 1;
            }
        }
    }
    // the fixture set must exercise real matching, not just zeros
    assert!(nonzero > 100, "only {nonzero} nonzero scores across fixtures");
    println!("criterion 2 (similarity oracle equivalence): PASS on 100 pairs x {} taus", taus.len());
}

// ---------------------------------------------------------------------------
// criterion 3: sampling invariants
// ---------------------------------------------------------------------------

/// Build a similarity matrix through the public CSV interface.
fn matrix_from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> SimilarityMatrix {
    let ids: Vec<String> = (0..n).map(|i| format!("t{i:03}")).collect();
    let mut csv = String::new();
    csv.push(',');
    csv.push_str(&ids.join(","));
    csv.push('\n');
    for i in 0..n {
        let mut row = vec![ids[i].clone()];
        for j in 0..n {
            let v = if i == j { 1.0 } else { f(i.min(j), i.max(j)) };
            row.push(v.to_string());
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    read_matrix_csv(csv.as_bytes()).unwrap()
}

#[test]
fn criterion_3_sampling_invariants() {
    // random conflict structure per driver
    let mut matrices: BTreeMap<String, SimilarityMatrix> = BTreeMap::new();
    for d in 0..8 {
        let mut rng = stream_rng(300 + d, "criterion3");
        let n = 30;
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                scores[i * n + j] = rng.gen_range(0.0f64..0.6);
            }
        }
        matrices.insert(
            format!("d{d:02}"),
            matrix_from_fn(n, |i, j| scores[i * n + j]),
        );
    }

    // threshold: exhaustive max-pair check
    let nu = 0.2;
    let params = SamplingParams {
        nu,
        n_trajectories: 8,
        n_drivers: 5,
        seed: 17,
        ..SamplingParams::default()
    };
    let manifest = threshold_sample(&matrices, &params).unwrap();
    for driver in manifest.drivers() {
        let kept = manifest.trajectories_of(&driver, None);
        assert_eq!(kept.len(), 8);
        let matrix = &matrices[&driver];
        for (a, ta) in kept.iter().enumerate() {
            for tb in kept.iter().skip(a + 1) {
                let i = matrix.index_of(ta).unwrap();
                let j = matrix.index_of(tb).unwrap();
                assert!(
                    matrix.score(i, j) < nu,
                    "pair {ta}/{tb} of {driver} scores {}",
                    matrix.score(i, j)
                );
            }
        }
    }
    let stats = manifest_stats(&manifest, &matrices).unwrap();
    assert!(stats.max < nu);

    // stratified: exactly N/m per bucket per driver
    let blocks = [[0.01, 0.03, 0.05], [0.03, 0.15, 0.25], [0.05, 0.25, 0.45]];
    let mut strat_matrices: BTreeMap<String, SimilarityMatrix> = BTreeMap::new();
    for d in 0..4 {
        strat_matrices.insert(
            format!("d{d:02}"),
            matrix_from_fn(30, |i, j| blocks[i % 3][j % 3]),
        );
    }
    let thresholds = vec![0.1, 0.2, 0.3];
    let strat_params = SamplingParams {
        thresholds: thresholds.clone(),
        n_trajectories: 15,
        n_drivers: 4,
        seed: 23,
        ..SamplingParams::default()
    };
    let strat = stratified_sample(&strat_matrices, &strat_params).unwrap();
    for driver in strat.drivers() {
        let kept = strat.trajectories_of(&driver, None);
        assert_eq!(kept.len(), 15);
        let matrix = &strat_matrices[&driver];
        let mut counts = [0usize; 3];
        for t in &kept {
            let i = matrix.index_of(t).unwrap();
            let avg = matrix.average_of(i);
            let bucket = thresholds
                .iter()
                .position(|hi| avg < *hi)
                .expect("average within buckets");
            counts[bucket] += 1;
        }
        assert_eq!(counts, [5, 5, 5], "driver {driver} buckets {counts:?}");
    }

    // identical seeds reproduce manifests byte for byte
    let again = threshold_sample(&matrices, &params).unwrap();
    assert_eq!(manifest.to_json().unwrap(), again.to_json().unwrap());
    let strat_again = stratified_sample(&strat_matrices, &strat_params).unwrap();
    assert_eq!(strat.to_json().unwrap(), strat_again.to_json().unwrap());
    let by_driver: BTreeMap<String, Vec<String>> = matrices
        .iter()
        .map(|(d, m)| (d.clone(), m.trajectory_ids.clone()))
        .collect();
    let rnd_params = SamplingParams {
        n_trajectories: 10,
        n_drivers: 4,
        seed: 29,
        ..SamplingParams::default()
    };
    let rnd_a = random_sample(&by_driver, &rnd_params).unwrap();
    let rnd_b = random_sample(&by_driver, &rnd_params).unwrap();
    assert_eq!(rnd_a.to_json().unwrap(), rnd_b.to_json().unwrap());

    println!("criterion 3 (sampling invariants): PASS");
}

// ---------------------------------------------------------------------------
// criterion 4: shape law
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_shape_law() {
    let enc = EncodingConfig::default();
    assert_eq!(enc.aggregate_rows(), 21);
    assert_eq!(enc.time_len(), 128);

    for f in [1usize, 3, 5, 10] {
        let cfg = ArchitectureConfig::new(f, 128, 10);
        let mut model = Dcrnn::build(cfg, 1).unwrap();
        let shapes = model.shapes();
        assert_eq!(shapes.input, (7 * f, 128));
        assert_eq!(shapes.gru_input, (32 + 7 * f, 128));
        // time axis preserved at every stage through the GRU input
        assert_eq!(shapes.conv1_out.1, 128);
        assert_eq!(shapes.pool1_out.1, 128);
        assert_eq!(shapes.conv2_out.2, 128);
        assert_eq!(shapes.pool2_stacked.1, 128);
        // a real forward reports the same ledger
        let x = Tensor::zeros(&[7 * f, 128]);
        let trace = model.forward(&[&x], Mode::Infer, 0).unwrap();
        assert_eq!(trace.shapes, shapes);
        assert_eq!(trace.latents.shape(), &[1, 100]);
    }
    // the default three-feature configuration matches the documented law
    let model = Dcrnn::build(ArchitectureConfig::new(3, 128, 50), 1).unwrap();
    assert_eq!(model.shapes().gru_input, (53, 128));
    println!("criterion 4 (shape law): PASS for |F| in {{1,3,5,10}}");
}

// ---------------------------------------------------------------------------
// criteria 5 and 6: synthetic benchmark
// ---------------------------------------------------------------------------

/// Generate, preprocess, encode, and split the synthetic benchmark.
fn benchmark_dataset(
    synth: &SynthConfig,
    enc: &EncodingConfig,
    split_seed: u64,
) -> (Dataset, DatasetManifest) {
    let (raw, _) = generate_dataset(synth).unwrap();
    let pp = PreprocessConfig::default();
    let kept: Vec<Trajectory> = raw.iter().filter_map(|t| preprocess(t, &pp)).collect();
    assert_eq!(kept.len(), raw.len(), "synthetic data must survive preprocessing");
    let by_driver: BTreeMap<String, Vec<String>> = {
        let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for t in &kept {
            m.entry(t.driver_id.clone())
                .or_default()
                .push(t.trajectory_id.clone());
        }
        m
    };
    let params = SamplingParams {
        n_trajectories: synth.n_trajectories,
        n_drivers: synth.n_drivers,
        seed: split_seed,
        ..SamplingParams::default()
    };
    let manifest = random_sample(&by_driver, &params).unwrap();
    let split = split_manifest(&manifest, 0.85, split_seed).unwrap();
    let mut records = Vec::new();
    for traj in &kept {
        for (i, map) in encode_trajectory(traj, enc).unwrap().into_iter().enumerate() {
            records.push(SegmentRecord {
                trajectory_id: traj.trajectory_id.clone(),
                segment_index: i as u32,
                map,
            });
        }
    }
    (assemble_dataset(&records, &split).unwrap(), split)
}

#[test]
fn criterion_5_end_to_end_synthetic_classification() {
    let started = Instant::now();
    let enc = EncodingConfig::default();

    // separation 1.0: at least 50% trajectory accuracy against 10% chance
    let synth = SynthConfig {
        n_drivers: 10,
        n_trajectories: 40,
        separation: 1.0,
        seed: 1001,
        ..SynthConfig::default()
    };
    let (dataset, _) = benchmark_dataset(&synth, &enc, 3);
    let arch = ArchitectureConfig::new(3, enc.time_len(), 10);
    let mut model = Dcrnn::build(arch, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        eval_every: 1,
        seed: 5,
        stop_at_accuracy: Some(0.55),
        ..TrainConfig::default()
    };
    let history = train(&mut model, &dataset, &cfg).unwrap();
    let last = history.last().unwrap();
    let accuracy = last.traj_accuracy.unwrap();
    println!(
        "criterion 5: separation 1.0 trajectory accuracy {accuracy:.3} after {} epochs",
        history.len()
    );
    assert!(history.len() <= 60);
    assert!(
        accuracy >= 0.5,
        "trajectory accuracy {accuracy} below 50% (chance is 10%)"
    );

    // separation 0: indistinguishable from chance within 3 sigma
    let null_synth = SynthConfig {
        separation: 0.0,
        seed: 1002,
        ..synth
    };
    let (null_dataset, null_split) = benchmark_dataset(&null_synth, &enc, 4);
    let mut null_model = Dcrnn::build(ArchitectureConfig::new(3, enc.time_len(), 10), 8).unwrap();
    let null_cfg = TrainConfig {
        epochs: 4,
        eval_every: 4,
        seed: 6,
        ..TrainConfig::default()
    };
    let null_history = train(&mut null_model, &null_dataset, &null_cfg).unwrap();
    let null_accuracy = null_history.last().unwrap().traj_accuracy.unwrap();
    let test_trajectories: usize = null_split
        .drivers()
        .iter()
        .map(|d| null_split.trajectories_of(d, Some(Split::Test)).len())
        .sum();
    let chance = 0.1;
    let sigma = (chance * (1.0 - chance) / test_trajectories as f64).sqrt();
    println!(
        "criterion 5: separation 0.0 trajectory accuracy {null_accuracy:.3} over {test_trajectories} trajectories (3 sigma = {:.3})",
        3.0 * sigma
    );
    assert!(
        (null_accuracy - chance).abs() <= 3.0 * sigma,
        "separation-0 accuracy {null_accuracy} is not within 3 sigma of chance"
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 45 * 60,
        "criterion 5 took {elapsed:?}, budget is 45 minutes"
    );
    println!("criterion 5 (end-to-end synthetic classification): PASS in {elapsed:?}");
}

#[test]
fn criterion_6_ablation_direction() {
    // same benchmark family as criterion 5 at a shorter trip length, both
    // variants trained with an identical fixed budget per seed
    let enc = EncodingConfig::default();
    let mut full_accuracies = Vec::new();
    let mut ablated_accuracies = Vec::new();
    for seed in [11u64, 12, 13] {
        let synth = SynthConfig {
            n_drivers: 10,
            n_trajectories: 40,
            separation: 1.0,
            duration_range: (900, 1020),
            seed: 2000 + seed,
            ..SynthConfig::default()
        };
        let (dataset, _) = benchmark_dataset(&synth, &enc, seed);
        for ablation in [false, true] {
            let mut arch = ArchitectureConfig::new(3, enc.time_len(), 10);
            arch.ablation_no_bn_residual = ablation;
            let mut model = Dcrnn::build(arch, derive_seed(seed, "init")).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                eval_every: 10,
                seed,
                ..TrainConfig::default()
            };
            let history = train(&mut model, &dataset, &cfg).unwrap();
            let acc = history.last().unwrap().traj_accuracy.unwrap();
            println!(
                "criterion 6: seed {seed} {} accuracy {acc:.3}",
                if ablation { "ablated" } else { "full" }
            );
            if ablation {
                ablated_accuracies.push(acc);
            } else {
                full_accuracies.push(acc);
            }
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let full = mean(&full_accuracies);
    let ablated = mean(&ablated_accuracies);
    println!("criterion 6: mean full {full:.3} vs mean ablated {ablated:.3}");
    assert!(
        full >= ablated - 0.02,
        "full model mean accuracy {full} fell more than 2 points below ablation {ablated}"
    );
    println!("criterion 6 (ablation direction): PASS");
}

// ---------------------------------------------------------------------------
// criterion 7: clustering metrics
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_clustering_metrics() {
    // AMI of identical partitions
    let mut rng = stream_rng(700, "criterion7");
    for _ in 0..5 {
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
        let value = ami(&labels, &labels).unwrap();
        assert!((value - 1.0).abs() < 1e-9, "AMI(x,x) = {value}");
    }

    // independent random labelings of 200 points stay near zero
    for round in 0..5 {
        let mut rng = stream_rng(710 + round, "criterion7-null");
        let a: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let value = ami(&a, &b).unwrap();
        assert!(value.abs() < 0.05, "null AMI {value}");
    }

    // affinity propagation recovers three well-separated blobs
    let mut rng = stream_rng(720, "criterion7-blobs");
    let mut points = Vec::new();
    let mut truth = Vec::new();
    let centers = [(0.0, 0.0), (40.0, 0.0), (0.0, 40.0)];
    let sizes = [24usize, 23, 23];
    for (b, (&(cx, cy), &count)) in centers.iter().zip(sizes.iter()).enumerate() {
        for _ in 0..count {
            points.push(vec![
                cx + rng.gen_range(-1.0..1.0),
                cy + rng.gen_range(-1.0..1.0),
            ]);
            truth.push(b);
        }
    }
    assert_eq!(points.len(), 70);
    let result = affinity_propagation(&points, &ApConfig::default()).unwrap();
    assert!(result.converged);
    assert_eq!(result.num_clusters(), 3, "expected 3 clusters");
    assert_eq!(estimation_error(result.num_clusters(), 3), 0);
    let score = ami(&result.labels, &truth).unwrap();
    assert!(score > 0.95, "blob AMI {score}");
    println!("criterion 7 (clustering metrics): PASS (blob AMI {score:.3})");
}

// ---------------------------------------------------------------------------
// criterion 8: trajectory-level aggregation
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_trajectory_aggregation() {
    // hand-computed fixture
    let mean = average_probabilities(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
    assert_eq!(mean.probabilities(), &[0.4, 0.6]);
    let mean3 = average_probabilities(&[
        vec![0.5, 0.25, 0.25],
        vec![0.25, 0.5, 0.25],
        vec![0.0, 0.75, 0.25],
    ])
    .unwrap();
    assert_eq!(mean3.probabilities(), &[0.25, 0.5, 0.25]);

    // averages of live softmax outputs stay on the simplex
    let mut cfg = ArchitectureConfig::new(1, 8, 7);
    cfg.dropout = 0.0;
    let mut model = Dcrnn::build(cfg, 99).unwrap();
    let mut rng = stream_rng(800, "criterion8");
    for _ in 0..20 {
        let n_segments = rng.gen_range(1..6);
        let mut probs = Vec::new();
        for s in 0..n_segments {
            let x = random_tensor(&[7, 8], 810 + s as u64 + rng.gen_range(0..1000), 2.0);
            let trace = model.forward(&[&x], Mode::Infer, 0).unwrap();
            let p = nn::softmax(&trace.logits).unwrap();
            probs.push(p.row(0).to_vec());
        }
        let mean = average_probabilities(&probs).unwrap();
        let sum: f64 = mean.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "simplex violated: sum {sum}");
        assert!(mean.probabilities().iter().all(|p| *p >= 0.0));
    }
    println!("criterion 8 (trajectory-level aggregation): PASS");
}

// ---------------------------------------------------------------------------
// criterion 9: determinism of the full pipeline
// ---------------------------------------------------------------------------

fn run_stage(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_driverid"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .arg("--seed")
        .arg("4242")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stage {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_pipeline(dir: &Path) {
    let p = |name: &str| dir.join(name).display().to_string();
    run_stage(
        dir,
        &[
            "synth",
            "--drivers",
            "3",
            "--trajectories",
            "8",
            "--separation",
            "1.0",
        ],
    );
    run_stage(dir, &["ingest", "--input", &p("telemetry.csv")]);
    run_stage(dir, &["preprocess", "--input", &p("trajectories.csv")]);
    run_stage(dir, &["similarity", "--input", &p("preprocessed.csv")]);
    run_stage(
        dir,
        &[
            "sample",
            "--strategy",
            "threshold",
            "--nu",
            "0.5",
            "--n-trajectories",
            "8",
            "--n-drivers",
            "3",
            "--similarity-dir",
            &dir.display().to_string(),
        ],
    );
    run_stage(
        dir,
        &[
            "encode",
            "--input",
            &p("preprocessed.csv"),
            "--manifest",
            &p("manifest.json"),
            "--l1",
            "64",
        ],
    );
    run_stage(
        dir,
        &[
            "train",
            "--features-file",
            &p("features.dpfm"),
            "--manifest",
            &p("manifest.json"),
            "--epochs",
            "2",
            "--eval-every",
            "2",
        ],
    );
    run_stage(
        dir,
        &[
            "eval",
            "--checkpoint",
            &p("checkpoint.dpnn"),
            "--features-file",
            &p("features.dpfm"),
            "--manifest",
            &p("split_manifest.json"),
        ],
    );
    run_stage(
        dir,
        &[
            "resolve",
            "--checkpoint",
            &p("checkpoint.dpnn"),
            "--features-file",
            &p("features.dpfm"),
            "--manifest",
            &p("split_manifest.json"),
            "--subsets",
            "4",
            "--drivers-per-subset",
            "3",
        ],
    );
    run_stage(
        dir,
        &[
            "export-latents",
            "--checkpoint",
            &p("checkpoint.dpnn"),
            "--features-file",
            &p("features.dpfm"),
            "--manifest",
            &p("split_manifest.json"),
        ],
    );
}

#[test]
fn criterion_9_pipeline_determinism() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    run_pipeline(&a);
    run_pipeline(&b);

    let artifacts = [
        "telemetry.csv",
        "profiles.json",
        "trajectories.csv",
        "preprocessed.csv",
        "similarity_summary.json",
        "manifest.json",
        "features.dpfm",
        "checkpoint.dpnn",
        "model.json",
        "split_manifest.json",
        "history.json",
        "eval_report.json",
        "resolution_report.json",
        "latents.csv",
        "run_config.toml",
    ];
    for name in artifacts {
        let bytes_a = std::fs::read(a.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert!(
            bytes_a == bytes_b,
            "artifact {name} differs between identical runs"
        );
    }
    // the per-driver similarity matrices as well
    for entry in std::fs::read_dir(&a).unwrap().flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("similarity_") && name.ends_with(".csv") {
            assert_eq!(
                std::fs::read(a.join(&name)).unwrap(),
                std::fs::read(b.join(&name)).unwrap(),
                "matrix {name} differs"
            );
        }
    }
    println!("criterion 9 (pipeline determinism): PASS");
}
