//! The convolutional-recurrent driver classifier.
//!
//! Wiring per sample: the aggregate feature map (7|F| rows by T columns,
//! optionally standardized per row) goes through a full-height time
//! convolution whose 16 output channels become a new feature axis, a
//! feature-axis max-pool to 9 rows, a second 3x3 convolution treated as
//! single-channel with the feature axis padded to stay at 9, a second pool
//! to 2 rows per channel, and the 16 channels stack to 32 rows. That stack,
//! concatenated with the input as a residual, feeds two stacked GRU layers
//! column by column; the final state passes through a sigmoid dense layer
//! (whose output is the latent style representation), batch normalization,
//! and a linear dense layer onto driver logits. The ablation variant drops
//! batch normalization and the residual concatenation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::AggregateFeatureMap;
use crate::error::{Error, Result};
use crate::nn::gru::{gru_backward, gru_forward, GruCache, GruGrads, GruWeights};
use crate::nn::layers::{
    batch_norm_backward, batch_norm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, maxpool_feature_backward,
    maxpool_feature_forward, relu_backward, relu_forward, softmax, softmax_cross_entropy,
    Activation, BatchNormCache, Mode,
};
use crate::nn::params::ParameterStore;
use crate::nn::tensor::Tensor;
use crate::seeding::{derive_seed, stream_rng};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;
/// Fixed work-splitting factor so gradient reduction order (and therefore
/// every trained bit) is independent of the thread count.
const BATCH_CHUNKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// |F|: number of basic features in the encoded maps.
    pub feature_count: usize,
    /// T: columns of the aggregate map (2*l1/l2).
    pub time_len: usize,
    pub num_drivers: usize,
    pub dropout: f64,
    /// Drop batch normalization and the residual connection.
    pub ablation_no_bn_residual: bool,
    pub conv1_filters: usize,
    /// Time extent of the first (full-feature-height) kernel.
    pub conv1_time_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: (usize, usize),
    pub pool_height: usize,
    pub gru_hidden: usize,
    pub fc1_units: usize,
}

impl ArchitectureConfig {
    pub fn new(feature_count: usize, time_len: usize, num_drivers: usize) -> Self {
        ArchitectureConfig {
            feature_count,
            time_len,
            num_drivers,
            dropout: 0.5,
            ablation_no_bn_residual: false,
            conv1_filters: 16,
            conv1_time_kernel: 5,
            conv2_filters: 16,
            conv2_kernel: (3, 3),
            pool_height: 8,
            gru_hidden: 100,
            fc1_units: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_count == 0 || self.time_len == 0 || self.num_drivers == 0 {
            return Err(Error::validation(
                "feature_count, time_len, and num_drivers must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if self.conv1_time_kernel % 2 == 0
            || self.conv2_kernel.0 % 2 == 0
            || self.conv2_kernel.1 % 2 == 0
        {
            return Err(Error::validation(
                "convolution kernels must be odd so zero padding preserves size",
            ));
        }
        if self.conv1_filters < self.pool_height {
            return Err(Error::validation(format!(
                "first pool needs at least {} feature rows, conv1 yields {}",
                self.pool_height, self.conv1_filters
            )));
        }
        if self.pooled1_rows() < self.pool_height {
            return Err(Error::validation(format!(
                "second pool needs at least {} feature rows, got {}",
                self.pool_height,
                self.pooled1_rows()
            )));
        }
        if self.gru_hidden == 0 || self.fc1_units == 0 {
            return Err(Error::validation("layer widths must be positive"));
        }
        Ok(())
    }

    /// 7|F|: rows of the input map.
    pub fn input_rows(&self) -> usize {
        7 * self.feature_count
    }

    /// Feature rows after the first pool.
    fn pooled1_rows(&self) -> usize {
        self.conv1_filters - self.pool_height + 1
    }

    /// Feature rows per channel after the second pool (|F'|).
    pub fn reduced_feature_rows(&self) -> usize {
        self.pooled1_rows() - self.pool_height + 1
    }

    /// Rows of the stacked convolutional output: 16|F'|.
    pub fn stacked_rows(&self) -> usize {
        self.conv2_filters * self.reduced_feature_rows()
    }

    /// Width of each GRU input column.
    pub fn gru_input_rows(&self) -> usize {
        if self.ablation_no_bn_residual {
            self.stacked_rows()
        } else {
            self.stacked_rows() + self.input_rows()
        }
    }
}

/// Shape ledger for one forward pass; every stage keeps the time axis at
/// `time_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceShapes {
    pub input: (usize, usize),
    pub conv1_out: (usize, usize),
    pub pool1_out: (usize, usize),
    pub conv2_out: (usize, usize, usize),
    pub pool2_stacked: (usize, usize),
    pub gru_input: (usize, usize),
    pub gru_out: (usize, usize),
    pub latent: usize,
    pub logits: usize,
}

impl TraceShapes {
    fn of(cfg: &ArchitectureConfig) -> Self {
        TraceShapes {
            input: (cfg.input_rows(), cfg.time_len),
            conv1_out: (cfg.conv1_filters, cfg.time_len),
            pool1_out: (cfg.pooled1_rows(), cfg.time_len),
            conv2_out: (cfg.conv2_filters, cfg.pooled1_rows(), cfg.time_len),
            pool2_stacked: (cfg.stacked_rows(), cfg.time_len),
            gru_input: (cfg.gru_input_rows(), cfg.time_len),
            gru_out: (cfg.time_len, cfg.gru_hidden),
            latent: cfg.fc1_units,
            logits: cfg.num_drivers,
        }
    }
}

struct SampleCache {
    x_std: Tensor,
    conv1_pre: Tensor,
    pool1_arg: Vec<u32>,
    drop1_mask: Option<Vec<bool>>,
    pool1_dropped: Tensor,
    conv2_pre: Tensor,
    pool2_args: Vec<Vec<u32>>,
    drop2_mask: Option<Vec<bool>>,
    gru1_cache: GruCache,
    drop3_mask: Option<Vec<bool>>,
    gru2_cache: GruCache,
    drop4_mask: Option<Vec<bool>>,
}

/// Result of one forward pass. `latents` holds the sigmoid dense outputs
/// before batch normalization: the per-segment style representations.
pub struct ForwardTrace {
    pub logits: Tensor,
    pub latents: Tensor,
    pub shapes: TraceShapes,
    mode: Mode,
    override_p: Option<f64>,
    samples: Vec<SampleCache>,
    fc1_in: Tensor,
    bn_cache: Option<BatchNormCache>,
    drop5_mask: Option<Vec<bool>>,
    fc2_in: Tensor,
}

struct ChunkGrads {
    conv1: Tensor,
    conv2: Tensor,
    gru1: GruGrads,
    gru2: GruGrads,
}

pub struct Dcrnn {
    cfg: ArchitectureConfig,
    pub store: ParameterStore,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape/volume agree")
}

impl Dcrnn {
    /// Initialize parameters and buffers. He-uniform for the ReLU-adjacent
    /// convolutions, uniform +-1/sqrt(H) for GRU weights, +-1/sqrt(fan_in)
    /// for the dense layers, zero biases. Shape errors surface here, never
    /// during forward.
    pub fn build(cfg: ArchitectureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let r = cfg.input_rows();
        let h = cfg.gru_hidden;

        store.insert_buffer("input_norm.mean", Tensor::zeros(&[r]));
        store.insert_buffer("input_norm.std", Tensor::filled(&[r], 1.0));

        let mut rng = stream_rng(seed, "init.conv1");
        let fan_in = (r * cfg.conv1_time_kernel) as f64;
        store.insert(
            "conv1.kernels",
            uniform_tensor(
                &mut rng,
                &[cfg.conv1_filters, 1, r, cfg.conv1_time_kernel],
                (6.0 / fan_in).sqrt(),
            ),
        );
        let mut rng = stream_rng(seed, "init.conv2");
        let (kh, kw) = cfg.conv2_kernel;
        let fan_in = (kh * kw) as f64;
        store.insert(
            "conv2.kernels",
            uniform_tensor(
                &mut rng,
                &[cfg.conv2_filters, 1, kh, kw],
                (6.0 / fan_in).sqrt(),
            ),
        );

        let gru_limit = 1.0 / (h as f64).sqrt();
        for (layer, d_in) in [(1usize, cfg.gru_input_rows()), (2, h)] {
            for gate in ["wz", "wr", "wh"] {
                let mut rng = stream_rng(seed, &format!("init.gru{layer}.{gate}"));
                store.insert(
                    &format!("gru{layer}.{gate}"),
                    uniform_tensor(&mut rng, &[h, d_in], gru_limit),
                );
            }
            for gate in ["uz", "ur", "uh"] {
                let mut rng = stream_rng(seed, &format!("init.gru{layer}.{gate}"));
                store.insert(
                    &format!("gru{layer}.{gate}"),
                    uniform_tensor(&mut rng, &[h, h], gru_limit),
                );
            }
            for gate in ["bz", "br", "bh"] {
                store.insert(&format!("gru{layer}.{gate}"), Tensor::zeros(&[h]));
            }
        }

        let mut rng = stream_rng(seed, "init.fc1");
        store.insert(
            "fc1.weight",
            uniform_tensor(&mut rng, &[cfg.fc1_units, h], 1.0 / (h as f64).sqrt()),
        );
        store.insert("fc1.bias", Tensor::zeros(&[cfg.fc1_units]));

        if !cfg.ablation_no_bn_residual {
            store.insert("bn1.gamma", Tensor::filled(&[cfg.fc1_units], 1.0));
            store.insert("bn1.beta", Tensor::zeros(&[cfg.fc1_units]));
            // zero-initialized accumulators debiased by the update count at
            // inference, so short trainings still normalize correctly
            store.insert_buffer("bn1.running_mean", Tensor::zeros(&[cfg.fc1_units]));
            store.insert_buffer("bn1.running_var", Tensor::zeros(&[cfg.fc1_units]));
            store.insert_buffer("bn1.steps", Tensor::zeros(&[1]));
        }

        let mut rng = stream_rng(seed, "init.fc2");
        store.insert(
            "fc2.weight",
            uniform_tensor(
                &mut rng,
                &[cfg.num_drivers, cfg.fc1_units],
                1.0 / (cfg.fc1_units as f64).sqrt(),
            ),
        );
        store.insert("fc2.bias", Tensor::zeros(&[cfg.num_drivers]));

        Ok(Dcrnn { cfg, store })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.cfg
    }

    pub fn shapes(&self) -> TraceShapes {
        TraceShapes::of(&self.cfg)
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    /// Set the per-row input standardization applied before the first
    /// convolution (and to the residual copy). Defaults to identity.
    pub fn set_input_norm(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let r = self.cfg.input_rows();
        if mean.len() != r || std.len() != r {
            return Err(Error::shape(format!(
                "input norm needs {r} rows, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::validation("input norm std must be positive"));
        }
        self.store
            .get_mut("input_norm.mean")
            .value
            .data_mut()
            .copy_from_slice(mean);
        self.store
            .get_mut("input_norm.std")
            .value
            .data_mut()
            .copy_from_slice(std);
        Ok(())
    }

    /// Copy an aggregate map into the model input layout.
    pub fn map_to_tensor(&self, map: &AggregateFeatureMap) -> Result<Tensor> {
        if map.rows != self.cfg.input_rows() || map.cols != self.cfg.time_len {
            return Err(Error::shape(format!(
                "map is {}x{}, model expects {}x{}",
                map.rows,
                map.cols,
                self.cfg.input_rows(),
                self.cfg.time_len
            )));
        }
        Tensor::from_vec(&[map.rows, map.cols], map.data.clone())
    }

    /// Forward a batch of R x T inputs. Dropout masks derive from `seed`;
    /// infer mode disables dropout and uses running batch-norm statistics.
    pub fn forward(&mut self, inputs: &[&Tensor], mode: Mode, seed: u64) -> Result<ForwardTrace> {
        self.forward_internal(inputs, mode, seed, None, true)
    }

    fn forward_internal(
        &mut self,
        inputs: &[&Tensor],
        mode: Mode,
        seed: u64,
        dropout_override: Option<f64>,
        update_running: bool,
    ) -> Result<ForwardTrace> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::validation("empty batch"));
        }
        let shapes = TraceShapes::of(&self.cfg);
        for (i, x) in inputs.iter().enumerate() {
            if x.shape() != [shapes.input.0, shapes.input.1] {
                return Err(Error::shape(format!(
                    "batch element {i} has shape {:?}, expected {:?}",
                    x.shape(),
                    [shapes.input.0, shapes.input.1]
                )));
            }
        }
        let p = dropout_override.unwrap_or(self.cfg.dropout);

        let (samples, fc1_in) = {
            let this: &Dcrnn = &*self;
            let chunk_size = n.div_ceil(BATCH_CHUNKS);
            let indexed: Vec<(usize, &Tensor)> = inputs.iter().copied().enumerate().collect();
            let chunk_results: Vec<Result<Vec<(SampleCache, Vec<f64>)>>> = indexed
                .par_chunks(chunk_size)
                .map(|chunk| {
                    chunk
                        .iter()
                        .map(|(i, x)| this.forward_sample(x, mode, p, seed, *i))
                        .collect()
                })
                .collect();
            let mut samples = Vec::with_capacity(n);
            let mut fc1_in = Tensor::zeros(&[n, this.cfg.gru_hidden]);
            let mut row = 0usize;
            for chunk in chunk_results {
                for (cache, h_last) in chunk? {
                    fc1_in.row_mut(row).copy_from_slice(&h_last);
                    samples.push(cache);
                    row += 1;
                }
            }
            (samples, fc1_in)
        };

        let fc1_out = dense_forward(
            &fc1_in,
            self.store.value("fc1.weight"),
            self.store.value("fc1.bias"),
            Activation::Sigmoid,
        )?;
        let latents = fc1_out.clone();

        let (bn_out, bn_cache) = if self.cfg.ablation_no_bn_residual {
            (fc1_out, None)
        } else {
            let gamma = self.store.value("bn1.gamma").clone();
            let beta = self.store.value("bn1.beta").clone();
            let steps = self.store.value("bn1.steps").data()[0];
            let (mut rm, mut rv) = match mode {
                Mode::Train => (
                    self.store.value("bn1.running_mean").clone(),
                    self.store.value("bn1.running_var").clone(),
                ),
                Mode::Infer => {
                    // debias the accumulators; an untrained net falls back
                    // to the identity normalization
                    if steps > 0.0 {
                        let correction = 1.0 / (1.0 - BN_MOMENTUM.powf(steps));
                        let mut rm = self.store.value("bn1.running_mean").clone();
                        let mut rv = self.store.value("bn1.running_var").clone();
                        rm.data_mut().iter_mut().for_each(|v| *v *= correction);
                        rv.data_mut().iter_mut().for_each(|v| *v *= correction);
                        (rm, rv)
                    } else {
                        (
                            Tensor::zeros(&[self.cfg.fc1_units]),
                            Tensor::filled(&[self.cfg.fc1_units], 1.0),
                        )
                    }
                }
            };
            let (out, cache) = batch_norm_forward(
                &fc1_out,
                &gamma,
                &beta,
                &mut rm,
                &mut rv,
                mode,
                BN_MOMENTUM,
                BN_EPS,
                update_running,
            )?;
            if update_running && mode == Mode::Train {
                self.store.get_mut("bn1.running_mean").value = rm;
                self.store.get_mut("bn1.running_var").value = rv;
                self.store.get_mut("bn1.steps").value.data_mut()[0] = steps + 1.0;
            }
            (out, cache)
        };

        let (fc2_in, drop5_mask) = dropout_forward(&bn_out, p, mode, derive_seed(seed, "drop5"))?;
        let logits = dense_forward(
            &fc2_in,
            self.store.value("fc2.weight"),
            self.store.value("fc2.bias"),
            Activation::None,
        )?;

        Ok(ForwardTrace {
            logits,
            latents,
            shapes,
            mode,
            override_p: dropout_override,
            samples: if mode == Mode::Train { samples } else { Vec::new() },
            fc1_in,
            bn_cache,
            drop5_mask,
            fc2_in,
        })
    }

    /// Per-sample stages: convolutions, pools, and both GRU layers.
    /// Returns the cache and the (dropout-applied) final GRU state.
    fn forward_sample(
        &self,
        x: &Tensor,
        mode: Mode,
        p: f64,
        seed: u64,
        sample_index: usize,
    ) -> Result<(SampleCache, Vec<f64>)> {
        let cfg = &self.cfg;
        let store = &self.store;
        let r = cfg.input_rows();
        let t = cfg.time_len;

        // standardize per row
        let mean = store.value("input_norm.mean").data();
        let std = store.value("input_norm.std").data();
        let mut x_std = x.clone();
        for row in 0..r {
            let m = mean[row];
            let s = std[row];
            for v in x_std.row_mut(row) {
                *v = (*v - m) / s;
            }
        }

        // conv1: full-height kernel over time, channels become features
        let x3 = x_std.clone().reshaped(&[1, r, t])?;
        let conv1_pre = conv2d_forward(
            &x3,
            store.value("conv1.kernels"),
            (0, (cfg.conv1_time_kernel - 1) / 2),
        )?;
        let conv1_relu = relu_forward(&conv1_pre);
        let pool1_in = conv1_relu.reshaped(&[cfg.conv1_filters, t])?;
        let (pool1_out, pool1_arg) = maxpool_feature_forward(&pool1_in, cfg.pool_height)?;
        let (pool1_dropped, drop1_mask) = dropout_forward(
            &pool1_out,
            p,
            mode,
            derive_seed(seed, &format!("drop1.{sample_index}")),
        )?;

        // conv2 over the pooled map as a single channel, feature axis padded
        let p1rows = cfg.conv1_filters - cfg.pool_height + 1;
        let conv2_in = pool1_dropped.clone().reshaped(&[1, p1rows, t])?;
        let (kh, kw) = cfg.conv2_kernel;
        let conv2_pre = conv2d_forward(
            &conv2_in,
            store.value("conv2.kernels"),
            ((kh - 1) / 2, (kw - 1) / 2),
        )?;
        let pool2_relu = relu_forward(&conv2_pre);

        // per-channel pool, channels stacked onto the feature axis
        let reduced = cfg.reduced_feature_rows();
        let mut stacked = Tensor::zeros(&[cfg.stacked_rows(), t]);
        let mut pool2_args = Vec::with_capacity(cfg.conv2_filters);
        for ch in 0..cfg.conv2_filters {
            let channel = Tensor::from_vec(
                &[p1rows, t],
                pool2_relu.data()[ch * p1rows * t..(ch + 1) * p1rows * t].to_vec(),
            )?;
            let (pooled, args) = maxpool_feature_forward(&channel, cfg.pool_height)?;
            for rr in 0..reduced {
                stacked
                    .row_mut(ch * reduced + rr)
                    .copy_from_slice(pooled.row(rr));
            }
            pool2_args.push(args);
        }
        let (stacked_dropped, drop2_mask) = dropout_forward(
            &stacked,
            p,
            mode,
            derive_seed(seed, &format!("drop2.{sample_index}")),
        )?;

        // residual concat, then transpose to time-major for the GRU
        let d1 = cfg.gru_input_rows();
        let mut gru_in = Tensor::zeros(&[t, d1]);
        for tt in 0..t {
            let row = gru_in.row_mut(tt);
            for (rr, slot) in row.iter_mut().take(cfg.stacked_rows()).enumerate() {
                *slot = stacked_dropped.at2(rr, tt);
            }
            if !cfg.ablation_no_bn_residual {
                for rr in 0..r {
                    row[cfg.stacked_rows() + rr] = x_std.at2(rr, tt);
                }
            }
        }

        let (gru1_out, gru1_cache) = gru_forward(&gru_weights(store, "gru1"), &gru_in)?;
        let (gru1_dropped, drop3_mask) = dropout_forward(
            &gru1_out,
            p,
            mode,
            derive_seed(seed, &format!("drop3.{sample_index}")),
        )?;
        let (gru2_out, gru2_cache) = gru_forward(&gru_weights(store, "gru2"), &gru1_dropped)?;

        // only the final state feeds the dense head; dropout applies to it
        let h_last = Tensor::from_vec(&[cfg.gru_hidden], gru2_out.row(t - 1).to_vec())?;
        let (h_dropped, drop4_mask) = dropout_forward(
            &h_last,
            p,
            mode,
            derive_seed(seed, &format!("drop4.{sample_index}")),
        )?;

        Ok((
            SampleCache {
                x_std,
                conv1_pre,
                pool1_arg,
                drop1_mask,
                pool1_dropped,
                conv2_pre,
                pool2_args,
                drop2_mask,
                gru1_cache,
                drop3_mask,
                gru2_cache,
                drop4_mask,
            },
            h_dropped.data().to_vec(),
        ))
    }

    /// Backpropagate the cross-entropy loss for a train-mode trace, filling
    /// every parameter gradient. Returns the loss.
    pub fn backward(&mut self, trace: ForwardTrace, labels: &[usize]) -> Result<f64> {
        if trace.mode != Mode::Train {
            return Err(Error::validation(
                "backward requires a train-mode forward trace",
            ));
        }
        let cfg = self.cfg.clone();
        let n = trace.logits.shape()[0];
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let p = trace.override_p.unwrap_or(cfg.dropout);
        self.store.zero_grads();

        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels)?;

        // fc2
        let (d_fc2_in, gw2, gb2) = dense_backward(
            &trace.fc2_in,
            self.store.value("fc2.weight"),
            &trace.logits,
            Activation::None,
            &dlogits,
        )?;
        self.store.accumulate_grad("fc2.weight", &gw2);
        self.store.accumulate_grad("fc2.bias", &gb2);

        let d_bn_out = match &trace.drop5_mask {
            Some(mask) => dropout_backward(mask, p, &d_fc2_in),
            None => d_fc2_in,
        };

        let d_fc1_out = if let Some(bn_cache) = &trace.bn_cache {
            let (dx, dgamma, dbeta) =
                batch_norm_backward(bn_cache, self.store.value("bn1.gamma"), &d_bn_out)?;
            self.store.accumulate_grad("bn1.gamma", &dgamma);
            self.store.accumulate_grad("bn1.beta", &dbeta);
            dx
        } else {
            d_bn_out
        };

        // fc1 (sigmoid); its forward output is the latent matrix
        let (d_fc1_in, gw1, gb1) = dense_backward(
            &trace.fc1_in,
            self.store.value("fc1.weight"),
            &trace.latents,
            Activation::Sigmoid,
            &d_fc1_out,
        )?;
        self.store.accumulate_grad("fc1.weight", &gw1);
        self.store.accumulate_grad("fc1.bias", &gb1);

        // per-sample backward through the recurrent and convolutional stages
        let chunk_grads: Vec<Result<ChunkGrads>> = {
            let store = &self.store;
            let sample_refs: Vec<(usize, &SampleCache)> =
                trace.samples.iter().enumerate().collect();
            let chunk_size = n.div_ceil(BATCH_CHUNKS);
            sample_refs
                .par_chunks(chunk_size)
                .map(|chunk| {
                    let mut acc = ChunkGrads::zeros(&cfg);
                    for (i, cache) in chunk {
                        backward_sample(&cfg, store, cache, d_fc1_in.row(*i), p, &mut acc)?;
                    }
                    Ok(acc)
                })
                .collect()
        };
        for acc in chunk_grads {
            let acc = acc?;
            self.store.accumulate_grad("conv1.kernels", &acc.conv1);
            self.store.accumulate_grad("conv2.kernels", &acc.conv2);
            accumulate_gru(&mut self.store, "gru1", &acc.gru1);
            accumulate_gru(&mut self.store, "gru2", &acc.gru2);
        }
        Ok(loss)
    }

    /// Train-mode loss with dropout disabled and running statistics frozen:
    /// the pure closure the gradient checker needs.
    pub fn loss_for_gradient_check(&mut self, inputs: &[&Tensor], labels: &[usize]) -> Result<f64> {
        let trace = self.forward_internal(inputs, Mode::Train, 0, Some(0.0), false)?;
        let (loss, _) = softmax_cross_entropy(&trace.logits, labels)?;
        Ok(loss)
    }

    /// Analytic gradients under the same regime as
    /// [`Self::loss_for_gradient_check`].
    pub fn backward_for_gradient_check(
        &mut self,
        inputs: &[&Tensor],
        labels: &[usize],
    ) -> Result<f64> {
        let trace = self.forward_internal(inputs, Mode::Train, 0, Some(0.0), false)?;
        self.backward(trace, labels)
    }

    /// Infer-mode forward for one segment, returning (softmax probs, latent).
    pub fn predict_map(&mut self, map: &AggregateFeatureMap) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.map_to_tensor(map)?;
        let trace = self.forward(&[&x], Mode::Infer, 0)?;
        let probs = softmax(&trace.logits)?;
        Ok((probs.row(0).to_vec(), trace.latents.row(0).to_vec()))
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        crate::nn::params::save_checkpoint(w, &self.store)
    }

    /// Load parameter values into a freshly built architecture, verifying
    /// that names and shapes line up exactly.
    pub fn load<R: std::io::Read>(cfg: ArchitectureConfig, r: R) -> Result<Self> {
        let loaded = crate::nn::params::load_checkpoint(r)?;
        let mut model = Dcrnn::build(cfg, 0)?;
        let expect: Vec<String> = model.store.names().map(String::from).collect();
        let got: Vec<String> = loaded.names().map(String::from).collect();
        if expect != got {
            return Err(Error::validation(format!(
                "checkpoint parameters {got:?} do not match architecture {expect:?}"
            )));
        }
        for name in expect {
            let src = loaded.value(&name);
            let dst = &mut model.store.get_mut(&name).value;
            if src.shape() != dst.shape() {
                return Err(Error::shape(format!(
                    "checkpoint {name} has shape {:?}, architecture wants {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}

fn gru_weights<'a>(store: &'a ParameterStore, prefix: &str) -> GruWeights<'a> {
    GruWeights {
        wz: store.value(&format!("{prefix}.wz")),
        uz: store.value(&format!("{prefix}.uz")),
        bz: store.value(&format!("{prefix}.bz")),
        wr: store.value(&format!("{prefix}.wr")),
        ur: store.value(&format!("{prefix}.ur")),
        br: store.value(&format!("{prefix}.br")),
        wh: store.value(&format!("{prefix}.wh")),
        uh: store.value(&format!("{prefix}.uh")),
        bh: store.value(&format!("{prefix}.bh")),
    }
}

fn accumulate_gru(store: &mut ParameterStore, prefix: &str, grads: &GruGrads) {
    store.accumulate_grad(&format!("{prefix}.wz"), &grads.wz);
    store.accumulate_grad(&format!("{prefix}.uz"), &grads.uz);
    store.accumulate_grad(&format!("{prefix}.bz"), &grads.bz);
    store.accumulate_grad(&format!("{prefix}.wr"), &grads.wr);
    store.accumulate_grad(&format!("{prefix}.ur"), &grads.ur);
    store.accumulate_grad(&format!("{prefix}.br"), &grads.br);
    store.accumulate_grad(&format!("{prefix}.wh"), &grads.wh);
    store.accumulate_grad(&format!("{prefix}.uh"), &grads.uh);
    store.accumulate_grad(&format!("{prefix}.bh"), &grads.bh);
}

impl ChunkGrads {
    fn zeros(cfg: &ArchitectureConfig) -> Self {
        let h = cfg.gru_hidden;
        let zero_gru = |d: usize| GruGrads {
            wz: Tensor::zeros(&[h, d]),
            uz: Tensor::zeros(&[h, h]),
            bz: Tensor::zeros(&[h]),
            wr: Tensor::zeros(&[h, d]),
            ur: Tensor::zeros(&[h, h]),
            br: Tensor::zeros(&[h]),
            wh: Tensor::zeros(&[h, d]),
            uh: Tensor::zeros(&[h, h]),
            bh: Tensor::zeros(&[h]),
        };
        ChunkGrads {
            conv1: Tensor::zeros(&[
                cfg.conv1_filters,
                1,
                cfg.input_rows(),
                cfg.conv1_time_kernel,
            ]),
            conv2: Tensor::zeros(&[cfg.conv2_filters, 1, cfg.conv2_kernel.0, cfg.conv2_kernel.1]),
            gru1: zero_gru(cfg.gru_input_rows()),
            gru2: zero_gru(h),
        }
    }

    fn add_gru(dst: &mut GruGrads, src: &GruGrads) {
        dst.wz.add_assign(&src.wz);
        dst.uz.add_assign(&src.uz);
        dst.bz.add_assign(&src.bz);
        dst.wr.add_assign(&src.wr);
        dst.ur.add_assign(&src.ur);
        dst.br.add_assign(&src.br);
        dst.wh.add_assign(&src.wh);
        dst.uh.add_assign(&src.uh);
        dst.bh.add_assign(&src.bh);
    }
}

/// Backward through the per-sample stages. `d_h` is the gradient arriving
/// at the dropout-applied final GRU state.
fn backward_sample(
    cfg: &ArchitectureConfig,
    store: &ParameterStore,
    cache: &SampleCache,
    d_h: &[f64],
    p: f64,
    acc: &mut ChunkGrads,
) -> Result<()> {
    let t = cfg.time_len;
    let h = cfg.gru_hidden;

    let d_h_tensor = Tensor::from_vec(&[h], d_h.to_vec())?;
    let d_h_last = match &cache.drop4_mask {
        Some(mask) => dropout_backward(mask, p, &d_h_tensor),
        None => d_h_tensor,
    };

    // only the last timestep of gru2 receives gradient
    let mut d_gru2_out = Tensor::zeros(&[t, h]);
    d_gru2_out.row_mut(t - 1).copy_from_slice(d_h_last.data());
    let (g2, d_gru1_dropped) =
        gru_backward(&gru_weights(store, "gru2"), &cache.gru2_cache, &d_gru2_out)?;
    ChunkGrads::add_gru(&mut acc.gru2, &g2);

    let d_gru1_out = match &cache.drop3_mask {
        Some(mask) => dropout_backward(mask, p, &d_gru1_dropped),
        None => d_gru1_dropped,
    };
    let (g1, d_gru_in) =
        gru_backward(&gru_weights(store, "gru1"), &cache.gru1_cache, &d_gru1_out)?;
    ChunkGrads::add_gru(&mut acc.gru1, &g1);

    // un-transpose the convolutional rows; residual rows feed no parameters
    let stacked_rows = cfg.stacked_rows();
    let mut d_stacked = Tensor::zeros(&[stacked_rows, t]);
    for tt in 0..t {
        let row = d_gru_in.row(tt);
        for rr in 0..stacked_rows {
            d_stacked.set2(rr, tt, row[rr]);
        }
    }
    let d_stacked = match &cache.drop2_mask {
        Some(mask) => dropout_backward(mask, p, &d_stacked),
        None => d_stacked,
    };

    // per-channel pool2 backward into the conv2 activation
    let p1rows = cfg.conv1_filters - cfg.pool_height + 1;
    let reduced = cfg.reduced_feature_rows();
    let mut d_pool2_relu = Tensor::zeros(&[cfg.conv2_filters, p1rows, t]);
    for ch in 0..cfg.conv2_filters {
        let mut d_pooled = Tensor::zeros(&[reduced, t]);
        for rr in 0..reduced {
            d_pooled
                .row_mut(rr)
                .copy_from_slice(d_stacked.row(ch * reduced + rr));
        }
        let d_channel = maxpool_feature_backward(
            (p1rows, t),
            cfg.pool_height,
            &cache.pool2_args[ch],
            &d_pooled,
        )?;
        d_pool2_relu.data_mut()[ch * p1rows * t..(ch + 1) * p1rows * t]
            .copy_from_slice(d_channel.data());
    }
    let d_conv2_pre = relu_backward(&cache.conv2_pre, &d_pool2_relu);
    let conv2_in = cache.pool1_dropped.clone().reshaped(&[1, p1rows, t])?;
    let (kh, kw) = cfg.conv2_kernel;
    let (d_conv2_in, dk2) = conv2d_backward(
        &conv2_in,
        store.value("conv2.kernels"),
        ((kh - 1) / 2, (kw - 1) / 2),
        &d_conv2_pre,
    )?;
    acc.conv2.add_assign(&dk2);

    let d_pool1_dropped = d_conv2_in.reshaped(&[p1rows, t])?;
    let d_pool1_out = match &cache.drop1_mask {
        Some(mask) => dropout_backward(mask, p, &d_pool1_dropped),
        None => d_pool1_dropped,
    };
    let d_pool1_in = maxpool_feature_backward(
        (cfg.conv1_filters, t),
        cfg.pool_height,
        &cache.pool1_arg,
        &d_pool1_out,
    )?;
    let d_conv1_relu = d_pool1_in.reshaped(&[cfg.conv1_filters, 1, t])?;
    let d_conv1_pre = relu_backward(&cache.conv1_pre, &d_conv1_relu);
    let x3 = cache.x_std.clone().reshaped(&[1, cfg.input_rows(), t])?;
    let (_, dk1) = conv2d_backward(
        &x3,
        store.value("conv1.kernels"),
        (0, (cfg.conv1_time_kernel - 1) / 2),
        &d_conv1_pre,
    )?;
    acc.conv1.add_assign(&dk1);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(num_drivers: usize) -> ArchitectureConfig {
        let mut cfg = ArchitectureConfig::new(1, 8, num_drivers);
        cfg.dropout = 0.0;
        cfg
    }

    fn random_input(cfg: &ArchitectureConfig, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, "dcrnn-test-input");
        let len = cfg.input_rows() * cfg.time_len;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[cfg.input_rows(), cfg.time_len], data).unwrap()
    }

    #[test]
    fn default_shapes_for_three_features() {
        let cfg = ArchitectureConfig::new(3, 128, 50);
        let model = Dcrnn::build(cfg, 1).unwrap();
        let s = model.shapes();
        assert_eq!(s.input, (21, 128));
        assert_eq!(s.conv1_out, (16, 128));
        assert_eq!(s.pool1_out, (9, 128));
        assert_eq!(s.conv2_out, (16, 9, 128));
        assert_eq!(s.pool2_stacked, (32, 128));
        assert_eq!(s.gru_input, (53, 128));
        assert_eq!(s.gru_out, (128, 100));
        assert_eq!(s.latent, 100);
        assert_eq!(s.logits, 50);
        assert_eq!(model.config().reduced_feature_rows(), 2);
    }

    #[test]
    fn builds_for_various_feature_counts() {
        for f in [1usize, 3, 5, 10] {
            let cfg = ArchitectureConfig::new(f, 128, 10);
            let model = Dcrnn::build(cfg, 1).unwrap();
            let s = model.shapes();
            assert_eq!(s.input, (7 * f, 128));
            assert_eq!(s.gru_input, (32 + 7 * f, 128));
            // time axis preserved through the conv stack
            assert_eq!(s.conv1_out.1, 128);
            assert_eq!(s.pool2_stacked.1, 128);
        }
    }

    #[test]
    fn ablation_drops_residual_and_batch_norm() {
        let mut cfg = ArchitectureConfig::new(3, 128, 10);
        cfg.ablation_no_bn_residual = true;
        let ablated = Dcrnn::build(cfg.clone(), 1).unwrap();
        assert_eq!(ablated.shapes().gru_input, (32, 128));
        assert!(!ablated.store.contains("bn1.gamma"));
        let full = Dcrnn::build(ArchitectureConfig::new(3, 128, 10), 1).unwrap();
        assert!(ablated.num_trainable() < full.num_trainable());
    }

    #[test]
    fn zero_input_gives_finite_near_uniform_softmax() {
        let cfg = ArchitectureConfig::new(1, 8, 4);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        let x = Tensor::zeros(&[cfg.input_rows(), cfg.time_len]);
        let trace = model.forward(&[&x], Mode::Infer, 0).unwrap();
        trace.logits.assert_finite("logits").unwrap();
        let probs = softmax(&trace.logits).unwrap();
        for &p in probs.row(0) {
            assert!(p > 0.05 && p < 0.6, "prob {p} far from uniform");
        }
    }

    #[test]
    fn infer_forward_is_bitwise_deterministic() {
        let cfg = tiny_cfg(3);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        let x = random_input(&cfg, 1);
        let a = model.forward(&[&x], Mode::Infer, 0).unwrap();
        let b = model.forward(&[&x], Mode::Infer, 99).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.latents.data(), b.latents.data());
    }

    #[test]
    fn backward_rejects_infer_trace() {
        let cfg = tiny_cfg(3);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        let x = random_input(&cfg, 1);
        let trace = model.forward(&[&x], Mode::Infer, 0).unwrap();
        assert!(model.backward(trace, &[0]).is_err());
    }

    #[test]
    fn uniform_prediction_bias_gradient() {
        // zero the output layer so logits are uniform; batch of two samples
        // both labeled 0 gives per-sample dlogits (+-0.25) and bias gradient
        // (-0.5, +0.5)
        let cfg = tiny_cfg(2);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        model.store.get_mut("fc2.weight").value.fill(0.0);
        model.store.get_mut("fc2.bias").value.fill(0.0);
        let x1 = random_input(&cfg, 1);
        let x2 = random_input(&cfg, 2);
        let trace = model.forward(&[&x1, &x2], Mode::Train, 0).unwrap();
        let loss = model.backward(trace, &[0, 0]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        let gb = model.store.get("fc2.bias").grad.data();
        assert!((gb[0] - -0.5).abs() < 1e-12, "bias grad {gb:?}");
        assert!((gb[1] - 0.5).abs() < 1e-12, "bias grad {gb:?}");
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_gradients() {
        let cfg = tiny_cfg(3);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        model.store.get_mut("fc2.weight").value.fill(0.0);
        let bias = model.store.get_mut("fc2.bias").value.data_mut();
        bias[1] = 60.0; // every sample is confidently class 1
        let x1 = random_input(&cfg, 1);
        let x2 = random_input(&cfg, 2);
        let trace = model.forward(&[&x1, &x2], Mode::Train, 0).unwrap();
        let loss = model.backward(trace, &[1, 1]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        for (name, param) in model.store.iter() {
            if !param.trainable {
                continue;
            }
            let max = param.grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
            assert!(max < 1e-10, "{name} gradient {max}");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_inference() {
        let cfg = tiny_cfg(3);
        let mut model = Dcrnn::build(cfg.clone(), 7).unwrap();
        model
            .set_input_norm(&vec![0.5; 7], &vec![2.0; 7])
            .unwrap();
        let x = random_input(&cfg, 1);
        let before = model.forward(&[&x], Mode::Infer, 0).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let mut loaded = Dcrnn::load(cfg, buf.as_slice()).unwrap();
        let after = loaded.forward(&[&x], Mode::Infer, 0).unwrap();
        assert_eq!(before.logits.data(), after.logits.data());
    }

    #[test]
    fn load_rejects_wrong_architecture() {
        let mut buf = Vec::new();
        Dcrnn::build(tiny_cfg(3), 7).unwrap().save(&mut buf).unwrap();
        // different driver count changes fc2 shapes
        assert!(Dcrnn::load(tiny_cfg(4), buf.as_slice()).is_err());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg(2);
        let mut model = Dcrnn::build(cfg.clone(), 3).unwrap();
        let x1 = random_input(&cfg, 1);
        let x2 = random_input(&cfg, 2);
        // unbalanced labels: a class-balanced batch at near-uniform
        // initialization makes the head gradients cancel to ~1e-6, where
        // finite differences are pure noise
        let labels = [0usize, 0];
        model.backward_for_gradient_check(&[&x1, &x2], &labels).unwrap();

        let inputs: Vec<Tensor> = vec![x1.clone(), x2.clone()];
        let mut store = std::mem::take(&mut model.store);
        let report = crate::nn::gradcheck::gradient_check_with(
            &mut store,
            |s| {
                let mut probe = Dcrnn {
                    cfg: cfg.clone(),
                    store: s.clone(),
                };
                let refs: Vec<&Tensor> = inputs.iter().collect();
                probe.loss_for_gradient_check(&refs, &labels)
            },
            1e-5,
            6,
            11,
            crate::nn::gradcheck::CoordSelection::LargestAnalytic,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
