//! The four-stage classifier: filter bank -> depthwise spatial
//! convolution block -> temporal layer -> log + fully connected head.
//!
//! # Checkpoint format
//!
//! Binary, little-endian: 4-byte magic `FBCN`, `u32` format version (1),
//! a fixed-layout config block, then the parameter buffers as f64 in
//! declaration order: conv weights, conv bias, bn gamma, bn beta, bn
//! running mean, bn running variance, fc weights, fc bias.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EegTrial;
use crate::dsp::{FilterBank, FilterMode};
use crate::error::{Error, Result};
use crate::layers::{
    activation, batchnorm, depthwise_conv_forward, linear_forward, log_activation, softmax_rows,
    temporal_layer, Activation, BatchNorm, DepthwiseConv, Mode, TemporalKind,
};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const CONV_MAX_NORM: f64 = 2.0;
pub const FC_MAX_NORM: f64 = 0.5;

/// Hyperparameters and geometry of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// EEG channels (C).
    pub channels: usize,
    /// Samples per trial (T).
    pub samples: usize,
    pub sample_rate_hz: f64,
    /// Passband edges of the filter bank (N_b = bands.len()).
    pub bands: Vec<(f64, f64)>,
    pub transition_hz: f64,
    pub stop_atten_db: f64,
    /// Passband deviation bound used for filter order selection.
    pub passband_ripple_db: f64,
    /// Spatial filters per band (m).
    pub spatial_filters_per_band: usize,
    /// Variance window length in seconds (w).
    pub window_seconds: f64,
    /// Output classes (N_c).
    pub classes: usize,
    pub activation: Activation,
    pub temporal: TemporalKind,
    pub filter_mode: FilterMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults (nine 4 Hz bands 4-40, m = 32, 1 s windows, Swish,
    /// variance pooling, zero-phase filtering) for a dataset geometry.
    pub fn for_dataset(
        channels: usize,
        samples: usize,
        sample_rate_hz: f64,
        classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            channels,
            samples,
            sample_rate_hz,
            bands: crate::dsp::default_band_edges(),
            transition_hz: 2.0,
            stop_atten_db: 30.0,
            passband_ripple_db: 3.0,
            spatial_filters_per_band: 32,
            window_seconds: 1.0,
            classes,
            activation: Activation::Swish,
            temporal: TemporalKind::Variance,
            filter_mode: FilterMode::ZeroPhase,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    /// m * N_b feature maps after the spatial block.
    pub fn n_features(&self) -> usize {
        self.spatial_filters_per_band * self.n_bands()
    }

    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate_hz).round() as usize
    }

    pub fn n_windows(&self) -> usize {
        self.samples / self.window_samples()
    }

    /// Flattened feature length feeding the FC layer.
    pub fn fc_inputs(&self) -> usize {
        self.n_features() * self.n_windows()
    }

    /// Learnable parameter count:
    /// `m*N_b*C + m*N_b + 2*m*N_b + m*N_b*(T/w)*N_c + N_c`.
    pub fn param_count(&self) -> usize {
        let f = self.n_features();
        f * self.channels + f + 2 * f + self.fc_inputs() * self.classes + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig("empty trial geometry".into()));
        }
        if self.spatial_filters_per_band < 1 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        if self.bands.is_empty() {
            return Err(Error::InvalidConfig("need at least one band".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        let w = self.window_samples();
        if w == 0 || self.samples % w != 0 {
            return Err(Error::InvalidConfig(format!(
                "window of {w} samples ({} s at {} Hz) does not divide T = {}",
                self.window_seconds, self.sample_rate_hz, self.samples
            )));
        }
        for &(lo, hi) in &self.bands {
            crate::dsp::BandSpec {
                pass_low_hz: lo,
                pass_high_hz: hi,
                transition_hz: self.transition_hz,
                stop_atten_db: self.stop_atten_db,
                passband_ripple_db: self.passband_ripple_db,
                sample_rate_hz: self.sample_rate_hz,
            }
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("band ({lo}, {hi}): {e}")))?;
        }
        Ok(())
    }
}

/// One learnable parameter with its optional max-norm constraint
/// (`(limit, group_len)`).
#[derive(Clone)]
pub struct Param {
    pub name: &'static str,
    pub tensor: Tensor,
    pub max_norm: Option<(f64, usize)>,
}

/// The assembled model.
pub struct FbcNet {
    pub config: ModelConfig,
    pub filter_bank: FilterBank,
    pub conv: DepthwiseConv,
    pub bn: BatchNorm,
    pub fc_weights: Tensor,
    pub fc_bias: Tensor,
    mode: Mode,
}

impl FbcNet {
    /// Deterministic construction: conv and FC weights drawn uniformly in
    /// +-1/sqrt(fan_in) from a seeded stream, biases zero, gamma 1, beta 0.
    pub fn build(config: ModelConfig) -> Result<FbcNet> {
        config.validate()?;
        let filter_bank = FilterBank::design(
            &config.bands,
            config.transition_hz,
            config.stop_atten_db,
            config.passband_ripple_db,
            config.sample_rate_hz,
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init"));
        let f = config.n_features();
        let c = config.channels;
        let conv_bound = 1.0 / (c as f64).sqrt();
        let conv_w: Vec<f64> = (0..f * c)
            .map(|_| rng.gen_range(-conv_bound..conv_bound))
            .collect();
        let d = config.fc_inputs();
        let fc_bound = 1.0 / (d as f64).sqrt();
        let fc_w: Vec<f64> = (0..config.classes * d)
            .map(|_| rng.gen_range(-fc_bound..fc_bound))
            .collect();

        Ok(FbcNet {
            conv: DepthwiseConv {
                weights: Tensor::leaf(conv_w, vec![f, 1, c, 1]),
                bias: Tensor::leaf(vec![0.0; f], vec![f]),
                depth_multiplier: config.spatial_filters_per_band,
                max_norm: CONV_MAX_NORM,
            },
            bn: BatchNorm::new(f, config.bn_momentum, config.bn_eps),
            fc_weights: Tensor::leaf(fc_w, vec![config.classes, d]),
            fc_bias: Tensor::leaf(vec![0.0; config.classes], vec![config.classes]),
            filter_bank,
            config,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn set_eval(&mut self) {
        self.mode = Mode::Eval;
    }

    /// Learnable parameters in declaration order, with max-norm groups:
    /// conv filters project per output filter, FC per output row.
    pub fn parameters(&self) -> Vec<Param> {
        vec![
            Param {
                name: "conv.weights",
                tensor: self.conv.weights.clone(),
                max_norm: Some((CONV_MAX_NORM, self.config.channels)),
            },
            Param {
                name: "conv.bias",
                tensor: self.conv.bias.clone(),
                max_norm: None,
            },
            Param {
                name: "bn.gamma",
                tensor: self.bn.gamma.clone(),
                max_norm: None,
            },
            Param {
                name: "bn.beta",
                tensor: self.bn.beta.clone(),
                max_norm: None,
            },
            Param {
                name: "fc.weights",
                tensor: self.fc_weights.clone(),
                max_norm: Some((FC_MAX_NORM, self.config.fc_inputs())),
            },
            Param {
                name: "fc.bias",
                tensor: self.fc_bias.clone(),
                max_norm: None,
            },
        ]
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Filter a batch of trials into the (B, N_b, C, T) multi-view leaf.
    pub fn multi_view_batch(&self, trials: &[&EegTrial]) -> Result<Tensor> {
        let cfg = &self.config;
        let per = cfg.n_bands() * cfg.channels * cfg.samples;
        let mut data = Vec::with_capacity(trials.len() * per);
        for t in trials {
            if t.x.len() != cfg.channels * cfg.samples {
                return Err(Error::ShapeMismatch {
                    op: "multi_view_batch",
                    lhs: vec![cfg.channels, cfg.samples],
                    rhs: vec![t.x.len()],
                });
            }
            let mv = self.filter_bank.multi_view(
                &t.x,
                cfg.channels,
                cfg.samples,
                cfg.filter_mode,
            )?;
            data.extend_from_slice(&mv);
        }
        Ok(Tensor::leaf(
            data,
            vec![trials.len(), cfg.n_bands(), cfg.channels, cfg.samples],
        ))
    }

    /// Wrap precomputed multi-view buffers (one per trial, each
    /// N_b*C*T long) as a batch leaf.
    pub fn views_to_batch(&self, views: &[&[f64]]) -> Tensor {
        let cfg = &self.config;
        let per = cfg.n_bands() * cfg.channels * cfg.samples;
        let mut data = Vec::with_capacity(views.len() * per);
        for v in views {
            assert_eq!(v.len(), per);
            data.extend_from_slice(v);
        }
        Tensor::leaf(
            data,
            vec![views.len(), cfg.n_bands(), cfg.channels, cfg.samples],
        )
    }

    /// Full differentiable pipeline from the multi-view batch to logits
    /// (B, N_c). Train mode updates batch-norm running statistics.
    pub fn forward_views(&self, views: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let batch = views.shape()[0];
        let x = depthwise_conv_forward(views, &self.conv)?;
        let x = batchnorm(&x, &self.bn, self.mode)?;
        let x = activation(&x, cfg.activation);
        let x = temporal_layer(&x, cfg.temporal, cfg.window_samples())?;
        let x = log_activation(&x);
        let x = x.reshape(vec![batch, cfg.fc_inputs()])?;
        let logits = linear_forward(&x, &self.fc_weights, &self.fc_bias)?;
        debug_assert_eq!(logits.shape(), &[batch, cfg.classes]);
        Ok(logits)
    }

    /// Filter and classify raw trials.
    pub fn forward_trials(&self, trials: &[&EegTrial]) -> Result<Tensor> {
        let views = self.multi_view_batch(trials)?;
        self.forward_views(&views)
    }

    /// Predicted labels and class probabilities. Requires eval mode so
    /// batch statistics cannot leak between trials; argmax ties break to
    /// the lowest class index.
    pub fn predict(&self, trials: &[&EegTrial]) -> Result<Vec<(usize, Vec<f64>)>> {
        if self.mode != Mode::Eval {
            return Err(Error::WrongMode {
                required: "eval",
                actual: "train",
            });
        }
        let logits = self.forward_trials(trials)?;
        let rows = predictions_from_logits(&logits.data(), self.config.classes);
        Ok(rows)
    }

    /// Copy of every parameter and running-stat buffer, for snapshots.
    pub fn state_buffers(&self) -> Vec<Vec<f64>> {
        vec![
            self.conv.weights.to_vec(),
            self.conv.bias.to_vec(),
            self.bn.gamma.to_vec(),
            self.bn.beta.to_vec(),
            self.bn.running_mean.borrow().clone(),
            self.bn.running_var.borrow().clone(),
            self.fc_weights.to_vec(),
            self.fc_bias.to_vec(),
        ]
    }

    pub fn restore_state_buffers(&self, buffers: &[Vec<f64>]) {
        assert_eq!(buffers.len(), 8);
        self.conv.weights.set_data(&buffers[0]);
        self.conv.bias.set_data(&buffers[1]);
        self.bn.gamma.set_data(&buffers[2]);
        self.bn.beta.set_data(&buffers[3]);
        self.bn.running_mean.borrow_mut().copy_from_slice(&buffers[4]);
        self.bn.running_var.borrow_mut().copy_from_slice(&buffers[5]);
        self.fc_weights.set_data(&buffers[6]);
        self.fc_bias.set_data(&buffers[7]);
    }
}

/// Argmax with lowest-index tie break plus row softmax.
pub fn predictions_from_logits(logits: &[f64], classes: usize) -> Vec<(usize, Vec<f64>)> {
    logits
        .chunks(classes)
        .map(|row| {
            let probs = softmax_rows(row, classes);
            let mut best = 0usize;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            (best, probs)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"FBCN";
const CHECKPOINT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Swish => 0,
        Activation::Elu => 1,
        Activation::Relu => 2,
        Activation::LeakyRelu => 3,
    }
}

fn activation_from_tag(t: u8) -> Result<Activation> {
    Ok(match t {
        0 => Activation::Swish,
        1 => Activation::Elu,
        2 => Activation::Relu,
        3 => Activation::LeakyRelu,
        _ => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
    })
}

fn temporal_tag(t: TemporalKind) -> u8 {
    match t {
        TemporalKind::Variance => 0,
        TemporalKind::Average => 1,
        TemporalKind::Max => 2,
    }
}

fn temporal_from_tag(t: u8) -> Result<TemporalKind> {
    Ok(match t {
        0 => TemporalKind::Variance,
        1 => TemporalKind::Average,
        2 => TemporalKind::Max,
        _ => return Err(Error::Checkpoint(format!("unknown temporal tag {t}"))),
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn floats(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl FbcNet {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(cfg.channels as u32);
        w.u32(cfg.samples as u32);
        w.f64(cfg.sample_rate_hz);
        w.u32(cfg.bands.len() as u32);
        for &(lo, hi) in &cfg.bands {
            w.f64(lo);
            w.f64(hi);
        }
        w.f64(cfg.transition_hz);
        w.f64(cfg.stop_atten_db);
        w.f64(cfg.passband_ripple_db);
        w.u32(cfg.spatial_filters_per_band as u32);
        w.f64(cfg.window_seconds);
        w.u32(cfg.classes as u32);
        w.u8(activation_tag(cfg.activation));
        w.u8(temporal_tag(cfg.temporal));
        w.u8(match cfg.filter_mode {
            FilterMode::ZeroPhase => 0,
            FilterMode::Causal => 1,
        });
        w.f64(cfg.bn_momentum);
        w.f64(cfg.bn_eps);
        w.u64(cfg.seed);
        for buf in self.state_buffers() {
            w.floats(&buf);
        }
        w.0
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<FbcNet> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an FBCN file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let channels = r.u32()? as usize;
        let samples = r.u32()? as usize;
        let sample_rate_hz = r.f64()?;
        let n_bands = r.u32()? as usize;
        let mut bands = Vec::with_capacity(n_bands);
        for _ in 0..n_bands {
            bands.push((r.f64()?, r.f64()?));
        }
        let transition_hz = r.f64()?;
        let stop_atten_db = r.f64()?;
        let passband_ripple_db = r.f64()?;
        let m = r.u32()? as usize;
        let window_seconds = r.f64()?;
        let classes = r.u32()? as usize;
        let activation = activation_from_tag(r.u8()?)?;
        let temporal = temporal_from_tag(r.u8()?)?;
        let filter_mode = match r.u8()? {
            0 => FilterMode::ZeroPhase,
            1 => FilterMode::Causal,
            t => return Err(Error::Checkpoint(format!("unknown filter mode tag {t}"))),
        };
        let bn_momentum = r.f64()?;
        let bn_eps = r.f64()?;
        let seed = r.u64()?;

        let config = ModelConfig {
            channels,
            samples,
            sample_rate_hz,
            bands,
            transition_hz,
            stop_atten_db,
            passband_ripple_db,
            spatial_filters_per_band: m,
            window_seconds,
            classes,
            activation,
            temporal,
            filter_mode,
            bn_momentum,
            bn_eps,
            seed,
        };
        let mut model = FbcNet::build(config.clone())?;
        let f = config.n_features();
        let d = config.fc_inputs();
        let buffers = vec![
            r.floats(f * channels)?,
            r.floats(f)?,
            r.floats(f)?,
            r.floats(f)?,
            r.floats(f)?,
            r.floats(f)?,
            r.floats(classes * d)?,
            r.floats(classes)?,
        ];
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes: file has {}, parsed {}",
                bytes.len(),
                r.pos
            )));
        }
        model.restore_state_buffers(&buffers);
        model.set_eval();
        Ok(model)
    }

    pub fn load_checkpoint(path: &Path) -> Result<FbcNet> {
        FbcNet::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            spatial_filters_per_band: 2,
            window_seconds: 0.25,
            bands: vec![(4.0, 8.0), (8.0, 12.0)],
            ..ModelConfig::for_dataset(3, 40, 40.0, 2)
        }
    }

    #[test]
    fn bcic_parameter_count_is_11812() {
        let cfg = ModelConfig::for_dataset(22, 1000, 250.0, 4);
        assert_eq!(cfg.param_count(), 11_812);
        // 6624 conv + 576 bn + 4612 fc
        let f = cfg.n_features();
        assert_eq!(f * cfg.channels + f, 6624);
        assert_eq!(2 * f, 576);
        assert_eq!(cfg.fc_inputs() * cfg.classes + cfg.classes, 4612);
    }

    #[test]
    fn built_model_matches_formula_count() {
        let model = FbcNet::build(tiny_config()).unwrap();
        assert_eq!(model.param_count(), tiny_config().param_count());
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = FbcNet::build(tiny_config()).unwrap();
        let b = FbcNet::build(tiny_config()).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters().iter()) {
            let da = pa.tensor.to_vec();
            let db = pb.tensor.to_vec();
            assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn indivisible_window_rejected() {
        let cfg = ModelConfig {
            window_seconds: 0.3, // 75 samples at 250 Hz
            ..ModelConfig::for_dataset(4, 1000, 250.0, 2)
        };
        assert!(matches!(FbcNet::build(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn nyquist_violation_rejected() {
        let cfg = ModelConfig::for_dataset(4, 100, 50.0, 2); // 36-40 band over 25 Hz nyquist
        assert!(FbcNet::build(cfg).is_err());
    }

    #[test]
    fn param_count_formula_across_grid() {
        for &m in &[1usize, 8, 16, 32, 64] {
            for &w in &[0.25f64, 0.5, 1.0, 2.0] {
                let cfg = ModelConfig {
                    spatial_filters_per_band: m,
                    window_seconds: w,
                    bands: vec![(4.0, 8.0), (8.0, 12.0), (12.0, 16.0)],
                    ..ModelConfig::for_dataset(5, 1000, 250.0, 3)
                };
                if cfg.validate().is_err() {
                    continue; // invalid divisor combinations excluded
                }
                let model = FbcNet::build(cfg.clone()).unwrap();
                assert_eq!(model.param_count(), cfg.param_count(), "m={m} w={w}");
            }
        }
    }

    fn tiny_trials() -> Vec<EegTrial> {
        let ds = generate_synthetic(&SynthConfig {
            trials_per_class: 4,
            channels: 3,
            samples: 40,
            sample_rate_hz: 40.0,
            class_channels: vec![vec![0], vec![2]],
            band_hz: (8.0, 12.0),
            ..SynthConfig::default()
        })
        .unwrap();
        ds.trials
    }

    #[test]
    fn forward_shape_bcic_config() {
        let mut model = FbcNet::build(ModelConfig::for_dataset(22, 1000, 250.0, 4)).unwrap();
        model.set_eval();
        let trial = EegTrial {
            x: (0..22 * 1000).map(|i| ((i % 97) as f64 - 48.0) / 50.0).collect(),
            label: 0,
            subject_id: "s".into(),
            session_id: "1".into(),
        };
        let batch: Vec<&EegTrial> = std::iter::repeat(&trial).take(8).collect();
        let logits = model.forward_trials(&batch).unwrap();
        assert_eq!(logits.shape(), &[8, 4]);
    }

    #[test]
    fn eval_mode_duplicate_trials_get_identical_rows() {
        let mut model = FbcNet::build(tiny_config()).unwrap();
        model.set_eval();
        let trials = tiny_trials();
        let batch = vec![&trials[0], &trials[1], &trials[0]];
        let logits = model.forward_trials(&batch).unwrap();
        let d = logits.data();
        let c = model.config.classes;
        for k in 0..c {
            assert_eq!(d[k].to_bits(), d[2 * c + k].to_bits());
        }
    }

    #[test]
    fn eval_mode_is_permutation_equivariant() {
        let mut model = FbcNet::build(tiny_config()).unwrap();
        model.set_eval();
        let trials = tiny_trials();
        let fwd = model
            .forward_trials(&[&trials[0], &trials[1], &trials[2]])
            .unwrap()
            .to_vec();
        let rev = model
            .forward_trials(&[&trials[2], &trials[1], &trials[0]])
            .unwrap()
            .to_vec();
        let c = model.config.classes;
        for k in 0..c {
            assert_eq!(fwd[k].to_bits(), rev[2 * c + k].to_bits());
            assert_eq!(fwd[2 * c + k].to_bits(), rev[k].to_bits());
        }
    }

    #[test]
    fn zero_and_noise_inputs_stay_finite() {
        let mut model = FbcNet::build(tiny_config()).unwrap();
        model.set_eval();
        let zero = EegTrial {
            x: vec![0.0; 3 * 40],
            label: 0,
            subject_id: String::new(),
            session_id: String::new(),
        };
        let noisy = EegTrial {
            x: (0..120).map(|i| 1e-9 * (i as f64).sin()).collect(),
            ..zero.clone()
        };
        let logits = model.forward_trials(&[&zero, &noisy]).unwrap();
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predict_probabilities_and_tie_break() {
        let rows = predictions_from_logits(&[0.0, 0.0, 0.0, 0.0], 4);
        assert_eq!(rows[0].0, 0);
        for p in &rows[0].1 {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let rows = predictions_from_logits(&[10.0, 0.0, 0.0, 0.0], 4);
        assert_eq!(rows[0].0, 0);
        assert!(rows[0].1[0] > 0.999);

        let rows = predictions_from_logits(&[0.3, -0.2, 1.4, 0.3, 0.1, -2.0], 3);
        for (_, probs) in rows {
            let s: f64 = probs.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn predict_requires_eval_mode() {
        let model = FbcNet::build(tiny_config()).unwrap();
        let trials = tiny_trials();
        assert!(matches!(
            model.predict(&[&trials[0]]),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = FbcNet::build(tiny_config()).unwrap();
        // Perturb running stats so they are non-trivial.
        model.bn.running_mean.borrow_mut()[0] = 0.25;
        model.bn.running_var.borrow_mut()[1] = 2.5;
        model.set_eval();

        let bytes = model.checkpoint_bytes();
        assert_eq!(&bytes[..4], b"FBCN");
        let loaded = FbcNet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.state_buffers().iter().zip(loaded.state_buffers()) {
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let trials = tiny_trials();
        let la = model.forward_trials(&[&trials[0]]).unwrap().to_vec();
        let lb = loaded.forward_trials(&[&trials[0]]).unwrap().to_vec();
        assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = FbcNet::build(tiny_config()).unwrap();
        let mut bytes = model.checkpoint_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FbcNet::from_checkpoint_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let model2 = FbcNet::build(tiny_config()).unwrap();
        let bytes2 = model2.checkpoint_bytes();
        assert!(FbcNet::from_checkpoint_bytes(&bytes2[..bytes2.len() - 4]).is_err());
    }
}
