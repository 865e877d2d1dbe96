//! DeepLIFT with the Rescale rule over a trained model, plus
//! subject-level channel x band aggregation.
//!
//! Relevance is attributed at the multi-view input (the filter bank is
//! fixed preprocessing) against a class-average reference, targeting the
//! chosen class logit; softmax is excluded from the attribution path.
//!
//! Multipliers propagate from the logit back to the input. Linear steps
//! (FC, depthwise conv, eval-mode batch norm) use their weights;
//! elementwise nonlinearities use the Rescale ratio `dout/din`, falling
//! back to the analytic derivative when `|din| < 1e-7`. The variance
//! layer is not elementwise: its multiplier per timepoint is
//! `((x_t - mu_x) + (r_t - mu_r)) / w`, which follows from the algebraic
//! identity `var(x) - var(r) = sum_t [(x_t-mu_x)+(r_t-mu_r)] * [(x_t-r_t)
//! - (mu_x-mu_r)] / w` (the mean-shift term sums to zero per window), so
//! summation-to-delta holds exactly at that layer.

use crate::data::EegDataset;
use crate::error::{Error, Result};
use crate::layers::{activation_derivative, activation_value, Activation, Mode, TemporalKind};
use crate::layers::{LOG_CLAMP_MAX, LOG_CLAMP_MIN};
use crate::model::FbcNet;

const RESCALE_EPS: f64 = 1e-7;

/// Per-trial attribution over the multi-view input.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    /// (N_b, C, T) contribution scores, row-major.
    pub per_input: Vec<f64>,
    pub bands: usize,
    pub channels: usize,
    pub samples: usize,
    pub target_class: usize,
    /// Human-readable description of the reference input.
    pub reference_id: String,
    /// Target logit at the input minus at the reference.
    pub delta_logit: f64,
}

impl RelevanceMap {
    pub fn contribution_sum(&self) -> f64 {
        self.per_input.iter().sum()
    }
}

/// Trial-averaged normalized absolute relevance, collapsed over time.
#[derive(Debug, Clone)]
pub struct SubjectRelevance {
    /// (N_b, C) scores, nonnegative, summing to 1.
    pub channel_band: Vec<f64>,
    pub bands: usize,
    pub channels: usize,
    /// Row sums of `channel_band`.
    pub band_totals: Vec<f64>,
}

impl SubjectRelevance {
    /// Text export: N_b rows of C scores, then a band-totals line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in 0..self.bands {
            let row: Vec<String> = (0..self.channels)
                .map(|c| format!("{:.9}", self.channel_band[b * self.channels + c]))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        let totals: Vec<String> = self.band_totals.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str("band_totals ");
        out.push_str(&totals.join(" "));
        out.push('\n');
        out
    }

    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, &v) in self.channel_band.iter().enumerate() {
            if v > self.channel_band[best] {
                best = i;
            }
        }
        (best / self.channels, best % self.channels)
    }
}

// ---------------------------------------------------------------------------
// Pipeline steps (eval-mode lowering of the model)
// ---------------------------------------------------------------------------

/// One stage of the eval-mode pipeline in plain-array form.
pub(crate) enum Step {
    /// Depthwise conv: (views*channels*T) -> (filters*T).
    Conv {
        weights: Vec<f64>,
        bias: Vec<f64>,
        views: usize,
        channels: usize,
        m: usize,
        t: usize,
    },
    /// Per-feature affine y = scale*x + shift over (features*T).
    Affine {
        scale: Vec<f64>,
        shift: Vec<f64>,
        t: usize,
    },
    Elementwise {
        kind: Activation,
    },
    Temporal {
        kind: TemporalKind,
        w: usize,
    },
    LogClamp,
    /// Final linear map: (d) -> (classes).
    Linear {
        weights: Vec<f64>,
        bias: Vec<f64>,
        classes: usize,
        d: usize,
    },
}

impl Step {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Step::Conv {
                weights,
                bias,
                views,
                channels,
                m,
                t,
            } => {
                let (views, channels, m, t) = (*views, *channels, *m, *t);
                let filters = m * views;
                let mut out = vec![0.0; filters * t];
                for j in 0..filters {
                    let v = j / m;
                    let row = &mut out[j * t..(j + 1) * t];
                    row.iter_mut().for_each(|o| *o = bias[j]);
                    for c in 0..channels {
                        let w = weights[j * channels + c];
                        let src = &x[(v * channels + c) * t..(v * channels + c + 1) * t];
                        for i in 0..t {
                            row[i] += w * src[i];
                        }
                    }
                }
                out
            }
            Step::Affine { scale, shift, t } => {
                let mut out = vec![0.0; x.len()];
                for f in 0..scale.len() {
                    for i in 0..*t {
                        out[f * t + i] = scale[f] * x[f * t + i] + shift[f];
                    }
                }
                out
            }
            Step::Elementwise { kind } => x.iter().map(|&v| activation_value(*kind, v)).collect(),
            Step::Temporal { kind, w } => {
                let k = x.len() / w;
                let mut out = vec![0.0; k];
                for j in 0..k {
                    let win = &x[j * w..(j + 1) * w];
                    out[j] = match kind {
                        TemporalKind::Average => win.iter().sum::<f64>() / *w as f64,
                        TemporalKind::Variance => {
                            let mu = win.iter().sum::<f64>() / *w as f64;
                            win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / *w as f64
                        }
                        TemporalKind::Max => win.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    };
                }
                out
            }
            Step::LogClamp => x
                .iter()
                .map(|&v| v.clamp(LOG_CLAMP_MIN, LOG_CLAMP_MAX).ln())
                .collect(),
            Step::Linear {
                weights,
                bias,
                classes,
                d,
            } => {
                let mut out = bias.clone();
                for (k, o) in out.iter_mut().enumerate().take(*classes) {
                    let row = &weights[k * d..(k + 1) * d];
                    for j in 0..*d {
                        *o += row[j] * x[j];
                    }
                }
                out
            }
        }
    }

    /// Rescale multiplier propagation: given the multiplier on this
    /// step's output and the cached inputs of x and the reference,
    /// produce the multiplier on this step's input.
    fn propagate(&self, m_out: &[f64], x_in: &[f64], r_in: &[f64]) -> Vec<f64> {
        match self {
            Step::Conv {
                weights,
                views,
                channels,
                m,
                t,
                ..
            } => {
                let (views, channels, m, t) = (*views, *channels, *m, *t);
                let filters = m * views;
                let mut m_in = vec![0.0; views * channels * t];
                for j in 0..filters {
                    let v = j / m;
                    let mo = &m_out[j * t..(j + 1) * t];
                    for c in 0..channels {
                        let w = weights[j * channels + c];
                        let dst = (v * channels + c) * t;
                        for i in 0..t {
                            m_in[dst + i] += mo[i] * w;
                        }
                    }
                }
                m_in
            }
            Step::Affine { scale, t, .. } => {
                let mut m_in = vec![0.0; m_out.len()];
                for f in 0..scale.len() {
                    for i in 0..*t {
                        m_in[f * t + i] = m_out[f * t + i] * scale[f];
                    }
                }
                m_in
            }
            Step::Elementwise { kind } => rescale_elementwise(
                m_out,
                x_in,
                r_in,
                |v| activation_value(*kind, v),
                |v| activation_derivative(*kind, v),
            ),
            Step::LogClamp => rescale_elementwise(
                m_out,
                x_in,
                r_in,
                |v| v.clamp(LOG_CLAMP_MIN, LOG_CLAMP_MAX).ln(),
                |v| {
                    if (LOG_CLAMP_MIN..=LOG_CLAMP_MAX).contains(&v) {
                        1.0 / v
                    } else {
                        0.0
                    }
                },
            ),
            Step::Temporal { kind, w } => {
                let k = m_out.len();
                let mut m_in = vec![0.0; x_in.len()];
                for j in 0..k {
                    let xw = &x_in[j * w..(j + 1) * w];
                    let rw = &r_in[j * w..(j + 1) * w];
                    let mo = m_out[j];
                    match kind {
                        TemporalKind::Average => {
                            for i in 0..*w {
                                m_in[j * w + i] = mo / *w as f64;
                            }
                        }
                        TemporalKind::Variance => {
                            let mu_x = xw.iter().sum::<f64>() / *w as f64;
                            let mu_r = rw.iter().sum::<f64>() / *w as f64;
                            for i in 0..*w {
                                m_in[j * w + i] =
                                    mo * ((xw[i] - mu_x) + (rw[i] - mu_r)) / *w as f64;
                            }
                        }
                        TemporalKind::Max => {
                            // Route the whole output difference through the
                            // argmax of x; fall back to a unit gate when the
                            // input difference there is negligible.
                            let (arg, max_x) = xw.iter().enumerate().fold(
                                (0usize, f64::NEG_INFINITY),
                                |(ai, av), (i, &v)| if v > av { (i, v) } else { (ai, av) },
                            );
                            let max_r = rw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let din = xw[arg] - rw[arg];
                            let mult = if din.abs() < RESCALE_EPS {
                                1.0
                            } else {
                                (max_x - max_r) / din
                            };
                            m_in[j * w + arg] = mo * mult;
                        }
                    }
                }
                m_in
            }
            Step::Linear {
                weights,
                classes,
                d,
                ..
            } => {
                let mut m_in = vec![0.0; *d];
                for k in 0..*classes {
                    let mo = m_out[k];
                    if mo == 0.0 {
                        continue;
                    }
                    let row = &weights[k * d..(k + 1) * d];
                    for j in 0..*d {
                        m_in[j] += mo * row[j];
                    }
                }
                m_in
            }
        }
    }
}

fn rescale_elementwise(
    m_out: &[f64],
    x_in: &[f64],
    r_in: &[f64],
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
) -> Vec<f64> {
    m_out
        .iter()
        .enumerate()
        .map(|(i, &mo)| {
            let din = x_in[i] - r_in[i];
            let mult = if din.abs() < RESCALE_EPS {
                df(x_in[i])
            } else {
                (f(x_in[i]) - f(r_in[i])) / din
            };
            mo * mult
        })
        .collect()
}

/// Lower a model's eval-mode pipeline to plain steps.
pub(crate) fn model_steps(model: &FbcNet) -> Vec<Step> {
    let cfg = &model.config;
    let f = cfg.n_features();
    let rv = model.bn.running_var.borrow();
    let rm = model.bn.running_mean.borrow();
    let gamma = model.bn.gamma.to_vec();
    let beta = model.bn.beta.to_vec();
    let mut scale = vec![0.0; f];
    let mut shift = vec![0.0; f];
    for i in 0..f {
        let inv = 1.0 / (rv[i] + cfg.bn_eps).sqrt();
        scale[i] = gamma[i] * inv;
        shift[i] = beta[i] - gamma[i] * rm[i] * inv;
    }
    vec![
        Step::Conv {
            weights: model.conv.weights.to_vec(),
            bias: model.conv.bias.to_vec(),
            views: cfg.n_bands(),
            channels: cfg.channels,
            m: cfg.spatial_filters_per_band,
            t: cfg.samples,
        },
        Step::Affine {
            scale,
            shift,
            t: cfg.samples,
        },
        Step::Elementwise {
            kind: cfg.activation,
        },
        Step::Temporal {
            kind: cfg.temporal,
            w: cfg.window_samples(),
        },
        Step::LogClamp,
        Step::Linear {
            weights: model.fc_weights.to_vec(),
            bias: model.fc_bias.to_vec(),
            classes: cfg.classes,
            d: cfg.fc_inputs(),
        },
    ]
}

/// Run DeepLIFT-Rescale over an explicit step pipeline.
pub(crate) fn deeplift_steps(
    steps: &[Step],
    x: &[f64],
    reference: &[f64],
    target_class: usize,
) -> (Vec<f64>, f64) {
    // Forward both inputs, caching each step's input.
    let mut x_acts: Vec<Vec<f64>> = vec![x.to_vec()];
    let mut r_acts: Vec<Vec<f64>> = vec![reference.to_vec()];
    for s in steps {
        let nx = s.forward(x_acts.last().unwrap());
        let nr = s.forward(r_acts.last().unwrap());
        x_acts.push(nx);
        r_acts.push(nr);
    }
    let logits_x = x_acts.last().unwrap();
    let logits_r = r_acts.last().unwrap();
    let delta = logits_x[target_class] - logits_r[target_class];

    let classes = logits_x.len();
    let mut multiplier = vec![0.0; classes];
    multiplier[target_class] = 1.0;
    for (i, s) in steps.iter().enumerate().rev() {
        multiplier = s.propagate(&multiplier, &x_acts[i], &r_acts[i]);
    }

    let contributions: Vec<f64> = multiplier
        .iter()
        .zip(x.iter().zip(reference))
        .map(|(&m, (&xi, &ri))| m * (xi - ri))
        .collect();
    (contributions, delta)
}

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

/// Elementwise mean of the multi-view representation over all trials of
/// one class.
pub fn class_reference(model: &FbcNet, ds: &EegDataset, class: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let members: Vec<usize> = ds
        .trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == class)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(Error::Empty("reference class"));
    }
    let per = cfg.n_bands() * cfg.channels * cfg.samples;
    let mut acc = vec![0.0; per];
    for &i in &members {
        let mv = model.filter_bank.multi_view(
            &ds.trials[i].x,
            cfg.channels,
            cfg.samples,
            cfg.filter_mode,
        )?;
        for (a, v) in acc.iter_mut().zip(&mv) {
            *a += v;
        }
    }
    let n = members.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// DeepLIFT-Rescale relevance of one multi-view input against a
/// reference, for the target class logit.
pub fn deeplift_rescale(
    model: &FbcNet,
    x_views: &[f64],
    reference: &[f64],
    target_class: usize,
    reference_id: &str,
) -> Result<RelevanceMap> {
    if !matches!(model.mode(), Mode::Eval) {
        return Err(Error::WrongMode {
            required: "eval",
            actual: "train",
        });
    }
    let cfg = &model.config;
    let per = cfg.n_bands() * cfg.channels * cfg.samples;
    if x_views.len() != per || reference.len() != per {
        return Err(Error::ShapeMismatch {
            op: "deeplift",
            lhs: vec![x_views.len()],
            rhs: vec![reference.len()],
        });
    }
    if target_class >= cfg.classes {
        return Err(Error::LabelOutOfRange {
            label: target_class as i64,
            classes: cfg.classes,
        });
    }
    let steps = model_steps(model);
    let (contributions, delta) = deeplift_steps(&steps, x_views, reference, target_class);
    Ok(RelevanceMap {
        per_input: contributions,
        bands: cfg.n_bands(),
        channels: cfg.channels,
        samples: cfg.samples,
        target_class,
        reference_id: reference_id.to_string(),
        delta_logit: delta,
    })
}

/// Subject-level relevance: average the normalized absolute per-trial
/// relevance of every target-class trial against the reference-class
/// mean, then collapse time.
pub fn subject_relevance(
    model: &FbcNet,
    ds: &EegDataset,
    reference_class: usize,
    target_class: usize,
) -> Result<SubjectRelevance> {
    let cfg = &model.config;
    let reference = class_reference(model, ds, reference_class)?;
    let ref_id = format!("class-{reference_class}-mean");
    let targets: Vec<usize> = ds
        .trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == target_class)
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Err(Error::Empty("target class"));
    }

    let per = cfg.n_bands() * cfg.channels * cfg.samples;
    let mut acc = vec![0.0; per];
    for &i in &targets {
        let mv = model.filter_bank.multi_view(
            &ds.trials[i].x,
            cfg.channels,
            cfg.samples,
            cfg.filter_mode,
        )?;
        let map = deeplift_rescale(model, &mv, &reference, target_class, &ref_id)?;
        let total: f64 = map.per_input.iter().map(|v| v.abs()).sum();
        if total <= 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(&map.per_input) {
            *a += v.abs() / total;
        }
    }
    let n = targets.len() as f64;

    let mut channel_band = vec![0.0; cfg.n_bands() * cfg.channels];
    for b in 0..cfg.n_bands() {
        for c in 0..cfg.channels {
            let base = (b * cfg.channels + c) * cfg.samples;
            channel_band[b * cfg.channels + c] =
                acc[base..base + cfg.samples].iter().sum::<f64>() / n;
        }
    }
    let band_totals: Vec<f64> = (0..cfg.n_bands())
        .map(|b| channel_band[b * cfg.channels..(b + 1) * cfg.channels].iter().sum())
        .collect();
    Ok(SubjectRelevance {
        channel_band,
        bands: cfg.n_bands(),
        channels: cfg.channels,
        band_totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::layers::{
        average_layer, depthwise_conv_forward, linear_forward, DepthwiseConv,
    };
    use crate::model::{FbcNet, ModelConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> FbcNet {
        let cfg = ModelConfig {
            spatial_filters_per_band: 2,
            window_seconds: 0.25,
            bands: vec![(4.0, 8.0), (8.0, 12.0)],
            ..ModelConfig::for_dataset(3, 40, 40.0, 2)
        };
        let mut m = FbcNet::build(cfg).unwrap();
        // Non-trivial running stats and parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        m.bn.running_mean
            .borrow_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.2..0.2));
        m.bn.running_var
            .borrow_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(0.5..2.0));
        m.set_eval();
        m
    }

    fn random_views(model: &FbcNet, seed: u64) -> Vec<f64> {
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.n_bands() * cfg.channels * cfg.samples)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn identical_input_and_reference_gives_zero_contributions() {
        let model = tiny_model();
        let x = random_views(&model, 1);
        let map = deeplift_rescale(&model, &x, &x, 0, "self").unwrap();
        assert!(map.per_input.iter().all(|&v| v == 0.0));
        assert_eq!(map.delta_logit, 0.0);
    }

    #[test]
    fn step_forward_matches_model_forward() {
        let model = tiny_model();
        let x = random_views(&model, 2);
        let steps = model_steps(&model);
        let mut cur = x.clone();
        for s in &steps {
            cur = s.forward(&cur);
        }
        let batch = model.views_to_batch(&[&x]);
        let logits = model.forward_views(&batch).unwrap();
        for (a, b) in cur.iter().zip(logits.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn summation_to_delta_on_random_pairs() {
        let model = tiny_model();
        for seed in 0..20 {
            let x = random_views(&model, 100 + seed);
            let r = random_views(&model, 200 + seed);
            for class in 0..2 {
                let map = deeplift_rescale(&model, &x, &r, class, "rand").unwrap();
                let sum = map.contribution_sum();
                let tol = 1e-3 * map.delta_logit.abs().max(1.0);
                assert!(
                    (sum - map.delta_logit).abs() <= tol,
                    "seed {seed} class {class}: sum {sum} vs delta {}",
                    map.delta_logit
                );
            }
        }
    }

    #[test]
    fn train_mode_model_is_rejected() {
        let mut model = tiny_model();
        model.set_train();
        let x = random_views(&model, 3);
        assert!(matches!(
            deeplift_rescale(&model, &x, &x, 0, "r"),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = tiny_model();
        let x = random_views(&model, 4);
        assert!(deeplift_rescale(&model, &x, &x[1..], 0, "r").is_err());
    }

    #[test]
    fn linear_stub_contributions_equal_gradient_times_delta() {
        // Conv -> windowed average -> linear is a purely linear pipeline;
        // DeepLIFT must reduce to gradient * (x - ref). The gradient comes
        // from the autodiff engine, an independent route.
        let (views, c, t, m, w) = (2usize, 3usize, 8usize, 2usize, 4usize);
        let filters = m * views;
        let k = t / w;
        let d = filters * k;
        let classes = 2usize;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let conv_w: Vec<f64> = (0..filters * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conv_b: Vec<f64> = (0..filters).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let fc_w: Vec<f64> = (0..classes * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fc_b: Vec<f64> = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..views * c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..views * c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let steps = vec![
            Step::Conv {
                weights: conv_w.clone(),
                bias: conv_b.clone(),
                views,
                channels: c,
                m,
                t,
            },
            Step::Temporal {
                kind: TemporalKind::Average,
                w,
            },
            Step::Linear {
                weights: fc_w.clone(),
                bias: fc_b.clone(),
                classes,
                d,
            },
        ];
        let target = 1usize;
        let (contribs, delta) = deeplift_steps(&steps, &x, &r, target);

        // Independent gradient route through the autodiff engine.
        let xt = Tensor::leaf(x.clone(), vec![1, views, c, t]);
        let conv = DepthwiseConv {
            weights: Tensor::leaf(conv_w, vec![filters, 1, c, 1]),
            bias: Tensor::leaf(conv_b, vec![filters]),
            depth_multiplier: m,
            max_norm: 2.0,
        };
        let h = depthwise_conv_forward(&xt, &conv).unwrap();
        let h = average_layer(&h, w).unwrap().reshape(vec![1, d]).unwrap();
        let logits = linear_forward(
            &h,
            &Tensor::leaf(fc_w, vec![classes, d]),
            &Tensor::leaf(fc_b, vec![classes]),
        )
        .unwrap();
        let mask = Tensor::leaf(vec![0.0, 1.0], vec![1, classes]);
        logits.mul(&mask).unwrap().sum_all().backward().unwrap();
        let grad = xt.grad().unwrap();

        let mut sum = 0.0;
        for i in 0..contribs.len() {
            let expect = grad[i] * (x[i] - r[i]);
            assert!(
                (contribs[i] - expect).abs() < 1e-10,
                "i {i}: {} vs {}",
                contribs[i],
                expect
            );
            sum += contribs[i];
        }
        assert!((sum - delta).abs() < 1e-9, "{sum} vs {delta}");
    }

    #[test]
    fn variance_multiplier_is_exact_per_window() {
        // Summation-to-delta through the variance step alone.
        let w = 5usize;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x: Vec<f64> = (0..w * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r: Vec<f64> = (0..w * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let step = Step::Temporal {
            kind: TemporalKind::Variance,
            w,
        };
        let vx = step.forward(&x);
        let vr = step.forward(&r);
        let m_out = vec![1.0; vx.len()];
        let m_in = step.propagate(&m_out, &x, &r);
        for j in 0..vx.len() {
            let sum: f64 = (0..w).map(|i| m_in[j * w + i] * (x[j * w + i] - r[j * w + i])).sum();
            let delta = vx[j] - vr[j];
            assert!((sum - delta).abs() < 1e-12, "window {j}: {sum} vs {delta}");
        }
    }

    fn relevance_dataset() -> (FbcNet, crate::data::EegDataset) {
        let ds = generate_synthetic(&SynthConfig {
            trials_per_class: 8,
            channels: 3,
            samples: 40,
            sample_rate_hz: 40.0,
            class_channels: vec![vec![0], vec![2]],
            band_hz: (8.0, 12.0),
            ..SynthConfig::default()
        })
        .unwrap();
        let model = tiny_model();
        (model, ds)
    }

    #[test]
    fn class_reference_commutes_with_linear_filter_bank() {
        let (model, ds) = relevance_dataset();
        let cfg = &model.config;
        let r = class_reference(&model, &ds, 0).unwrap();

        // Mean raw trial of class 0, then one multi_view.
        let members: Vec<&crate::data::EegTrial> =
            ds.trials.iter().filter(|t| t.label == 0).collect();
        let mut mean_raw = vec![0.0; cfg.channels * cfg.samples];
        for t in &members {
            for (a, v) in mean_raw.iter_mut().zip(&t.x) {
                *a += v / members.len() as f64;
            }
        }
        let direct = model
            .filter_bank
            .multi_view(&mean_raw, cfg.channels, cfg.samples, FilterMode::ZeroPhase)
            .unwrap();
        for (a, b) in r.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn class_reference_single_trial_is_its_multiview() {
        let (model, mut ds) = relevance_dataset();
        ds.trials.retain(|t| t.label == 1);
        ds.trials.truncate(1);
        // Keep one class-1 trial plus relabel nothing; class 1 has 1 trial.
        let r = class_reference(&model, &ds, 1).unwrap();
        let cfg = &model.config;
        let mv = model
            .filter_bank
            .multi_view(&ds.trials[0].x, cfg.channels, cfg.samples, cfg.filter_mode)
            .unwrap();
        assert_eq!(r, mv);
    }

    #[test]
    fn class_reference_of_opposite_trials_is_zero() {
        let (model, mut ds) = relevance_dataset();
        let x: Vec<f64> = ds.trials[0].x.clone();
        ds.trials.truncate(2);
        ds.trials[1].x = x.iter().map(|v| -v).collect();
        ds.trials[0].label = 0;
        ds.trials[1].label = 0;
        let r = class_reference(&model, &ds, 0).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_class_is_rejected() {
        let (model, mut ds) = relevance_dataset();
        ds.trials.retain(|t| t.label == 0);
        assert!(matches!(
            class_reference(&model, &ds, 1),
            Err(Error::Empty(_))
        ));
        assert!(subject_relevance(&model, &ds, 0, 1).is_err());
    }

    #[test]
    fn subject_relevance_normalizes_and_is_order_invariant() {
        let (model, mut ds) = relevance_dataset();
        let rel = subject_relevance(&model, &ds, 0, 1).unwrap();
        let total: f64 = rel.channel_band.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9, "total {total}");
        assert!(rel.channel_band.iter().all(|&v| v >= 0.0));
        let band_sum: f64 = rel.band_totals.iter().sum();
        assert!((band_sum - 1.0).abs() <= 1e-9);

        ds.trials.reverse();
        let rel2 = subject_relevance(&model, &ds, 0, 1).unwrap();
        for (a, b) in rel.channel_band.iter().zip(&rel2.channel_band) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_trial_subject_map_matches_direct_normalization() {
        let (model, mut ds) = relevance_dataset();
        // One reference trial (class 0) and one target trial (class 1).
        let ref_trial = ds.trials.iter().find(|t| t.label == 0).unwrap().clone();
        let tgt_trial = ds.trials.iter().find(|t| t.label == 1).unwrap().clone();
        ds.trials = vec![ref_trial, tgt_trial];
        let rel = subject_relevance(&model, &ds, 0, 1).unwrap();

        let cfg = &model.config;
        let reference = class_reference(&model, &ds, 0).unwrap();
        let mv = model
            .filter_bank
            .multi_view(&ds.trials[1].x, cfg.channels, cfg.samples, cfg.filter_mode)
            .unwrap();
        let map = deeplift_rescale(&model, &mv, &reference, 1, "x").unwrap();
        let total: f64 = map.per_input.iter().map(|v| v.abs()).sum();
        for b in 0..cfg.n_bands() {
            for c in 0..cfg.channels {
                let base = (b * cfg.channels + c) * cfg.samples;
                let expect: f64 = map.per_input[base..base + cfg.samples]
                    .iter()
                    .map(|v| v.abs() / total)
                    .sum();
                let got = rel.channel_band[b * cfg.channels + c];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }
}
