//! The tagging model: a CNN-transformer specific embedder, an optional
//! CNN-GRU generic embedder, a Time2Vec metadata encoder and a sigmoid head
//! over their concatenation.
//!
//! Everything is per-sample: normalisation uses group norm and weight
//! standardisation, so an output never depends on the other clips in its
//! batch.

pub mod checkpoint;
pub mod layers;
mod params;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sonotag_tensor::{Padding, Scalar, Tape, Tensor, Var};

pub use checkpoint::Checkpoint;
pub use params::{init_tensor, Bound, Init, ParamStore};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::taxonomy::{System, Taxonomy};
use layers::{EncoderWeights, GruWeights};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 1, 2 or 3.
    pub system: u32,
    /// Mel bands of the input spectrogram.
    pub n_bands: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// `(time, freq)` max-pool kernel of each conv block.
    pub pools: Vec<(usize, usize)>,
    pub groups: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_audio_layers: usize,
    pub n_meta_layers: usize,
    /// Hidden size of each GRU direction in the generic branch.
    pub gru_hidden: usize,
    pub freeze_generic: bool,
    /// Standardise each input spectrogram to zero mean, unit variance.
    pub standardize_input: bool,
    /// Bounding box mapped onto `[-1, 1]` for the location token.
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            system: 1,
            n_bands: 64,
            channels: vec![32, 64, 128],
            pools: vec![(2, 2), (2, 2), (1, 2)],
            groups: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_audio_layers: 2,
            n_meta_layers: 1,
            gru_hidden: 64,
            freeze_generic: false,
            standardize_input: true,
            lat_range: (40.4, 41.0),
            lon_range: (-74.3, -73.6),
        }
    }
}

impl ModelConfig {
    pub fn system(&self) -> Result<System> {
        System::try_from(self.system)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.system()?;
        if self.channels.is_empty() || self.channels.len() != self.pools.len() {
            return bad("model.channels and model.pools must be non-empty and of equal length".into());
        }
        if self.groups == 0 || self.channels.iter().any(|c| c % self.groups != 0) {
            return bad(format!("every conv width must be divisible by model.groups = {}", self.groups));
        }
        if self.pools.iter().any(|&(t, f)| t == 0 || f == 0) {
            return bad("pool sizes must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.d_model < 2 || self.d_ff == 0 || self.gru_hidden == 0 {
            return bad("d_model must be ≥ 2 and d_ff, gru_hidden positive".into());
        }
        if self.freq_out() == 0 {
            return bad(format!("{} bands vanish under the pooling plan", self.n_bands));
        }
        if !(self.lat_range.0 < self.lat_range.1 && self.lon_range.0 < self.lon_range.1) {
            return bad("model.lat_range and model.lon_range must be increasing".into());
        }
        Ok(())
    }

    /// Frequency bins left after pooling.
    pub fn freq_out(&self) -> usize {
        self.pools.iter().fold(self.n_bands, |f, &(_, p)| f / p)
    }

    /// Sequence length seen by the encoder for `frames` input frames.
    pub fn time_out(&self, frames: usize) -> usize {
        self.pools.iter().fold(frames, |t, &(p, _)| t / p)
    }

    /// Per-step feature width after the conv stack.
    pub fn conv_features(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.freq_out()
    }

    pub fn d_specific(&self) -> usize {
        self.d_model
    }

    pub fn d_generic(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn d_metadata(&self) -> usize {
        self.d_model
    }
}

/// Recording context of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    /// 1 to 52.
    pub week: u32,
    /// 0 to 6.
    pub day: u32,
    /// 0 to 23.
    pub hour: u32,
    pub latitude: f64,
    pub longitude: f64,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=52).contains(&self.week) || self.day > 6 || self.hour > 23 {
            return Err(Error::Metadata(format!(
                "week {} day {} hour {} out of range (1-52, 0-6, 0-23)",
                self.week, self.day, self.hour
            )));
        }
        if !(self.latitude.is_finite() && self.longitude.is_finite())
            || self.latitude.abs() > 90.0
            || self.longitude.abs() > 180.0
        {
            return Err(Error::Metadata(format!(
                "invalid coordinates ({}, {})",
                self.latitude, self.longitude
            )));
        }
        Ok(())
    }
}

/// Time2Vec periods of the hour, day and week fields.
const T2V_FIELDS: [(&str, f64); 3] = [("hour", 24.0), ("day", 7.0), ("week", 52.0)];

/// The tagging network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    system: System,
    output_dim: usize,
}

/// Result of [`Model::forward`].
pub struct Forward {
    /// Sigmoid outputs `[N, dim]`.
    pub output: Var,
    /// Attention probabilities of every audio encoder layer, `[N, heads, T', T']`.
    pub attention: Vec<Var>,
}

fn conv_shapes(prefix: &str, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let mut c_in = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        v.push((format!("{prefix}.conv{i}.weight"), vec![c, c_in, 3, 3], Init::Normal(1.0)));
        v.push((format!("{prefix}.gn{i}.gamma"), vec![c], Init::Ones));
        v.push((format!("{prefix}.gn{i}.beta"), vec![c], Init::Zeros));
        c_in = c;
    }
    v
}

fn encoder_shapes(prefix: &str, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    EncoderWeights::shapes(prefix, cfg.d_model, cfg.d_ff)
        .into_iter()
        .map(|(name, shape)| {
            let init = if name.ends_with("gamma") {
                Init::Ones
            } else if shape.len() == 2 {
                Init::Xavier
            } else {
                Init::Zeros
            };
            (name, shape, init)
        })
        .collect()
}

fn layout_dim(tax: &Taxonomy, system: System) -> usize {
    tax.layout(system).dim()
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model. Initial values depend only on
    /// `(seed, parameter name)`.
    pub fn new(config: ModelConfig, tax: &Taxonomy, seed: u64) -> Result<Self> {
        config.validate()?;
        let system = config.system()?;
        let output_dim = layout_dim(tax, system);
        let mut params = ParamStore::new();
        for (name, shape, init) in Self::parameter_plan(&config, output_dim) {
            let t = init_tensor(&shape, init, seed, &name);
            params.insert(name, t);
        }
        // Time2Vec frequencies start at harmonics of the field's period.
        for (field, period) in T2V_FIELDS {
            let k = config.d_model;
            let omega: Vec<f64> = (0..k)
                .map(|i| if i == 0 { 1.0 / period } else { 2.0 * PI * (1 + (i - 1) % 8) as f64 / period })
                .collect();
            params.insert(format!("meta.t2v.{field}.omega"), Tensor::from_f64([k], &omega)?);
        }
        if config.freeze_generic {
            params.set_frozen("generic.", true);
        }
        Ok(Self {
            config,
            params,
            system,
            output_dim,
        })
    }

    /// Rebuilds a model around existing parameters, checking every name and
    /// shape against the configuration.
    pub fn from_params(config: ModelConfig, tax: &Taxonomy, mut params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let system = config.system()?;
        let output_dim = layout_dim(tax, system);
        let plan = Self::parameter_plan(&config, output_dim);
        let mut expected: Vec<(String, Vec<usize>)> = plan.into_iter().map(|(n, s, _)| (n, s)).collect();
        for (field, _) in T2V_FIELDS {
            expected.push((format!("meta.t2v.{field}.omega"), vec![config.d_model]));
        }
        for (name, shape) in &expected {
            let p = params.get(name).map_err(|_| {
                if name.starts_with("generic.") {
                    Error::Model(format!("system {} needs generic-branch weights; {name} is missing", system.id()))
                } else {
                    Error::Model(format!("missing parameter {name}"))
                }
            })?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<_> = params
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == *n))
                .cloned()
                .collect();
            return Err(Error::Model(format!("unexpected parameters for this config: {extra:?}")));
        }
        params.set_frozen("generic.", config.freeze_generic);
        Ok(Self {
            config,
            params,
            system,
            output_dim,
        })
    }

    fn parameter_plan(cfg: &ModelConfig, output_dim: usize) -> Vec<(String, Vec<usize>, Init)> {
        let system = System::try_from(cfg.system).expect("validated");
        let d = cfg.d_model;
        let mut v = conv_shapes("spec", cfg);
        v.push(("spec.proj.weight".into(), vec![cfg.conv_features(), d], Init::Xavier));
        v.push(("spec.proj.bias".into(), vec![d], Init::Zeros));
        for j in 0..cfg.n_audio_layers {
            v.extend(encoder_shapes(&format!("spec.enc{j}"), cfg));
        }
        v.push(("spec.pool.weight".into(), vec![d, 1], Init::Xavier));
        v.push(("spec.pool.bias".into(), vec![1], Init::Zeros));

        if system.has_generic_branch() {
            v.extend(conv_shapes("generic", cfg));
            let u = 1.0 / (cfg.gru_hidden as f64).sqrt();
            for dir in ["fw", "bw"] {
                for (name, shape) in GruWeights::shapes(&format!("generic.gru.{dir}"), cfg.conv_features(), cfg.gru_hidden) {
                    v.push((name, shape, Init::Uniform(u)));
                }
            }
        }

        for (field, _) in T2V_FIELDS {
            v.push((format!("meta.t2v.{field}.phi"), vec![d], Init::Uniform(PI)));
        }
        v.push(("meta.loc.weight".into(), vec![2, d], Init::Xavier));
        v.push(("meta.loc.bias".into(), vec![d], Init::Zeros));
        v.push(("meta.type_emb".into(), vec![4, d], Init::Normal(0.02)));
        for j in 0..cfg.n_meta_layers {
            v.extend(encoder_shapes(&format!("meta.enc{j}"), cfg));
        }

        let d_total = cfg.d_specific() + cfg.d_metadata() + if system.has_generic_branch() { cfg.d_generic() } else { 0 };
        v.push(("head.weight".into(), vec![d_total, output_dim], Init::Xavier));
        v.push(("head.bias".into(), vec![output_dim], Init::Zeros));
        v
    }

    pub fn system(&self) -> System {
        self.system
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Stacks spectrograms into the `[N, 1, frames, bands]` input tensor,
    /// standardising each one when configured.
    pub fn input_batch(&self, specs: &[&Spectrogram]) -> Result<Tensor<T>> {
        let Some(first) = specs.first() else {
            return Err(Error::Model("empty batch".into()));
        };
        let (frames, bands) = first.shape();
        if bands != self.config.n_bands {
            return Err(Error::Model(format!("model expects {} bands, got {bands}", self.config.n_bands)));
        }
        if self.config.time_out(frames) == 0 {
            return Err(Error::Model(format!("{frames} frames vanish under the pooling plan")));
        }
        let mut data = Vec::with_capacity(specs.len() * frames * bands);
        for s in specs {
            if s.shape() != (frames, bands) {
                return Err(Error::Model(format!(
                    "batch mixes spectrogram shapes {:?} and {:?}",
                    (frames, bands),
                    s.shape()
                )));
            }
            let (mean, inv_std) = if self.config.standardize_input {
                let mean = s.mean() as f64;
                let var = s.values().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s.values().len() as f64;
                (mean, 1.0 / (var + 1e-10).sqrt())
            } else {
                (0.0, 1.0)
            };
            data.extend(s.values().iter().map(|&v| T::of((v as f64 - mean) * inv_std)));
        }
        Ok(Tensor::new([specs.len(), 1, frames, bands], data)?)
    }

    /// Conv blocks: WS conv, group norm, ReLU, max pool. Returns the
    /// sequence `[N, T', C·F']`.
    fn conv_stack(&self, tape: &Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &pool) in self.config.pools.iter().enumerate() {
            let w = layers::weight_standardize(tape, p.get(&format!("{prefix}.conv{i}.weight"))?, 1e-5)?;
            h = tape.conv2d(h, w, Padding::Same)?;
            let (g, b) = (p.get(&format!("{prefix}.gn{i}.gamma"))?, p.get(&format!("{prefix}.gn{i}.beta"))?);
            h = layers::group_norm(tape, h, self.config.groups, g, b, 1e-5)?;
            h = tape.max_pool2d(tape.relu(h), pool)?;
        }
        let &[n, c, t, f] = tape.shape(h).as_slice() else {
            unreachable!("conv2d keeps rank 4")
        };
        let seq = tape.transpose(h, &[0, 2, 1, 3])?;
        Ok(tape.reshape(seq, &[n, t, c * f])?)
    }

    /// Specific embedding `[N, d_model]` and the attention maps of each
    /// encoder layer.
    pub fn specific_embed(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let seq = self.conv_stack(tape, p, "spec", x)?;
        let t = tape.shape(seq)[1];
        let mut h = layers::linear(tape, seq, p.get("spec.proj.weight")?, Some(p.get("spec.proj.bias")?))?;
        let pe = tape.constant(layers::positional_encoding(t, self.config.d_model));
        h = tape.add(h, pe)?;
        let mut attention = Vec::with_capacity(self.config.n_audio_layers);
        for j in 0..self.config.n_audio_layers {
            let w = EncoderWeights::from_bound(p, &format!("spec.enc{j}"))?;
            let (out, attn) = layers::encoder_layer(tape, h, &w, self.config.n_heads)?;
            h = out;
            attention.push(attn);
        }
        let (pooled, _) = layers::attention_pool(tape, h, p.get("spec.pool.weight")?, p.get("spec.pool.bias")?)?;
        Ok((pooled, attention))
    }

    /// Generic embedding `[N, 2·gru_hidden]`: final states of a
    /// bidirectional GRU over the conv sequence.
    pub fn generic_embed(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if !self.system.has_generic_branch() {
            return Err(Error::Model(format!("system {} has no generic branch", self.system.id())));
        }
        let seq = self.conv_stack(tape, p, "generic", x)?;
        let fw = layers::gru_final_state(tape, seq, &GruWeights::from_bound(p, "generic.gru.fw")?, false)?;
        let bw = layers::gru_final_state(tape, seq, &GruWeights::from_bound(p, "generic.gru.bw")?, true)?;
        Ok(tape.concat(&[fw, bw], 1)?)
    }

    /// `[-1, 1]`-normalised `(lat, lon)` under the configured bounding box.
    pub fn normalized_location(&self, m: &MetadataRecord) -> (f64, f64) {
        let norm = |v: f64, (lo, hi): (f64, f64)| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
        (norm(m.latitude, self.config.lat_range), norm(m.longitude, self.config.lon_range))
    }

    /// Metadata embedding `[N, d_model]`: four tokens (hour, day, week,
    /// location) plus type embeddings, encoder layers, mean over tokens.
    pub fn metadata_embed(&self, tape: &Tape<T>, p: &Bound, meta: &[MetadataRecord]) -> Result<Var> {
        let n = meta.len();
        let d = self.config.d_model;
        for m in meta {
            m.validate()?;
        }
        let column = |f: &dyn Fn(&MetadataRecord) -> f64| -> Result<Var> {
            let data: Vec<T> = meta.iter().map(|m| T::of(f(m))).collect();
            Ok(tape.constant(Tensor::new([n, 1], data)?))
        };
        let mut tokens = Vec::with_capacity(4);
        for (field, _) in T2V_FIELDS {
            let tau = column(&|m| match field {
                "hour" => m.hour as f64,
                "day" => m.day as f64,
                _ => m.week as f64,
            })?;
            let omega = p.get(&format!("meta.t2v.{field}.omega"))?;
            let phi = p.get(&format!("meta.t2v.{field}.phi"))?;
            tokens.push(layers::time2vec(tape, tau, omega, phi)?);
        }
        let loc: Vec<T> = meta
            .iter()
            .flat_map(|m| {
                let (a, b) = self.normalized_location(m);
                [T::of(a), T::of(b)]
            })
            .collect();
        let loc = tape.constant(Tensor::new([n, 2], loc)?);
        tokens.push(layers::linear(tape, loc, p.get("meta.loc.weight")?, Some(p.get("meta.loc.bias")?))?);
        let tokens = tokens
            .into_iter()
            .map(|t| tape.reshape(t, &[n, 1, d]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut h = tape.add(tape.concat(&tokens, 1)?, p.get("meta.type_emb")?)?;
        for j in 0..self.config.n_meta_layers {
            let w = EncoderWeights::from_bound(p, &format!("meta.enc{j}"))?;
            h = layers::encoder_layer(tape, h, &w, self.config.n_heads)?.0;
        }
        Ok(tape.mean(h, 1)?)
    }

    /// Full forward pass on `x: [N, 1, frames, bands]`.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, x: Var, meta: &[MetadataRecord]) -> Result<Forward> {
        let n = tape.shape(x)[0];
        if meta.len() != n {
            return Err(Error::Model(format!("{n} spectrograms but {} metadata records", meta.len())));
        }
        let (e_s, attention) = self.specific_embed(tape, p, x)?;
        let mut parts = vec![e_s];
        if self.system.has_generic_branch() {
            parts.push(self.generic_embed(tape, p, x)?);
        }
        parts.push(self.metadata_embed(tape, p, meta)?);
        let joined = tape.concat(&parts, 1)?;
        let logits = layers::linear(tape, joined, p.get("head.weight")?, Some(p.get("head.bias")?))?;
        Ok(Forward {
            output: tape.sigmoid(logits),
            attention,
        })
    }

    /// Inference on a batch of clips; one row of `dim` probabilities each.
    pub fn predict(&self, specs: &[&Spectrogram], meta: &[MetadataRecord]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(self.input_batch(specs)?);
        let out = self.forward(&tape, &bound, x, meta)?.output;
        let v = tape.value(out);
        Ok(v.data().chunks(self.output_dim).map(|r| r.iter().map(|x| x.f64()).collect()).collect())
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and smoke tests:
    /// 8 bands, two conv blocks, `d_model = 8`.
    pub fn tiny(system: u32) -> Self {
        Self {
            system,
            n_bands: 8,
            channels: vec![4, 4],
            pools: vec![(2, 2), (2, 2)],
            groups: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_audio_layers: 1,
            n_meta_layers: 1,
            gru_hidden: 3,
            ..Self::default()
        }
    }
}

/// Worst finite-difference discrepancy over the model parameters.
#[derive(Clone, Debug, Default)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of parameter elements compared.
    pub checked: usize,
}

/// Compares backpropagated gradients of the training loss against central
/// differences for every trainable parameter element (or at most
/// `opts.max_elements` evenly spaced ones per tensor).
pub fn gradient_check(
    model: &Model<f64>,
    tax: &Taxonomy,
    input: &Tensor<f64>,
    meta: &[MetadataRecord],
    targets: &[crate::loss::TargetBundle],
    opts: sonotag_tensor::GradCheckOptions,
) -> Result<ModelGradCheck> {
    let layout = tax.layout(model.system());
    let weights = crate::loss::LossWeights::default();
    let loss_of = |m: &Model<f64>| -> Result<(Tape<f64>, Bound, Var)> {
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let x = tape.constant(input.clone());
        let out = m.forward(&tape, &bound, x, meta)?.output;
        let loss = crate::loss::joint_loss(&tape, tax, &layout, out, targets, weights)?.total;
        Ok((tape, bound, loss))
    };
    let (tape, bound, loss) = loss_of(model)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.gradients(&model.params, &grads);
    drop(tape);

    let mut work = model.clone();
    let mut report = ModelGradCheck::default();
    for (name, grad) in &analytic {
        let n = grad.len();
        let stride = match opts.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = model.params.get(name)?.data()[e];
            let mut eval = |v: f64| -> Result<f64> {
                work.params.get_mut(name)?.data_mut()[e] = v;
                let (tape, _, loss) = loss_of(&work)?;
                let l = tape.value(loss).item();
                Ok(l)
            };
            let plus = eval(orig + opts.step)?;
            let minus = eval(orig - opts.step)?;
            work.params.get_mut(name)?.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[e];
            let err = sonotag_tensor::gradcheck::relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
