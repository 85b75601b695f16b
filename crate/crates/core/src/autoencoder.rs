//! Tied-weight denoising autoencoders and greedy stack training.
//!
//! A layer holds one weight matrix W (out × in) plus separate encoder and
//! decoder biases; the decoder always applies Wᵀ. Training corrupts each
//! input freshly on every presentation, reconstructs, and descends the
//! mean squared reconstruction error plus an L2 penalty on W. Stacks train
//! greedily: each layer learns to reconstruct the previous layer's clean
//! codes, never seeing gradients from above.
//!
//! All training is sequential and seeded, so a spec reproduces parameters
//! bit for bit. Finished parameters are rounded through f32, making the
//! in-memory model identical to its serialized round trip.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Sigmoid => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Gaussian,
    Masking,
    SaltPepper,
}

/// How inputs are destroyed before encoding. `strength` is the noise
/// standard deviation for gaussian corruption and the per-component
/// corruption probability for masking and salt-and-pepper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub strength: f64,
}

impl CorruptionSpec {
    pub fn gaussian(strength: f64) -> Self {
        CorruptionSpec { kind: CorruptionKind::Gaussian, strength }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0) || !self.strength.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "corruption strength must be finite and non-negative, got {}",
                self.strength
            )));
        }
        if self.kind != CorruptionKind::Gaussian && self.strength > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "corruption fraction must be at most 1, got {}",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Corrupt a vector, using `lo`/`hi` as the salt-and-pepper target values.
pub fn corrupt_with_bounds(
    p: &[f64],
    spec: &CorruptionSpec,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut out = p.to_vec();
    if spec.strength == 0.0 {
        return out;
    }
    match spec.kind {
        CorruptionKind::Gaussian => {
            for v in &mut out {
                let n: f64 = rng.sample(StandardNormal);
                *v += spec.strength * n;
            }
        }
        CorruptionKind::Masking => {
            for v in &mut out {
                if rng.random::<f64>() < spec.strength {
                    *v = 0.0;
                }
            }
        }
        CorruptionKind::SaltPepper => {
            for v in &mut out {
                if rng.random::<f64>() < spec.strength {
                    *v = if rng.random::<f64>() < 0.5 { lo } else { hi };
                }
            }
        }
    }
    out
}

/// Corrupt a vector. Salt-and-pepper extremes are taken from the vector
/// itself; training uses dataset-wide extremes via [`corrupt_with_bounds`].
pub fn corrupt(p: &[f64], spec: &CorruptionSpec, rng: &mut impl Rng) -> Vec<f64> {
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    corrupt_with_bounds(p, spec, lo, hi, rng)
}

/// One tied autoencoder layer: encode with W, decode with Wᵀ.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias_enc: Vec<f64>,
    pub bias_dec: Vec<f64>,
    pub activation: Activation,
    /// Decoder weight is structurally Wᵀ; kept as a stored fact so model
    /// files remain honest if untied layers ever appear.
    pub tied: bool,
}

impl AutoencoderLayer {
    /// Fan-based symmetric init: W ~ U(±sqrt(6/(in+out))), zero biases.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dimensions must be positive".into()));
        }
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(AutoencoderLayer {
            in_dim,
            out_dim,
            weights,
            bias_enc: vec![0.0; out_dim],
            bias_dec: vec![0.0; in_dim],
            activation,
            tied: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(Error::DimensionMismatch {
                context: "autoencoder weights",
                expected: self.in_dim * self.out_dim,
                got: self.weights.len(),
            });
        }
        if self.bias_enc.len() != self.out_dim {
            return Err(Error::DimensionMismatch {
                context: "encoder bias",
                expected: self.out_dim,
                got: self.bias_enc.len(),
            });
        }
        if self.bias_dec.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                context: "decoder bias",
                expected: self.in_dim,
                got: self.bias_dec.len(),
            });
        }
        Ok(())
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weights)
            .expect("weight shape is validated")
    }

    /// q = f(W p̃ + b)
    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                context: "encode input",
                expected: self.in_dim,
                got: input.len(),
            });
        }
        let x = ArrayView1::from(input);
        let mut z = self.w().dot(&x);
        for (v, b) in z.iter_mut().zip(&self.bias_enc) {
            *v = self.activation.apply(*v + b);
        }
        Ok(z.to_vec())
    }

    /// r = f(Wᵀ q + b')
    pub fn decode(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.out_dim {
            return Err(Error::DimensionMismatch {
                context: "decode input",
                expected: self.out_dim,
                got: code.len(),
            });
        }
        let q = ArrayView1::from(code);
        let mut z = self.w().t().dot(&q);
        for (v, b) in z.iter_mut().zip(&self.bias_dec) {
            *v = self.activation.apply(*v + b);
        }
        Ok(z.to_vec())
    }

    /// Round all parameters through f32 so the in-memory model equals its
    /// serialized form exactly.
    pub fn canonicalize(&mut self) {
        for v in self.weights.iter_mut().chain(&mut self.bias_enc).chain(&mut self.bias_dec) {
            *v = *v as f32 as f64;
        }
    }
}

/// Gradient of the layer loss. Same shapes as the parameters, flat.
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub bias_enc: Vec<f64>,
    pub bias_dec: Vec<f64>,
}

/// Batch forward pass plus loss: (1/(2G))·Σ‖r − p‖² + (λ/2)·ΣW².
struct BatchPass {
    p_tilde: Array2<f64>,
    q: Array2<f64>,
    r: Array2<f64>,
    loss: f64,
}

fn batch_forward(layer: &AutoencoderLayer, clean: &Array2<f64>, p_tilde: Array2<f64>, weight_decay: f64) -> BatchPass {
    let g = clean.nrows() as f64;
    let w = layer.w();
    let mut q = p_tilde.dot(&w.t());
    for mut row in q.rows_mut() {
        for (v, b) in row.iter_mut().zip(&layer.bias_enc) {
            *v = layer.activation.apply(*v + b);
        }
    }
    let mut r = q.dot(&w);
    for mut row in r.rows_mut() {
        for (v, b) in row.iter_mut().zip(&layer.bias_dec) {
            *v = layer.activation.apply(*v + b);
        }
    }
    let sse: f64 = r
        .iter()
        .zip(clean.iter())
        .map(|(&ri, &pi)| {
            let d = ri - pi;
            d * d
        })
        .sum();
    let l2: f64 = layer.weights.iter().map(|&w| w * w).sum();
    let loss = sse / (2.0 * g) + weight_decay / 2.0 * l2;
    BatchPass { p_tilde, q, r, loss }
}

/// Backward pass for the tied layer; gradients averaged over the batch.
fn batch_gradients(
    layer: &AutoencoderLayer,
    clean: &Array2<f64>,
    pass: &BatchPass,
    weight_decay: f64,
) -> LayerGradients {
    let g = clean.nrows() as f64;
    let act = layer.activation;
    // d2 = (r − p) ⊙ f'(z2), expressed through outputs.
    let mut d2 = &pass.r - clean;
    d2.zip_mut_with(&pass.r, |d, &y| *d *= act.derivative_from_output(y));
    // d1 = (d2 W ᵀ... chain through z2 = q W: dL/dq = d2 Wᵀ) ⊙ f'(z1).
    let w = layer.w();
    let mut d1 = d2.dot(&w.t());
    d1.zip_mut_with(&pass.q, |d, &y| *d *= act.derivative_from_output(y));

    // Tied weight gets both contributions: decode (qᵀ d2) and encode (d1ᵀ p̃).
    let mut grad_w = pass.q.t().dot(&d2);
    grad_w += &d1.t().dot(&pass.p_tilde);
    grad_w.mapv_inplace(|v| v / g);
    let wv = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &layer.weights).unwrap();
    grad_w.zip_mut_with(&wv, |gw, &wi| *gw += weight_decay * wi);

    let bias_enc = d1.mean_axis(ndarray::Axis(0)).expect("nonempty batch");
    let bias_dec = d2.mean_axis(ndarray::Axis(0)).expect("nonempty batch");
    LayerGradients {
        weights: grad_w.into_raw_vec_and_offset().0,
        bias_enc: bias_enc.to_vec(),
        bias_dec: bias_dec.to_vec(),
    }
}

fn rows_to_array(rows: &[&[f64]], dim: usize) -> Array2<f64> {
    let mut a = Array2::zeros((rows.len(), dim));
    for (k, row) in rows.iter().enumerate() {
        a.row_mut(k).assign(&ArrayView1::from(*row));
    }
    a
}

/// Loss of one corrupted presentation of `batch`: corruption is drawn from
/// `rng`, reconstruction is compared against the clean inputs.
pub fn layer_loss(
    layer: &AutoencoderLayer,
    batch: &[Vec<f64>],
    spec: &TrainSpec,
    rng: &mut impl Rng,
) -> Result<f64> {
    layer.validate()?;
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss of an empty batch".into()));
    }
    for v in batch {
        if v.len() != layer.in_dim {
            return Err(Error::DimensionMismatch {
                context: "loss batch",
                expected: layer.in_dim,
                got: v.len(),
            });
        }
    }
    let (lo, hi) = data_bounds(batch);
    let refs: Vec<&[f64]> = batch.iter().map(|v| v.as_slice()).collect();
    let clean = rows_to_array(&refs, layer.in_dim);
    let corrupted: Vec<Vec<f64>> =
        batch.iter().map(|p| corrupt_with_bounds(p, &spec.corruption, lo, hi, rng)).collect();
    let refs_c: Vec<&[f64]> = corrupted.iter().map(|v| v.as_slice()).collect();
    let p_tilde = rows_to_array(&refs_c, layer.in_dim);
    Ok(batch_forward(layer, &clean, p_tilde, spec.weight_decay).loss)
}

/// Analytic gradient of the layer loss for a fixed corrupted batch.
/// Exposed so training can be verified against finite differences.
pub fn layer_loss_gradients(
    layer: &AutoencoderLayer,
    clean_batch: &[Vec<f64>],
    corrupted_batch: &[Vec<f64>],
    weight_decay: f64,
) -> Result<(f64, LayerGradients)> {
    layer.validate()?;
    if clean_batch.is_empty() || clean_batch.len() != corrupted_batch.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient needs matching nonempty batches, got {} clean and {} corrupted",
            clean_batch.len(),
            corrupted_batch.len()
        )));
    }
    for v in clean_batch.iter().chain(corrupted_batch) {
        if v.len() != layer.in_dim {
            return Err(Error::DimensionMismatch {
                context: "gradient batch",
                expected: layer.in_dim,
                got: v.len(),
            });
        }
    }
    let refs: Vec<&[f64]> = clean_batch.iter().map(|v| v.as_slice()).collect();
    let clean = rows_to_array(&refs, layer.in_dim);
    let refs_c: Vec<&[f64]> = corrupted_batch.iter().map(|v| v.as_slice()).collect();
    let p_tilde = rows_to_array(&refs_c, layer.in_dim);
    let pass = batch_forward(layer, &clean, p_tilde, weight_decay);
    let grads = batch_gradients(layer, &clean, &pass, weight_decay);
    Ok((pass.loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    /// λ in the loss; applied to the layer currently being trained.
    pub weight_decay: f64,
    pub corruption: CorruptionSpec,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub activation: Activation,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 500,
            learning_rate: 0.001,
            weight_decay: 0.005,
            corruption: CorruptionSpec::gaussian(0.1),
            batch_size: 32,
            rng_seed: 0,
            activation: Activation::Linear,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        self.corruption.validate()
    }
}

fn data_bounds(data: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in data {
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo, hi)
}

/// Train one denoising layer by seeded mini-batch gradient descent.
/// Deterministic: the sample order reshuffles and the corruption redraws
/// every epoch, all from one sequential stream.
pub fn train_layer(
    data: &[Vec<f64>],
    in_dim: usize,
    hidden_dim: usize,
    spec: &TrainSpec,
) -> Result<AutoencoderLayer> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    for v in data {
        if v.len() != in_dim {
            return Err(Error::DimensionMismatch {
                context: "training vector",
                expected: in_dim,
                got: v.len(),
            });
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.rng_seed);
    let mut layer = AutoencoderLayer::init(in_dim, hidden_dim, spec.activation, &mut rng)?;
    let (lo, hi) = data_bounds(data);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for (batch_index, chunk) in order.chunks(spec.batch_size).enumerate() {
            let refs: Vec<&[f64]> = chunk.iter().map(|&k| data[k].as_slice()).collect();
            let clean = rows_to_array(&refs, in_dim);
            let corrupted: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&k| corrupt_with_bounds(&data[k], &spec.corruption, lo, hi, &mut rng))
                .collect();
            let refs_c: Vec<&[f64]> = corrupted.iter().map(|v| v.as_slice()).collect();
            let p_tilde = rows_to_array(&refs_c, in_dim);

            let pass = batch_forward(&layer, &clean, p_tilde, spec.weight_decay);
            if !pass.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index, value: pass.loss });
            }
            let grads = batch_gradients(&layer, &clean, &pass, spec.weight_decay);
            let lr = spec.learning_rate;
            for (w, gw) in layer.weights.iter_mut().zip(&grads.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias_enc.iter_mut().zip(&grads.bias_enc) {
                *b -= lr * gb;
            }
            for (b, gb) in layer.bias_dec.iter_mut().zip(&grads.bias_dec) {
                *b -= lr * gb;
            }
        }
    }
    layer.canonicalize();
    Ok(layer)
}

/// Stack of tied layers; encode runs first-to-last, decode last-to-first.
#[derive(Clone, Debug, PartialEq)]
pub struct SdaModel {
    pub layers: Vec<AutoencoderLayer>,
}

impl SdaModel {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("stack needs at least one layer".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    context: "stacked layer chain",
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(())
    }

    /// [input dim, hidden dims...]: the sizes the stack chains through.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn code_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut v = input.to_vec();
        for layer in &self.layers {
            v = layer.encode(&v)?;
        }
        Ok(v)
    }

    pub fn decode(&self, code: &[f64]) -> Result<Vec<f64>> {
        let mut v = code.to_vec();
        for layer in self.layers.iter().rev() {
            v = layer.decode(&v)?;
        }
        Ok(v)
    }
}

/// Greedy layer-wise training: layer l fits the clean codes of layer l−1.
/// `layer_sizes` = [input dim, hidden dims...]. Per-layer seeds derive from
/// the spec seed plus the layer index.
pub fn train_stack(data: &[Vec<f64>], layer_sizes: &[usize], spec: &TrainSpec) -> Result<SdaModel> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "stack needs an input size and at least one hidden size, got {layer_sizes:?}"
        )));
    }
    let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
    let mut current: Vec<Vec<f64>> = data.to_vec();
    for (l, pair) in layer_sizes.windows(2).enumerate() {
        let layer_spec = TrainSpec { rng_seed: spec.rng_seed.wrapping_add(l as u64), ..spec.clone() };
        let layer = train_layer(&current, pair[0], pair[1], &layer_spec)?;
        current = current.iter().map(|v| layer.encode(v)).collect::<Result<_>>()?;
        layers.push(layer);
    }
    let model = SdaModel { layers };
    model.validate()?;
    Ok(model)
}

pub const SDA_MAGIC: &[u8; 4] = b"SDAM";
pub const SDA_VERSION: u16 = 1;

pub fn sda_to_bytes(model: &SdaModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(SDA_MAGIC);
    w.u16(SDA_VERSION);
    w.u32(model.layers.len() as u32);
    for layer in &model.layers {
        w.u32(layer.in_dim as u32);
        w.u32(layer.out_dim as u32);
        w.u8(layer.activation.tag());
        w.u8(layer.tied as u8);
        for &v in &layer.weights {
            w.f32(v as f32);
        }
        for &v in &layer.bias_enc {
            w.f32(v as f32);
        }
        for &v in &layer.bias_dec {
            w.f32(v as f32);
        }
    }
    w.into_bytes()
}

pub fn read_sda_bytes(data: &[u8]) -> Result<SdaModel> {
    let mut r = Reader::new(data, "autoencoder stack");
    r.magic(SDA_MAGIC)?;
    let version = r.u16()?;
    if version != SDA_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let n_layers = r.count(1024, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.count(1 << 24, "input dim")?;
        let out_dim = r.count(1 << 24, "output dim")?;
        let activation =
            Activation::from_tag(r.u8()?).ok_or_else(|| r.error("unknown activation tag"))?;
        let tied = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(r.error(format!("bad tied flag {t}"))),
        };
        if !tied {
            return Err(r.error("untied layers are not supported"));
        }
        let mut weights = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..in_dim * out_dim {
            weights.push(r.f32()? as f64);
        }
        let mut bias_enc = Vec::with_capacity(out_dim);
        for _ in 0..out_dim {
            bias_enc.push(r.f32()? as f64);
        }
        let mut bias_dec = Vec::with_capacity(in_dim);
        for _ in 0..in_dim {
            bias_dec.push(r.f32()? as f64);
        }
        layers.push(AutoencoderLayer { in_dim, out_dim, weights, bias_enc, bias_dec, activation, tied });
    }
    r.finish()?;
    let model = SdaModel { layers };
    model.validate()?;
    Ok(model)
}

pub fn save_sda(path: &Path, model: &SdaModel) -> Result<()> {
    std::fs::write(path, sda_to_bytes(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_sda(path: &Path) -> Result<SdaModel> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_sda_bytes(&data)
}
