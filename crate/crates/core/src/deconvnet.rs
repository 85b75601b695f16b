//! Convolution/deconvolution network: a strided conv encoder, a
//! fully-connected bottleneck, a transposed-convolution decoder, and a
//! per-pixel softmax head trained with cross-entropy.
//!
//! Transposed convolution is implemented as the exact adjoint of the
//! strided convolution: where conv gathers input elements into one output
//! cell, deconv scatters one input element across the output. The two are
//! tied by ⟨conv(x), y⟩ = ⟨x, deconv(y)⟩, which doubles as the correctness
//! oracle for both.
//!
//! Zero "same" padding keeps stride-2 layers halving the spatial dims;
//! each deconv layer records its exact output size, so odd sizes round
//! trip through the network too.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{AugmentedOccupancyGrid, QuantizedPog};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative through the activation output (relu output 0 gates to 0).
    fn mask(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding chosen so out = ceil(in / stride).
    Same,
    /// No padding; out = (in - k)/stride + 1.
    Valid,
}

/// Output size and leading pad for one spatial dimension.
fn out_and_pad(in_dim: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if in_dim == 0 || k == 0 || stride == 0 {
        return Err(Error::InvalidConfig("convolution dims and stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if in_dim < k {
                return Err(Error::InvalidConfig(format!(
                    "input {in_dim} smaller than kernel {k} without padding"
                )));
            }
            Ok(((in_dim - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = in_dim.div_ceil(stride);
            let span = (out - 1) * stride + k;
            Ok((out, span.saturating_sub(in_dim) / 2))
        }
    }
}

/// Kernels are A×k₁×k₂×D: A output feature maps over D input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernels: Array4<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(
        kernels: Array4<f64>,
        bias: Vec<f64>,
        stride: usize,
        padding: Padding,
        activation: Activation,
    ) -> Result<Self> {
        let (a, k1, k2, _) = kernels.dim();
        if a == 0 || k1 == 0 || k2 == 0 || stride == 0 {
            return Err(Error::InvalidConfig("empty kernel or zero stride".into()));
        }
        if bias.len() != a {
            return Err(Error::DimensionMismatch {
                context: "conv bias",
                expected: a,
                got: bias.len(),
            });
        }
        Ok(ConvLayer { kernels, bias, stride, padding, activation })
    }

    fn init(
        out_ch: usize,
        k: usize,
        in_ch: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = k * k * in_ch + out_ch;
        let bound = (6.0 / fan as f64).sqrt();
        let kernels =
            Array4::from_shape_fn((out_ch, k, k, in_ch), |_| rng.random_range(-bound..=bound));
        ConvLayer { kernels, bias: vec![0.0; out_ch], stride: 2, padding: Padding::Same, activation }
    }
}

/// Transposed convolution layer. `kernels` has the shape of the convolution
/// this layer is the adjoint of: A×k₁×k₂×D where A is this layer's INPUT
/// channel count and D its OUTPUT channel count. `out_h`/`out_w` pin the
/// output size (a strided conv maps several input sizes onto one output
/// size, so the inverse direction must choose).
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    pub kernels: Array4<f64>,
    /// One bias per output channel (length D).
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    pub out_h: usize,
    pub out_w: usize,
}

impl DeconvLayer {
    pub fn new(
        kernels: Array4<f64>,
        bias: Vec<f64>,
        stride: usize,
        padding: Padding,
        activation: Activation,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        let (a, k1, k2, d) = kernels.dim();
        if a == 0 || k1 == 0 || k2 == 0 || stride == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidConfig("empty kernel, stride or output size".into()));
        }
        if bias.len() != d {
            return Err(Error::DimensionMismatch {
                context: "deconv bias",
                expected: d,
                got: bias.len(),
            });
        }
        Ok(DeconvLayer { kernels, bias, stride, padding, activation, out_h, out_w })
    }

    /// Input spatial size this layer expects: the conv output for its own
    /// output size.
    pub fn in_dims(&self) -> Result<(usize, usize)> {
        let (_, k1, k2, _) = self.kernels.dim();
        let (h, _) = out_and_pad(self.out_h, k1, self.stride, self.padding)?;
        let (w, _) = out_and_pad(self.out_w, k2, self.stride, self.padding)?;
        Ok((h, w))
    }

    fn init(
        in_ch: usize,
        k: usize,
        out_ch: usize,
        activation: Activation,
        out_h: usize,
        out_w: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = k * k * out_ch + in_ch;
        let bound = (6.0 / fan as f64).sqrt();
        let kernels =
            Array4::from_shape_fn((in_ch, k, k, out_ch), |_| rng.random_range(-bound..=bound));
        DeconvLayer {
            kernels,
            bias: vec![0.0; out_ch],
            stride: 2,
            padding: Padding::Same,
            activation,
            out_h,
            out_w,
        }
    }
}

/// Strided convolution core: gather into (out_h, out_w, A). Accumulation
/// runs in ascending (m, n, d) order, the column order of the equivalent
/// sparse matrix, so both paths agree bit for bit.
fn conv_gather(x: &Array3<f64>, kernels: &Array4<f64>, stride: usize, padding: Padding) -> Result<Array3<f64>> {
    let (h, w, d_in) = x.dim();
    let (a_ch, k1, k2, d_k) = kernels.dim();
    if d_in != d_k {
        return Err(Error::DimensionMismatch { context: "conv channels", expected: d_k, got: d_in });
    }
    let (out_h, pad_t) = out_and_pad(h, k1, stride, padding)?;
    let (out_w, pad_l) = out_and_pad(w, k2, stride, padding)?;
    let mut y = Array3::zeros((out_h, out_w, a_ch));
    for oi in 0..out_h {
        for oj in 0..out_w {
            for a in 0..a_ch {
                let mut acc = 0.0;
                for m in 0..k1 {
                    let ii = (oi * stride + m) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for n in 0..k2 {
                        let jj = (oj * stride + n) as isize - pad_l as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        for d in 0..d_in {
                            acc += kernels[[a, m, n, d]] * x[[ii as usize, jj as usize, d]];
                        }
                    }
                }
                y[[oi, oj, a]] = acc;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`conv_gather`]: scatter (in_h, in_w, A) onto (out_h, out_w, D).
/// Contributions accumulate in ascending input order, the row order of the
/// transposed sparse matrix.
fn conv_scatter(
    g: &Array3<f64>,
    kernels: &Array4<f64>,
    stride: usize,
    padding: Padding,
    out_h: usize,
    out_w: usize,
) -> Result<Array3<f64>> {
    let (in_h, in_w, a_in) = g.dim();
    let (a_ch, k1, k2, d_ch) = kernels.dim();
    if a_in != a_ch {
        return Err(Error::DimensionMismatch { context: "deconv channels", expected: a_ch, got: a_in });
    }
    let (expect_h, pad_t) = out_and_pad(out_h, k1, stride, padding)?;
    let (expect_w, pad_l) = out_and_pad(out_w, k2, stride, padding)?;
    if expect_h != in_h || expect_w != in_w {
        return Err(Error::ShapeMismatch {
            expected: format!("{expect_h}x{expect_w}"),
            got: format!("{in_h}x{in_w}"),
        });
    }
    let mut y = Array3::zeros((out_h, out_w, d_ch));
    for oi in 0..in_h {
        for oj in 0..in_w {
            for a in 0..a_ch {
                let v = g[[oi, oj, a]];
                for m in 0..k1 {
                    let ii = (oi * stride + m) as isize - pad_t as isize;
                    if ii < 0 || ii >= out_h as isize {
                        continue;
                    }
                    for n in 0..k2 {
                        let jj = (oj * stride + n) as isize - pad_l as isize;
                        if jj < 0 || jj >= out_w as isize {
                            continue;
                        }
                        for d in 0..d_ch {
                            y[[ii as usize, jj as usize, d]] += kernels[[a, m, n, d]] * v;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Kernel gradient shared by conv (x = layer input, g = output grad) and
/// deconv (x = output grad, g = layer input) backward passes.
fn conv_kernel_grad(
    x: &Array3<f64>,
    g: &Array3<f64>,
    stride: usize,
    padding: Padding,
    k1: usize,
    k2: usize,
) -> Result<Array4<f64>> {
    let (h, w, d_ch) = x.dim();
    let (out_h, out_w, a_ch) = g.dim();
    let (expect_h, pad_t) = out_and_pad(h, k1, stride, padding)?;
    let (expect_w, pad_l) = out_and_pad(w, k2, stride, padding)?;
    if expect_h != out_h || expect_w != out_w {
        return Err(Error::ShapeMismatch {
            expected: format!("{expect_h}x{expect_w}"),
            got: format!("{out_h}x{out_w}"),
        });
    }
    let mut gk = Array4::zeros((a_ch, k1, k2, d_ch));
    for oi in 0..out_h {
        for oj in 0..out_w {
            for a in 0..a_ch {
                let gv = g[[oi, oj, a]];
                if gv == 0.0 {
                    continue;
                }
                for m in 0..k1 {
                    let ii = (oi * stride + m) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for n in 0..k2 {
                        let jj = (oj * stride + n) as isize - pad_l as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        for d in 0..d_ch {
                            gk[[a, m, n, d]] += gv * x[[ii as usize, jj as usize, d]];
                        }
                    }
                }
            }
        }
    }
    Ok(gk)
}

/// Feature maps per Eq.-5 style gather, then bias and activation.
pub fn conv_forward(layer: &ConvLayer, input: &Array3<f64>) -> Result<Array3<f64>> {
    let mut y = conv_gather(input, &layer.kernels, layer.stride, layer.padding)?;
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
    }
    Ok(y)
}

/// Transposed convolution: multiply by the adjoint of the layer's
/// convolution, then bias and activation.
pub fn deconv_forward(layer: &DeconvLayer, input: &Array3<f64>) -> Result<Array3<f64>> {
    let mut y = conv_scatter(
        input,
        &layer.kernels,
        layer.stride,
        layer.padding,
        layer.out_h,
        layer.out_w,
    )?;
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
    }
    Ok(y)
}

/// Explicit matrix S with vec(output) = S · vec(input), both vectorized
/// row-major with channels innermost. Test oracle for small cases.
pub fn build_sparse_conv_matrix(
    kernels: &Array4<f64>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    padding: Padding,
) -> Result<Array2<f64>> {
    let (a_ch, k1, k2, d_ch) = kernels.dim();
    let (out_h, pad_t) = out_and_pad(in_h, k1, stride, padding)?;
    let (out_w, pad_l) = out_and_pad(in_w, k2, stride, padding)?;
    let mut s = Array2::zeros((out_h * out_w * a_ch, in_h * in_w * d_ch));
    for oi in 0..out_h {
        for oj in 0..out_w {
            for a in 0..a_ch {
                let row = (oi * out_w + oj) * a_ch + a;
                for m in 0..k1 {
                    let ii = (oi * stride + m) as isize - pad_t as isize;
                    if ii < 0 || ii >= in_h as isize {
                        continue;
                    }
                    for n in 0..k2 {
                        let jj = (oj * stride + n) as isize - pad_l as isize;
                        if jj < 0 || jj >= in_w as isize {
                            continue;
                        }
                        for d in 0..d_ch {
                            let col = (ii as usize * in_w + jj as usize) * d_ch + d;
                            s[[row, col]] = kernels[[a, m, n, d]];
                        }
                    }
                }
            }
        }
    }
    Ok(s)
}

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
pub fn pixel_softmax(logits: &Array3<f64>) -> Result<Array3<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = logits.clone();
    for mut pixel in out.rows_mut() {
        let max = pixel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in pixel.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in pixel.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

const LOG_FLOOR: f64 = 1e-12;

/// Mean over pixels of −log p(true class), with the log clamped so a
/// saturated wrong prediction stays finite.
pub fn cross_entropy_loss(probs: &Array3<f64>, classes: &[u8]) -> Result<f64> {
    let (h, w, c) = probs.dim();
    if classes.len() != h * w {
        return Err(Error::DimensionMismatch {
            context: "cross-entropy targets",
            expected: h * w,
            got: classes.len(),
        });
    }
    let mut total = 0.0;
    for (pixel, &class) in probs.rows().into_iter().zip(classes) {
        if (class as usize) >= c {
            return Err(Error::InvalidArgument(format!(
                "class {class} outside the {c}-class head"
            )));
        }
        total -= pixel[class as usize].max(LOG_FLOOR).ln();
    }
    Ok(total / (h * w) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub rows: usize,
    pub cols: usize,
    pub in_channels: usize,
    /// Feature maps per conv/deconv layer (A and B).
    pub features: usize,
    pub kernel: usize,
    pub n_classes: usize,
    pub rng_seed: u64,
}

impl ConvNetConfig {
    /// Feature count and kernel default to 20 and 3×3; six-level class head.
    pub fn new(rows: usize, cols: usize, in_channels: usize) -> Self {
        ConvNetConfig { rows, cols, in_channels, features: 20, kernel: 3, n_classes: 6, rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig("input shape must be positive".into()));
        }
        if self.features == 0 || self.kernel == 0 {
            return Err(Error::InvalidConfig("features and kernel must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Encoder (2 strided convs), fully-connected bottleneck, decoder (2
/// transposed convs), per-pixel softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetModel {
    pub config: ConvNetConfig,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    /// Square matrix on the flattened conv2 output, row-major out×in.
    pub fc_weights: Array2<f64>,
    pub fc_bias: Vec<f64>,
    pub deconv1: DeconvLayer,
    pub deconv2: DeconvLayer,
}

impl ConvNetModel {
    pub fn init(config: &ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.rng_seed);
        let (rows, cols, ch) = (config.rows, config.cols, config.in_channels);
        let (a, k, c) = (config.features, config.kernel, config.n_classes);
        let (h1, _) = out_and_pad(rows, k, 2, Padding::Same)?;
        let (w1, _) = out_and_pad(cols, k, 2, Padding::Same)?;
        let (h2, _) = out_and_pad(h1, k, 2, Padding::Same)?;
        let (w2, _) = out_and_pad(w1, k, 2, Padding::Same)?;
        let flat = h2 * w2 * a;
        let bound = (6.0 / (flat + flat) as f64).sqrt();
        let model = ConvNetModel {
            config: config.clone(),
            conv1: ConvLayer::init(a, k, ch, Activation::Relu, &mut rng),
            conv2: ConvLayer::init(a, k, a, Activation::Relu, &mut rng),
            fc_weights: Array2::from_shape_fn((flat, flat), |_| rng.random_range(-bound..=bound)),
            fc_bias: vec![0.0; flat],
            deconv1: DeconvLayer::init(a, k, a, Activation::Relu, h1, w1, &mut rng),
            deconv2: DeconvLayer::init(a, k, c, Activation::Linear, rows, cols, &mut rng),
        };
        model.validate()?;
        Ok(model)
    }

    /// Shape chain: in → conv1 → conv2 → fc (square) → deconv1 → deconv2,
    /// with the decoder mirroring the encoder's spatial sizes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let k = cfg.kernel;
        let (h1, _) = out_and_pad(cfg.rows, k, 2, Padding::Same)?;
        let (w1, _) = out_and_pad(cfg.cols, k, 2, Padding::Same)?;
        let (h2, _) = out_and_pad(h1, k, 2, Padding::Same)?;
        let (w2, _) = out_and_pad(w1, k, 2, Padding::Same)?;
        let a = cfg.features;
        let flat = h2 * w2 * a;
        let checks: [(&str, &[usize], &[usize]); 6] = [
            ("conv1 kernels", &[a, k, k, cfg.in_channels], &dim4(&self.conv1.kernels)),
            ("conv2 kernels", &[a, k, k, a], &dim4(&self.conv2.kernels)),
            ("fc weights", &[flat, flat], &[self.fc_weights.nrows(), self.fc_weights.ncols()]),
            ("deconv1 kernels", &[a, k, k, a], &dim4(&self.deconv1.kernels)),
            ("deconv2 kernels", &[a, k, k, cfg.n_classes], &dim4(&self.deconv2.kernels)),
            ("deconv sizes", &[h1, w1, cfg.rows, cfg.cols], &[
                self.deconv1.out_h,
                self.deconv1.out_w,
                self.deconv2.out_h,
                self.deconv2.out_w,
            ]),
        ];
        for (what, want, got) in checks {
            if want != got {
                return Err(Error::ShapeMismatch {
                    expected: format!("{what} {want:?}"),
                    got: format!("{got:?}"),
                });
            }
        }
        if self.fc_bias.len() != flat {
            return Err(Error::DimensionMismatch {
                context: "fc bias",
                expected: flat,
                got: self.fc_bias.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, aog: &AugmentedOccupancyGrid) -> Result<Array3<f64>> {
        self.forward_values(&aog_tensor(self, aog)?)
    }

    /// Class probabilities per cell, (rows, cols, n_classes).
    pub fn forward_values(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward_cached(input)?.probs)
    }

    fn forward_cached(&self, input: &Array3<f64>) -> Result<ForwardPass> {
        let cfg = &self.config;
        if input.dim() != (cfg.rows, cfg.cols, cfg.in_channels) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", cfg.rows, cfg.cols, cfg.in_channels),
                got: format!("{:?}", input.dim()),
            });
        }
        let a1 = conv_forward(&self.conv1, input)?;
        let a2 = conv_forward(&self.conv2, &a1)?;
        let flat = flatten(&a2);
        let mut z3 = self.fc_weights.dot(&flat);
        for (v, b) in z3.iter_mut().zip(&self.fc_bias) {
            *v = (*v + b).max(0.0);
        }
        let (h2, w2, a) = a2.dim();
        let r3 = Array3::from_shape_vec((h2, w2, a), z3.to_vec()).expect("fc size is validated");
        let a4 = deconv_forward(&self.deconv1, &r3)?;
        let logits = deconv_forward(&self.deconv2, &a4)?;
        let probs = pixel_softmax(&logits)?;
        Ok(ForwardPass { a1, a2, a3: r3, a4, probs })
    }

    /// Round all parameters through f32, making the in-memory model equal
    /// to its serialized form.
    pub fn canonicalize(&mut self) {
        for v in self
            .conv1
            .kernels
            .iter_mut()
            .chain(self.conv2.kernels.iter_mut())
            .chain(self.fc_weights.iter_mut())
            .chain(self.deconv1.kernels.iter_mut())
            .chain(self.deconv2.kernels.iter_mut())
        {
            *v = *v as f32 as f64;
        }
        for v in self
            .conv1
            .bias
            .iter_mut()
            .chain(&mut self.conv2.bias)
            .chain(&mut self.fc_bias)
            .chain(&mut self.deconv1.bias)
            .chain(&mut self.deconv2.bias)
        {
            *v = *v as f32 as f64;
        }
    }
}

fn dim4(a: &Array4<f64>) -> [usize; 4] {
    let (x, y, z, w) = a.dim();
    [x, y, z, w]
}

fn flatten(a: &Array3<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().copied())
}

fn aog_tensor(model: &ConvNetModel, aog: &AugmentedOccupancyGrid) -> Result<Array3<f64>> {
    let cfg = aog.config();
    Array3::from_shape_vec(
        (cfg.rows, cfg.cols, cfg.attributes),
        aog.as_slice().to_vec(),
    )
    .map_err(|_| Error::ShapeMismatch {
        expected: format!(
            "{}x{}x{}",
            model.config.rows, model.config.cols, model.config.in_channels
        ),
        got: format!("{}x{}x{}", cfg.rows, cfg.cols, cfg.attributes),
    })
}

struct ForwardPass {
    a1: Array3<f64>,
    a2: Array3<f64>,
    a3: Array3<f64>,
    a4: Array3<f64>,
    probs: Array3<f64>,
}

/// Parameter gradients, same shapes as the model's parameters.
pub struct ConvNetGradients {
    pub conv1_kernels: Array4<f64>,
    pub conv1_bias: Vec<f64>,
    pub conv2_kernels: Array4<f64>,
    pub conv2_bias: Vec<f64>,
    pub fc_weights: Array2<f64>,
    pub fc_bias: Vec<f64>,
    pub deconv1_kernels: Array4<f64>,
    pub deconv1_bias: Vec<f64>,
    pub deconv2_kernels: Array4<f64>,
    pub deconv2_bias: Vec<f64>,
}

impl ConvNetGradients {
    fn add(&mut self, other: &ConvNetGradients) {
        self.conv1_kernels += &other.conv1_kernels;
        self.conv2_kernels += &other.conv2_kernels;
        self.fc_weights += &other.fc_weights;
        self.deconv1_kernels += &other.deconv1_kernels;
        self.deconv2_kernels += &other.deconv2_kernels;
        for (dst, src) in [
            (&mut self.conv1_bias, &other.conv1_bias),
            (&mut self.conv2_bias, &other.conv2_bias),
            (&mut self.fc_bias, &other.fc_bias),
            (&mut self.deconv1_bias, &other.deconv1_bias),
            (&mut self.deconv2_bias, &other.deconv2_bias),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        self.conv1_kernels *= factor;
        self.conv2_kernels *= factor;
        self.fc_weights *= factor;
        self.deconv1_kernels *= factor;
        self.deconv2_kernels *= factor;
        for bias in [
            &mut self.conv1_bias,
            &mut self.conv2_bias,
            &mut self.fc_bias,
            &mut self.deconv1_bias,
            &mut self.deconv2_bias,
        ] {
            for v in bias.iter_mut() {
                *v *= factor;
            }
        }
    }
}

fn bias_grad(g: &Array3<f64>) -> Vec<f64> {
    let c = g.dim().2;
    let mut out = vec![0.0; c];
    for pixel in g.rows() {
        for (o, v) in out.iter_mut().zip(pixel) {
            *o += v;
        }
    }
    out
}

fn mask_by(g: &mut Array3<f64>, out: &Array3<f64>, activation: Activation) {
    g.zip_mut_with(out, |gv, &y| *gv *= activation.mask(y));
}

/// Cross-entropy and its full analytic gradient for one sample. The loss
/// is the pixel mean of Eq.-7-style terms; training averages this over
/// the batch. Public so training can be checked against finite
/// differences.
pub fn loss_and_gradients(
    model: &ConvNetModel,
    input: &Array3<f64>,
    classes: &[u8],
) -> Result<(f64, ConvNetGradients)> {
    let pass = model.forward_cached(input)?;
    let loss = cross_entropy_loss(&pass.probs, classes)?;
    let (rows, cols, c) = pass.probs.dim();

    // Softmax + CE collapse to (p − y) per pixel, averaged over pixels.
    let mut g_logits = pass.probs.clone();
    let scale = 1.0 / (rows * cols) as f64;
    for (mut pixel, &class) in g_logits.rows_mut().into_iter().zip(classes) {
        pixel[class as usize] -= 1.0;
        for v in pixel.iter_mut() {
            *v *= scale;
        }
    }
    debug_assert_eq!(c, model.config.n_classes);

    // deconv2 is linear; g_logits is already its pre-activation gradient.
    let d2 = &model.deconv2;
    let deconv2_bias = bias_grad(&g_logits);
    let deconv2_kernels =
        conv_kernel_grad(&g_logits, &pass.a4, d2.stride, d2.padding, d2.kernels.dim().1, d2.kernels.dim().2)?;
    let mut g_a4 = conv_gather(&g_logits, &d2.kernels, d2.stride, d2.padding)?;

    mask_by(&mut g_a4, &pass.a4, model.deconv1.activation);
    let d1 = &model.deconv1;
    let deconv1_bias = bias_grad(&g_a4);
    let deconv1_kernels =
        conv_kernel_grad(&g_a4, &pass.a3, d1.stride, d1.padding, d1.kernels.dim().1, d1.kernels.dim().2)?;
    let mut g_a3 = conv_gather(&g_a4, &d1.kernels, d1.stride, d1.padding)?;

    // Fully-connected bottleneck (relu): a3 = relu(W·flat(a2) + b).
    mask_by(&mut g_a3, &pass.a3, Activation::Relu);
    let g_z3 = flatten(&g_a3);
    let flat_a2 = flatten(&pass.a2);
    let fc_weights = outer(&g_z3, &flat_a2);
    let fc_bias = g_z3.to_vec();
    let g_flat = model.fc_weights.t().dot(&g_z3);
    let (h2, w2, a_ch) = pass.a2.dim();
    let mut g_a2 =
        Array3::from_shape_vec((h2, w2, a_ch), g_flat.to_vec()).expect("fc size is validated");

    mask_by(&mut g_a2, &pass.a2, model.conv2.activation);
    let c2 = &model.conv2;
    let conv2_bias = bias_grad(&g_a2);
    let conv2_kernels =
        conv_kernel_grad(&pass.a1, &g_a2, c2.stride, c2.padding, c2.kernels.dim().1, c2.kernels.dim().2)?;
    let (h1, w1, _) = pass.a1.dim();
    let mut g_a1 = conv_scatter(&g_a2, &c2.kernels, c2.stride, c2.padding, h1, w1)?;

    mask_by(&mut g_a1, &pass.a1, model.conv1.activation);
    let c1 = &model.conv1;
    let conv1_bias = bias_grad(&g_a1);
    let conv1_kernels =
        conv_kernel_grad(input, &g_a1, c1.stride, c1.padding, c1.kernels.dim().1, c1.kernels.dim().2)?;

    Ok((
        loss,
        ConvNetGradients {
            conv1_kernels,
            conv1_bias,
            conv2_kernels,
            conv2_bias,
            fc_weights,
            fc_bias,
            deconv1_kernels,
            deconv1_bias,
            deconv2_kernels,
            deconv2_bias,
        },
    ))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let mut row = out.row_mut(i);
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = av * bv;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for ConvTrainSpec {
    fn default() -> Self {
        ConvTrainSpec { epochs: 200, learning_rate: 0.01, batch_size: 32, rng_seed: 0 }
    }
}

impl ConvTrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Batches always reduce over a fixed number of contiguous chunks, so the
/// summation order (and therefore the trained model) is independent of
/// thread count.
const GRAD_CHUNKS: usize = 8;

/// Train by seeded mini-batch gradient descent on the pixel-mean
/// cross-entropy. Returns the model and a per-epoch loss curve measured on
/// a fixed leading slice of the training set (at most 128 samples).
pub fn train_convnet(
    aogs: &[AugmentedOccupancyGrid],
    targets: &[QuantizedPog],
    config: &ConvNetConfig,
    spec: &ConvTrainSpec,
) -> Result<(ConvNetModel, Vec<f64>)> {
    spec.validate()?;
    if aogs.is_empty() || aogs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching nonempty training sets, got {} inputs and {} targets",
            aogs.len(),
            targets.len()
        )));
    }
    let mut model = ConvNetModel::init(config)?;
    let inputs: Vec<Array3<f64>> =
        aogs.iter().map(|a| aog_tensor(&model, a)).collect::<Result<_>>()?;
    for (input, target) in inputs.iter().zip(targets) {
        if input.dim() != (config.rows, config.cols, config.in_channels) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", config.rows, config.cols, config.in_channels),
                got: format!("{:?}", input.dim()),
            });
        }
        let t = target.config();
        if (t.rows, t.cols) != (config.rows, config.cols) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", config.rows, config.cols),
                got: format!("{}x{}", t.rows, t.cols),
            });
        }
        if let Some(&c) = target.classes().iter().find(|&&c| c as usize >= config.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "quantized class {c} outside the {}-class head",
                config.n_classes
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(spec.rng_seed, 1));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let eval_n = inputs.len().min(128);
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (batch_index, batch) in order.chunks(spec.batch_size).enumerate() {
            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
            let partials: Vec<Result<(f64, Option<ConvNetGradients>)>> = batch
                .par_chunks(chunk_len)
                .map(|chunk| {
                    let mut sum: Option<ConvNetGradients> = None;
                    let mut loss = 0.0;
                    for &i in chunk {
                        let (l, g) =
                            loss_and_gradients(&model, &inputs[i], targets[i].classes())?;
                        loss += l;
                        match &mut sum {
                            Some(s) => s.add(&g),
                            None => sum = Some(g),
                        }
                    }
                    Ok((loss, sum))
                })
                .collect();
            let mut total: Option<ConvNetGradients> = None;
            let mut batch_loss = 0.0;
            for partial in partials {
                // Divergence can first surface as a non-finite forward pass
                // rather than a non-finite loss value; report the position
                // either way.
                let (l, g) = match partial {
                    Ok(v) => v,
                    Err(e) if e.is_numeric() => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch: batch_index,
                            value: f64::NAN,
                        });
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += l;
                if let Some(g) = g {
                    match &mut total {
                        Some(t) => t.add(&g),
                        None => total = Some(g),
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index, value: batch_loss });
            }
            let mut total = total.expect("nonempty batch");
            total.scale(spec.learning_rate / batch.len() as f64);
            apply_step(&mut model, &total);
        }
        epoch_losses.push(mean_loss(&model, &inputs[..eval_n], &targets[..eval_n])?);
    }
    model.canonicalize();
    Ok((model, epoch_losses))
}

/// Mean cross-entropy over a sample set, reduced over fixed chunks so the
/// result is independent of thread count.
fn mean_loss(
    model: &ConvNetModel,
    inputs: &[Array3<f64>],
    targets: &[QuantizedPog],
) -> Result<f64> {
    let chunk_len = inputs.len().div_ceil(GRAD_CHUNKS).max(1);
    let partials: Vec<Result<f64>> = inputs
        .par_chunks(chunk_len)
        .zip(targets.par_chunks(chunk_len))
        .map(|(xs, ys)| {
            let mut loss = 0.0;
            for (x, y) in xs.iter().zip(ys) {
                loss += cross_entropy_loss(&model.forward_values(x)?, y.classes())?;
            }
            Ok(loss)
        })
        .collect();
    let mut total = 0.0;
    for partial in partials {
        total += partial?;
    }
    Ok(total / inputs.len() as f64)
}

fn apply_step(model: &mut ConvNetModel, scaled: &ConvNetGradients) {
    model.conv1.kernels -= &scaled.conv1_kernels;
    model.conv2.kernels -= &scaled.conv2_kernels;
    model.fc_weights -= &scaled.fc_weights;
    model.deconv1.kernels -= &scaled.deconv1_kernels;
    model.deconv2.kernels -= &scaled.deconv2_kernels;
    for (dst, src) in [
        (&mut model.conv1.bias, &scaled.conv1_bias),
        (&mut model.conv2.bias, &scaled.conv2_bias),
        (&mut model.fc_bias, &scaled.fc_bias),
        (&mut model.deconv1.bias, &scaled.deconv1_bias),
        (&mut model.deconv2.bias, &scaled.deconv2_bias),
    ] {
        for (d, s) in dst.iter_mut().zip(src) {
            *d -= s;
        }
    }
}

/// Per cell, the quantized level whose class wins the softmax; ties go to
/// the lower level.
pub fn predict_pog(model: &ConvNetModel, aog: &AugmentedOccupancyGrid, t_pred: f64) -> Result<QuantizedPog> {
    let probs = model.forward(aog)?;
    let classes: Vec<u8> = probs
        .rows()
        .into_iter()
        .map(|pixel| {
            let mut best = 0usize;
            for (k, &p) in pixel.iter().enumerate().skip(1) {
                if p > pixel[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    QuantizedPog::from_classes(aog.config().clone(), t_pred, classes)
}

pub const CONVNET_MAGIC: &[u8; 4] = b"CNVM";
pub const CONVNET_VERSION: u16 = 1;

pub fn convnet_to_bytes(model: &ConvNetModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut w = Writer::new();
    w.bytes(CONVNET_MAGIC);
    w.u16(CONVNET_VERSION);
    w.u32(cfg.rows as u32);
    w.u32(cfg.cols as u32);
    w.u32(cfg.in_channels as u32);
    w.u32(cfg.features as u32);
    w.u32(cfg.kernel as u32);
    w.u32(cfg.n_classes as u32);
    w.u64(cfg.rng_seed);
    let kernels = [
        &model.conv1.kernels,
        &model.conv2.kernels,
        &model.deconv1.kernels,
        &model.deconv2.kernels,
    ];
    let biases = [&model.conv1.bias, &model.conv2.bias, &model.deconv1.bias, &model.deconv2.bias];
    for (k, b) in kernels.iter().zip(biases) {
        for &v in k.iter() {
            w.f32(v as f32);
        }
        for &v in b {
            w.f32(v as f32);
        }
    }
    for &v in model.fc_weights.iter() {
        w.f32(v as f32);
    }
    for &v in &model.fc_bias {
        w.f32(v as f32);
    }
    w.into_bytes()
}

pub fn read_convnet_bytes(data: &[u8]) -> Result<ConvNetModel> {
    let mut r = Reader::new(data, "convnet file");
    r.magic(CONVNET_MAGIC)?;
    let version = r.u16()?;
    if version != CONVNET_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let rows = r.count(1 << 16, "rows")?;
    let cols = r.count(1 << 16, "cols")?;
    let in_channels = r.count(1 << 12, "channels")?;
    let features = r.count(1 << 12, "features")?;
    let kernel = r.count(255, "kernel")?;
    let n_classes = r.count(1 << 12, "classes")?;
    let rng_seed = r.u64()?;
    let config = ConvNetConfig { rows, cols, in_channels, features, kernel, n_classes, rng_seed };
    config.validate().map_err(|e| r.error(e.to_string()))?;

    let mut model = ConvNetModel::init(&config)?;
    {
        let ConvNetModel { conv1, conv2, deconv1, deconv2, fc_weights, fc_bias, .. } = &mut model;
        for (kernels, bias) in [
            (&mut conv1.kernels, &mut conv1.bias),
            (&mut conv2.kernels, &mut conv2.bias),
            (&mut deconv1.kernels, &mut deconv1.bias),
            (&mut deconv2.kernels, &mut deconv2.bias),
        ] {
            for v in kernels.iter_mut() {
                *v = r.f32()? as f64;
            }
            for v in bias.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
        for v in fc_weights.iter_mut() {
            *v = r.f32()? as f64;
        }
        for v in fc_bias.iter_mut() {
            *v = r.f32()? as f64;
        }
    }
    r.finish()?;
    model.validate()?;
    Ok(model)
}

pub fn save_convnet(path: &Path, model: &ConvNetModel) -> Result<()> {
    std::fs::write(path, convnet_to_bytes(model))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_convnet(path: &Path) -> Result<ConvNetModel> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_convnet_bytes(&data)
}
