//! Small convolutional noise predictor with hand-written reverse mode.
//!
//! Architecture: `C -> w0 -> w1 -> ... -> wn -> C`, every layer a 3×3
//! same-padded convolution, SiLU between layers. A sinusoidal timestep
//! embedding is projected to `w0` channels and added to the first hidden
//! pre-activation. The last hidden activation (`wn` channels, full
//! resolution) is the feature layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::Latent;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, TensorRecord};
use crate::tensor::{Grid, Shape};

use super::bilinear::{resize, resize_adjoint};
use super::{check_cotangent, Denoiser, FeatureMap, Linearization};

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 16];
pub const TIME_EMBED_DIM: usize = 8;
const TAPS: usize = 9;

/// 3×3 convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * TAPS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiser {
    channels: usize,
    layers: Vec<ConvLayer>,
    time_weight: Vec<f64>,
    time_bias: Vec<f64>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients {
    pub layers: Vec<ConvLayer>,
    pub time_weight: Vec<f64>,
    pub time_bias: Vec<f64>,
}

impl ConvGradients {
    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
        self.time_weight.iter_mut().for_each(|v| *v *= s);
        self.time_bias.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .chain(&self.time_weight)
            .chain(&self.time_bias)
            .all(|v| v.is_finite())
    }
}

/// Sinusoidal embedding `[sin(t f_j), cos(t f_j)]`, `f_j = 1000^(-j/4)`.
pub fn timestep_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (t as f64 * freq).sin();
        out[j + half] = (t as f64 * freq).cos();
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `c = beta * c + op(a) * op(b)` for `m×k` times `k×n`, strides as `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    assert!(k == 0 || last(m, k, a_strides) < a.len());
    assert!(k == 0 || last(k, n, b_strides) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a distinct `&mut` so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `channels × h × w` into `[channels*9, h*w]` with zero padding.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut cols = vec![0.0; channels * TAPS * plane];
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * TAPS + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x_lo, x_hi) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                    for x in x_lo..x_hi {
                        row[y * w + x] = src[sy * w + x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; channels * plane];
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * TAPS + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x_lo, x_hi) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                    for x in x_lo..x_hi {
                        dst[sy * w + x + kx - 1] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ConvTape {
    shape: Shape,
    embedding: [f64; TIME_EMBED_DIM],
    /// Unfolded input of each layer.
    cols: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    pub eps: Grid,
    pub features: Grid,
}

impl ConvDenoiser {
    /// PyTorch-style uniform(±1/sqrt(fan_in)) initialisation from `seed`.
    pub fn init(channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(channels, widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let bound = 1.0 / (TIME_EMBED_DIM as f64).sqrt();
        for v in net.time_weight.iter_mut().chain(net.time_bias.iter_mut()) {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(net)
    }

    pub fn zeros(channels: usize, widths: &[usize]) -> Result<Self> {
        if channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "bad architecture: channels {channels}, widths {widths:?}"
            )));
        }
        let mut dims = vec![channels];
        dims.extend_from_slice(widths);
        dims.push(channels);
        let layers = dims.windows(2).map(|w| ConvLayer::zeros(w[0], w[1])).collect();
        Ok(Self {
            channels,
            layers,
            time_weight: vec![0.0; widths[0] * TIME_EMBED_DIM],
            time_bias: vec![0.0; widths[0]],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_channels)
            .collect()
    }

    pub fn feature_depth(&self) -> usize {
        self.layers[self.layers.len() - 2].out_channels
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.time_weight.len()
            + self.time_bias.len()
    }

    pub fn zero_gradients(&self) -> ConvGradients {
        ConvGradients {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_channels, l.out_channels))
                .collect(),
            time_weight: vec![0.0; self.time_weight.len()],
            time_bias: vec![0.0; self.time_bias.len()],
        }
    }

    /// `params -= lr * grads`.
    pub fn apply_gradients(&mut self, grads: &ConvGradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in l.weight.iter_mut().zip(&g.weight) {
                *p -= lr * d;
            }
            for (p, d) in l.bias.iter_mut().zip(&g.bias) {
                *p -= lr * d;
            }
        }
        for (p, d) in self.time_weight.iter_mut().zip(&grads.time_weight) {
            *p -= lr * d;
        }
        for (p, d) in self.time_bias.iter_mut().zip(&grads.time_bias) {
            *p -= lr * d;
        }
    }

    pub fn forward(&self, z: &Grid, t: usize) -> Result<ConvTape> {
        let shape = z.shape();
        if shape.channels != self.channels {
            return Err(Error::shape(
                format!("{} channels", self.channels),
                shape,
            ));
        }
        let (h, w) = (shape.height, shape.width);
        let plane = shape.plane();
        let embedding = timestep_embedding(t);
        let w0 = self.layers[0].out_channels;
        let time_shift: Vec<f64> = (0..w0)
            .map(|o| {
                self.time_bias[o]
                    + (0..TIME_EMBED_DIM)
                        .map(|j| self.time_weight[o * TIME_EMBED_DIM + j] * embedding[j])
                        .sum::<f64>()
            })
            .collect();

        let n_layers = self.layers.len();
        let mut cols = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut act = z.data().to_vec();
        let mut eps = Vec::new();
        let mut features = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let unfolded = im2col(&act, layer.in_channels, h, w);
            let mut out = vec![0.0; layer.out_channels * plane];
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                let b = layer.bias[o] + if li == 0 { time_shift[o] } else { 0.0 };
                chunk.iter_mut().for_each(|v| *v = b);
            }
            let k = layer.fan_in();
            gemm(
                layer.out_channels,
                k,
                plane,
                &layer.weight,
                (k, 1),
                &unfolded,
                (plane, 1),
                1.0,
                &mut out,
            );
            cols.push(unfolded);
            if li + 1 == n_layers {
                eps = out;
            } else {
                act = out.iter().map(|&v| silu(v)).collect();
                pre.push(out);
                if li + 2 == n_layers {
                    features = act.clone();
                }
            }
        }
        let eps = Grid::from_vec(shape, eps)?;
        let features = Grid::from_vec(
            Shape::new(self.feature_depth(), h, w),
            features,
        )?;
        if !eps.is_finite() || !features.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at t={t}")));
        }
        Ok(ConvTape {
            shape,
            embedding,
            cols,
            pre,
            eps,
            features,
        })
    }

    /// Reverse pass. Returns the latent gradient and, if `params` is given,
    /// accumulates parameter gradients into it.
    pub fn backward(
        &self,
        tape: &ConvTape,
        cot_eps: Option<&Grid>,
        cot_features: Option<&Grid>,
        mut params: Option<&mut ConvGradients>,
    ) -> Result<Grid> {
        let shape = tape.shape;
        let (h, w) = (shape.height, shape.width);
        let plane = shape.plane();
        check_cotangent(cot_eps, shape)?;
        check_cotangent(cot_features, tape.features.shape())?;

        let n_layers = self.layers.len();
        // gradient w.r.t. the output of layer `li`
        let mut grad_out = match cot_eps {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; plane * self.channels],
        };
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            if li + 1 < n_layers {
                // through the SiLU of hidden layer li
                if li + 2 == n_layers {
                    if let Some(f) = cot_features {
                        for (g, d) in grad_out.iter_mut().zip(f.data()) {
                            *g += d;
                        }
                    }
                }
                for (g, &p) in grad_out.iter_mut().zip(&tape.pre[li]) {
                    *g *= silu_grad(p);
                }
            }
            let k = layer.fan_in();
            if let Some(grads) = params.as_deref_mut() {
                let gl = &mut grads.layers[li];
                // dW += dOut · colsᵀ
                gemm(
                    layer.out_channels,
                    plane,
                    k,
                    &grad_out,
                    (plane, 1),
                    &tape.cols[li],
                    (1, plane),
                    1.0,
                    &mut gl.weight,
                );
                for (o, chunk) in grad_out.chunks(plane).enumerate() {
                    let s: f64 = chunk.iter().sum();
                    gl.bias[o] += s;
                    if li == 0 {
                        grads.time_bias[o] += s;
                        for j in 0..TIME_EMBED_DIM {
                            grads.time_weight[o * TIME_EMBED_DIM + j] += s * tape.embedding[j];
                        }
                    }
                }
            }
            // dCols = Wᵀ · dOut
            let mut grad_cols = vec![0.0; k * plane];
            gemm(
                k,
                layer.out_channels,
                plane,
                &layer.weight,
                (1, k),
                &grad_out,
                (plane, 1),
                0.0,
                &mut grad_cols,
            );
            grad_out = col2im(&grad_cols, layer.in_channels, h, w);
        }
        Grid::from_vec(shape, grad_out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        for (i, l) in self.layers.iter().enumerate() {
            ck.push(
                format!("conv{i}.weight"),
                TensorRecord::from_f64(vec![l.out_channels, l.in_channels, 3, 3], &l.weight)?,
            );
            ck.push(
                format!("conv{i}.bias"),
                TensorRecord::from_f64(vec![l.out_channels], &l.bias)?,
            );
        }
        let w0 = self.time_bias.len();
        ck.push(
            "time.weight",
            TensorRecord::from_f64(vec![w0, TIME_EMBED_DIM], &self.time_weight)?,
        );
        ck.push("time.bias", TensorRecord::from_f64(vec![w0], &self.time_bias)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let fetch = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::MissingWeights(format!("checkpoint has no tensor {name:?}")))
        };
        let mut layers = Vec::new();
        for i in 0.. {
            let name = format!("conv{i}.weight");
            let Some(wt) = ck.get(&name) else { break };
            let [out_c, in_c, 3, 3] = wt.dims[..] else {
                return Err(Error::Format(format!("{name} has dims {:?}", wt.dims)));
            };
            let bias = fetch(&format!("conv{i}.bias"))?;
            if bias.dims != [out_c] {
                return Err(Error::Format(format!("conv{i}.bias has dims {:?}", bias.dims)));
            }
            layers.push(ConvLayer {
                in_channels: in_c,
                out_channels: out_c,
                weight: wt.to_f64(),
                bias: bias.to_f64(),
            });
        }
        if layers.len() < 2 {
            return Err(Error::MissingWeights(format!(
                "need at least two conv layers, found {}",
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Format("conv layer channel counts do not chain".into()));
            }
        }
        let channels = layers[0].in_channels;
        if layers.last().map(|l| l.out_channels) != Some(channels) {
            return Err(Error::Format("output channels differ from input channels".into()));
        }
        let w0 = layers[0].out_channels;
        let tw = fetch("time.weight")?;
        let tb = fetch("time.bias")?;
        if tw.dims != [w0, TIME_EMBED_DIM] || tb.dims != [w0] {
            return Err(Error::Format("time projection has wrong dims".into()));
        }
        Ok(Self {
            channels,
            layers,
            time_weight: tw.to_f64(),
            time_bias: tb.to_f64(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

struct ConvPass<'a> {
    net: &'a ConvDenoiser,
    tape: ConvTape,
    features: FeatureMap,
}

impl Linearization for ConvPass<'_> {
    fn eps(&self) -> &Grid {
        &self.tape.eps
    }

    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn pullback(&self, cot_eps: Option<&Grid>, cot_features: Option<&Grid>) -> Result<Grid> {
        check_cotangent(cot_features, self.features.grid.shape())?;
        let raw = cot_features
            .map(|g| resize_adjoint(g, self.tape.features.shape()))
            .transpose()?;
        self.net.backward(&self.tape, cot_eps, raw.as_ref(), None)
    }
}

impl Denoiser for ConvDenoiser {
    fn linearize<'a>(&'a self, z: &Latent) -> Result<Box<dyn Linearization + 'a>> {
        let tape = self.forward(&z.grid, z.t)?;
        let s = z.shape();
        let features = FeatureMap::new(resize(&tape.features, s.height, s.width))?;
        Ok(Box::new(ConvPass {
            net: self,
            tape,
            features,
        }))
    }

    fn predict_eps(&self, z: &Latent) -> Result<Grid> {
        Ok(self.forward(&z.grid, z.t)?.eps)
    }
}
