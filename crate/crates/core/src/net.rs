//! The super-resolution network: three same-padded convolutions (9x9 then 5x5
//! then 5x5, ReLU between them, linear output) applied to a bicubically
//! pre-upsampled input, with hand-written forward and backward passes.
//!
//! Parameters are stored as f32 (that is the checkpoint contract), but every
//! forward, loss, and gradient computation runs in f64. That keeps
//! finite-difference gradient checks sharp and makes training trajectories
//! reproducible to the bit.
//!
//! The training loss is
//!
//! ```text
//! L = (1/N) sum_n ||y_n - yhat_n||^2
//!   + (alpha/(M N)) sum_n sum_{c,m} ||F_{c,m} * (y_n - yhat_n)_c||^2
//! ```
//!
//! where the second sum runs over the filter bank and `*` is full 2-D
//! convolution, the exact extent the bank designer scores filters with. Its
//! gradient with respect to yhat is (2 alpha/(M N)) sum_m corr(F_m, F_m * e)
//! with e = yhat - y, correlation being convolution with the flipped kernel,
//! cropped back to the image extent.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::gram::conv2d_full;
use crate::raster::{Image, Plane};
use crate::seed::{derive_seed, streams};

pub const LAYER_KERNELS: [usize; 3] = [9, 5, 5];

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    /// Kernel weights, [c_out][c_in][ky][kx] row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn he_uniform(c_in: usize, c_out: usize, kh: usize, kw: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (c_in * kh * kw) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weights = (0..c_out * c_in * kh * kw)
            .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * limit) as f32)
            .collect();
        Self {
            c_in,
            c_out,
            kh,
            kw,
            weights,
            bias: vec![0.0; c_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out + self.c_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<ConvLayer>,
}

impl ModelParams {
    /// He-uniform kernels, zero biases, one derived seed per layer.
    pub fn new(channels: usize, width1: usize, width2: usize, seed: u64) -> Self {
        let dims = [
            (channels, width1, LAYER_KERNELS[0]),
            (width1, width2, LAYER_KERNELS[1]),
            (width2, channels, LAYER_KERNELS[2]),
        ];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, k))| {
                ConvLayer::he_uniform(c_in, c_out, k, k, derive_seed(seed, streams::INIT, i as u64))
            })
            .collect();
        Self { layers }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Binary checkpoint, magic "SRNW1". Layout: magic, then u32 little-endian
    /// channel count, layer count, and per-layer (kh, kw, c_in, c_out); then per
    /// layer the kernel weights as f32 little-endian in [c_out][c_in][ky][kx]
    /// order followed by the c_out biases. Round-trips exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SRNW1");
        push_u32(&mut buf, self.channels() as u32);
        push_u32(&mut buf, self.layers.len() as u32);
        for l in &self.layers {
            push_u32(&mut buf, l.kh as u32);
            push_u32(&mut buf, l.kw as u32);
            push_u32(&mut buf, l.c_in as u32);
            push_u32(&mut buf, l.c_out as u32);
        }
        for l in &self.layers {
            for w in &l.weights {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            for b in &l.bias {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let mut cur = Cursor { data: &data, pos: 0 };
        let magic = cur.take(5)?;
        if magic != b"SRNW1" {
            return Err(Error::Format("checkpoint magic is not SRNW1".to_string()));
        }
        let channels = cur.u32()? as usize;
        let n_layers = cur.u32()? as usize;
        if n_layers != 3 {
            return Err(Error::Format(format!(
                "checkpoint declares {n_layers} layers, expected 3"
            )));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let kh = cur.u32()? as usize;
            let kw = cur.u32()? as usize;
            let c_in = cur.u32()? as usize;
            let c_out = cur.u32()? as usize;
            if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 || kh > 63 || kw > 63 {
                return Err(Error::Format("checkpoint kernel sizes must be odd and small".to_string()));
            }
            if c_in == 0 || c_out == 0 || c_in > 4096 || c_out > 4096 {
                return Err(Error::Format("checkpoint channel counts out of range".to_string()));
            }
            dims.push((kh, kw, c_in, c_out));
        }
        if dims[0].2 != channels || dims[2].3 != channels || dims[0].3 != dims[1].2 || dims[1].3 != dims[2].2 {
            return Err(Error::Format("checkpoint layer dimensions do not chain".to_string()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(kh, kw, c_in, c_out) in &dims {
            let n_w = kh * kw * c_in * c_out;
            let mut weights = Vec::with_capacity(n_w);
            for _ in 0..n_w {
                weights.push(cur.f32()?);
            }
            let mut bias = Vec::with_capacity(c_out);
            for _ in 0..c_out {
                bias.push(cur.f32()?);
            }
            layers.push(ConvLayer {
                c_in,
                c_out,
                kh,
                kw,
                weights,
                bias,
            });
        }
        if cur.pos != data.len() {
            return Err(Error::Format("checkpoint has trailing bytes".to_string()));
        }
        Ok(Self { layers })
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("checkpoint truncated".to_string()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Gradients in f64, shapes mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Self { layers }
    }
}

/// Adam moment accumulators, shapes mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub layers: Vec<AdamLayer>,
}

#[derive(Clone, Debug)]
pub struct AdamLayer {
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| AdamLayer {
                m_w: vec![0.0; l.weights.len()],
                v_w: vec![0.0; l.weights.len()],
                m_b: vec![0.0; l.bias.len()],
                v_b: vec![0.0; l.bias.len()],
            })
            .collect();
        Self { step: 0, layers }
    }
}

struct LayerF64 {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn widen(l: &ConvLayer) -> LayerF64 {
    LayerF64 {
        c_in: l.c_in,
        c_out: l.c_out,
        kh: l.kh,
        kw: l.kw,
        w: l.weights.iter().map(|&v| v as f64).collect(),
        b: l.bias.iter().map(|&v| v as f64).collect(),
    }
}

/// Same-padded correlation-style convolution, optional ReLU.
fn conv_same(input: &[Plane], layer: &LayerF64, relu: bool) -> Vec<Plane> {
    let h = input[0].height;
    let w = input[0].width;
    let ph = (layer.kh / 2) as isize;
    let pw = (layer.kw / 2) as isize;
    let mut out = Vec::with_capacity(layer.c_out);
    for co in 0..layer.c_out {
        let mut plane = Plane::from_fn(h, w, |_, _| layer.b[co]);
        for ci in 0..layer.c_in {
            let src_plane = &input[ci];
            for ky in 0..layer.kh {
                let dy = ky as isize - ph;
                let oy0 = (-dy).max(0) as usize;
                let oy1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..layer.kw {
                    let wgt = layer.w[((co * layer.c_in + ci) * layer.kh + ky) * layer.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy as isize + dy) as usize;
                        let src =
                            &src_plane.row(iy)[(ox0 as isize + dx) as usize..(ox1 as isize + dx) as usize];
                        let dst = &mut plane.row_mut(oy)[ox0..ox1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
        if relu {
            for v in plane.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out.push(plane);
    }
    out
}

/// Gradient with respect to the layer input given the output gradient.
fn conv_same_input_grad(d_out: &[Plane], layer: &LayerF64) -> Vec<Plane> {
    let h = d_out[0].height;
    let w = d_out[0].width;
    let ph = (layer.kh / 2) as isize;
    let pw = (layer.kw / 2) as isize;
    let mut d_in = vec![Plane::zeros(h, w); layer.c_in];
    for co in 0..layer.c_out {
        let g = &d_out[co];
        for (ci, target) in d_in.iter_mut().enumerate() {
            for ky in 0..layer.kh {
                let dy = ky as isize - ph;
                let iy0 = dy.max(0) as usize;
                let iy1 = (h as isize + dy).min(h as isize).max(0) as usize;
                for kx in 0..layer.kw {
                    let wgt = layer.w[((co * layer.c_in + ci) * layer.kh + ky) * layer.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    let ix0 = dx.max(0) as usize;
                    let ix1 = (w as isize + dx).min(w as isize).max(0) as usize;
                    if ix0 >= ix1 {
                        continue;
                    }
                    for iy in iy0..iy1 {
                        let src = &g.row((iy as isize - dy) as usize)
                            [(ix0 as isize - dx) as usize..(ix1 as isize - dx) as usize];
                        let dst = &mut target.row_mut(iy)[ix0..ix1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Weight and bias gradients for one layer, accumulated into the given slices.
fn conv_same_weight_grads(
    d_out: &[Plane],
    input: &[Plane],
    layer: &LayerF64,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let h = d_out[0].height;
    let w = d_out[0].width;
    let ph = (layer.kh / 2) as isize;
    let pw = (layer.kw / 2) as isize;
    for co in 0..layer.c_out {
        let g = &d_out[co];
        db[co] += g.data.iter().sum::<f64>();
        for ci in 0..layer.c_in {
            let inp = &input[ci];
            for ky in 0..layer.kh {
                let dy = ky as isize - ph;
                let oy0 = (-dy).max(0) as usize;
                let oy1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..layer.kw {
                    let dx = kx as isize - pw;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let a = &g.row(oy)[ox0..ox1];
                        let b = &inp.row((oy as isize + dy) as usize)
                            [(ox0 as isize + dx) as usize..(ox1 as isize + dx) as usize];
                        let mut dot = 0.0;
                        for (p, q) in a.iter().zip(b) {
                            dot += p * q;
                        }
                        acc += dot;
                    }
                    dw[((co * layer.c_in + ci) * layer.kh + ky) * layer.kw + kx] += acc;
                }
            }
        }
    }
}

/// Zero the gradient wherever the activation was clamped.
fn relu_mask(d: &mut [Plane], activation: &[Plane]) {
    for (dp, ap) in d.iter_mut().zip(activation) {
        for (dv, av) in dp.data.iter_mut().zip(&ap.data) {
            if *av <= 0.0 {
                *dv = 0.0;
            }
        }
    }
}

/// Valid-extent correlation: out(m,n) = sum_{u,v} f(u,v) z(m+u, n+v).
/// For z = conv2d_full(e, f) this is exactly d||z||^2 / (2 de).
fn corr_valid(f: &Plane, z: &Plane) -> Plane {
    let oh = z.height - f.height + 1;
    let ow = z.width - f.width + 1;
    let mut out = Plane::zeros(oh, ow);
    for u in 0..f.height {
        for v in 0..f.width {
            let wgt = f.get(u, v);
            if wgt == 0.0 {
                continue;
            }
            for m in 0..oh {
                let src = &z.row(m + u)[v..v + ow];
                let dst = out.row_mut(m);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
    out
}

fn forward_planes(layers: &[LayerF64], x: &[Plane]) -> (Vec<Plane>, Vec<Plane>, Vec<Plane>) {
    let a1 = conv_same(x, &layers[0], true);
    let a2 = conv_same(&a1, &layers[1], true);
    let y = conv_same(&a2, &layers[2], false);
    (a1, a2, y)
}

/// Run the network. Output shape equals input shape; values are not clipped.
pub fn forward(params: &ModelParams, x: &Image) -> Result<Image> {
    if x.channels() != params.channels() {
        return Err(Error::ChannelMismatch {
            expected: params.channels(),
            got: x.channels(),
        });
    }
    let layers: Vec<LayerF64> = params.layers.iter().map(widen).collect();
    let (_, _, y) = forward_planes(&layers, &x.planes());
    Image::from_planes(&y)
}

/// Mean over the batch of per-image sums of squared pixel errors.
pub fn pixel_loss(y: &[Image], yhat: &[Image]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch lengths differ: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch(
                "pixel loss requires identically shaped images".to_string(),
            ));
        }
        let mut s = 0.0;
        for (p, q) in a.data().iter().zip(b.data()) {
            let d = *p as f64 - *q as f64;
            s += d * d;
        }
        acc += s;
    }
    Ok(acc / y.len() as f64)
}

/// Residual energy through the bank: (1/(M N)) sum over batch, channels, and
/// filters of ||F * (y - yhat)||^2 with full convolution extent. The loss
/// weight alpha is NOT applied here.
pub fn filter_loss(y: &[Image], yhat: &[Image], bank: &FilterBank) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch lengths differ: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch(
                "filter loss requires identically shaped images".to_string(),
            ));
        }
        if a.channels() != bank.channels() {
            return Err(Error::BankMismatch {
                bank: bank.channels(),
                image: a.channels(),
            });
        }
        for c in 0..a.channels() {
            let mut e = a.plane(c);
            let bp = b.plane(c);
            for (ev, bv) in e.data.iter_mut().zip(&bp.data) {
                *ev -= bv;
            }
            for m in 0..bank.filters_per_channel() {
                let conv = conv2d_full(&e, &bank.filter_plane(c, m))?;
                acc += conv.data.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    Ok(acc / (bank.filters_per_channel() * y.len()) as f64)
}

/// pixel_loss + alpha * filter_loss. With alpha = 0 (or no bank) this is the
/// pixel loss itself, bit for bit.
pub fn total_loss(
    y: &[Image],
    yhat: &[Image],
    bank: Option<&FilterBank>,
    alpha: f64,
) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::NegativeAlpha(alpha));
    }
    let pixel = pixel_loss(y, yhat)?;
    match bank {
        Some(b) if alpha > 0.0 => Ok(pixel + alpha * filter_loss(y, yhat, b)?),
        _ => Ok(pixel),
    }
}

/// The two loss components of one batch, before weighting by alpha.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub pixel: f64,
    pub filter: f64,
}

impl LossParts {
    pub fn total(&self, alpha: f64) -> f64 {
        self.pixel + alpha * self.filter
    }
}

fn check_batch(
    params: &ModelParams,
    batch: &[(Image, Image)],
    bank: Option<&FilterBank>,
    alpha: f64,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if alpha < 0.0 {
        return Err(Error::NegativeAlpha(alpha));
    }
    for (x, y) in batch {
        if x.channels() != params.channels() {
            return Err(Error::ChannelMismatch {
                expected: params.channels(),
                got: x.channels(),
            });
        }
        if !x.same_shape(y) {
            return Err(Error::ShapeMismatch(
                "input and target shapes differ within a batch pair".to_string(),
            ));
        }
        if let Some(b) = bank {
            if b.channels() != x.channels() {
                return Err(Error::BankMismatch {
                    bank: b.channels(),
                    image: x.channels(),
                });
            }
        }
    }
    Ok(())
}

/// Losses of a batch evaluated on the internal f64 forward path (no f32
/// narrowing of the prediction). The filter part is reported whenever a bank
/// is present, even at alpha = 0, so runs can log it.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[(Image, Image)],
    bank: Option<&FilterBank>,
    alpha: f64,
) -> Result<LossParts> {
    check_batch(params, batch, bank, alpha)?;
    let layers: Vec<LayerF64> = params.layers.iter().map(widen).collect();
    let n = batch.len() as f64;
    let mut parts = LossParts::default();
    for (x, y) in batch {
        let (_, _, yhat) = forward_planes(&layers, &x.planes());
        for c in 0..x.channels() {
            let mut e = yhat[c].clone();
            let t = y.plane(c);
            for (ev, tv) in e.data.iter_mut().zip(&t.data) {
                *ev -= tv;
            }
            parts.pixel += e.data.iter().map(|v| v * v).sum::<f64>();
            if let Some(b) = bank {
                for m in 0..b.filters_per_channel() {
                    let conv = conv2d_full(&e, &b.filter_plane(c, m))?;
                    parts.filter += conv.data.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
    }
    parts.pixel /= n;
    if let Some(b) = bank {
        parts.filter /= b.filters_per_channel() as f64 * n;
    }
    Ok(parts)
}

/// Batch losses plus exact gradients of pixel + alpha * filter with respect to
/// every parameter. The filter term contributes gradient only when alpha > 0,
/// so an alpha = 0 run follows the identical parameter trajectory as a run
/// without any bank.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[(Image, Image)],
    bank: Option<&FilterBank>,
    alpha: f64,
) -> Result<(LossParts, ModelGrads)> {
    check_batch(params, batch, bank, alpha)?;
    let layers: Vec<LayerF64> = params.layers.iter().map(widen).collect();
    let n = batch.len() as f64;
    let mut parts = LossParts::default();
    let mut grads = ModelGrads::zeros(params);
    for (x, y) in batch {
        let x_planes = x.planes();
        let (a1, a2, yhat) = forward_planes(&layers, &x_planes);
        let channels = x.channels();
        let mut d_out: Vec<Plane> = Vec::with_capacity(channels);
        for c in 0..channels {
            let mut e = yhat[c].clone();
            let t = y.plane(c);
            for (ev, tv) in e.data.iter_mut().zip(&t.data) {
                *ev -= tv;
            }
            parts.pixel += e.data.iter().map(|v| v * v).sum::<f64>();
            let mut d = Plane::zeros(e.height, e.width);
            let pixel_scale = 2.0 / n;
            for (dv, ev) in d.data.iter_mut().zip(&e.data) {
                *dv = pixel_scale * ev;
            }
            if let Some(b) = bank {
                let filter_scale = 2.0 * alpha / (b.filters_per_channel() as f64 * n);
                for m in 0..b.filters_per_channel() {
                    let f = b.filter_plane(c, m);
                    let conv = conv2d_full(&e, &f)?;
                    parts.filter += conv.data.iter().map(|v| v * v).sum::<f64>();
                    if alpha > 0.0 {
                        let back = corr_valid(&f, &conv);
                        for (dv, bv) in d.data.iter_mut().zip(&back.data) {
                            *dv += filter_scale * bv;
                        }
                    }
                }
            }
            d_out.push(d);
        }

        let g2 = &mut grads.layers[2];
        conv_same_weight_grads(&d_out, &a2, &layers[2], &mut g2.weights, &mut g2.bias);
        let mut d_a2 = conv_same_input_grad(&d_out, &layers[2]);
        relu_mask(&mut d_a2, &a2);
        let g1 = &mut grads.layers[1];
        conv_same_weight_grads(&d_a2, &a1, &layers[1], &mut g1.weights, &mut g1.bias);
        let mut d_a1 = conv_same_input_grad(&d_a2, &layers[1]);
        relu_mask(&mut d_a1, &a1);
        let g0 = &mut grads.layers[0];
        conv_same_weight_grads(&d_a1, &x_planes, &layers[0], &mut g0.weights, &mut g0.bias);
    }
    parts.pixel /= n;
    if let Some(b) = bank {
        parts.filter /= b.filters_per_channel() as f64 * n;
    }
    Ok((parts, grads))
}

/// Gradient of total_loss over the batch; see [`loss_and_grads`].
pub fn backward(
    params: &ModelParams,
    batch: &[(Image, Image)],
    bank: Option<&FilterBank>,
    alpha: f64,
) -> Result<ModelGrads> {
    loss_and_grads(params, batch, bank, alpha).map(|(_, g)| g)
}

/// One bias-corrected Adam update. Moments live in f64; parameters are
/// narrowed back to f32 after the update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() || state.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch(
            "gradient or optimizer state does not mirror the parameters".to_string(),
        ));
    }
    for ((p, g), s) in params
        .layers
        .iter()
        .zip(&grads.layers)
        .zip(&state.layers)
    {
        if p.weights.len() != g.weights.len()
            || p.bias.len() != g.bias.len()
            || p.weights.len() != s.m_w.len()
        {
            return Err(Error::ShapeMismatch(
                "gradient or optimizer state does not mirror the parameters".to_string(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (li, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[li];
        let s = &mut state.layers[li];
        for (i, w) in layer.weights.iter_mut().enumerate() {
            let grad = g.weights[i];
            s.m_w[i] = BETA1 * s.m_w[i] + (1.0 - BETA1) * grad;
            s.v_w[i] = BETA2 * s.v_w[i] + (1.0 - BETA2) * grad * grad;
            let update = lr * (s.m_w[i] / bc1) / ((s.v_w[i] / bc2).sqrt() + ADAM_EPS);
            *w = (*w as f64 - update) as f32;
        }
        for (i, b) in layer.bias.iter_mut().enumerate() {
            let grad = g.bias[i];
            s.m_b[i] = BETA1 * s.m_b[i] + (1.0 - BETA1) * grad;
            s.v_b[i] = BETA2 * s.v_b[i] + (1.0 - BETA2) * grad * grad;
            let update = lr * (s.m_b[i] / bc1) / ((s.v_b[i] / bc2).sqrt() + ADAM_EPS);
            *b = (*b as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f32>())
    }

    /// A net whose every layer kernel is a centered delta, so the whole network
    /// is the identity for positive inputs.
    fn delta_identity_net() -> ModelParams {
        let mut params = ModelParams::new(1, 1, 1, 0);
        for layer in params.layers.iter_mut() {
            for w in layer.weights.iter_mut() {
                *w = 0.0;
            }
            let center = (layer.kh / 2) * layer.kw + layer.kw / 2;
            layer.weights[center] = 1.0;
            for b in layer.bias.iter_mut() {
                *b = 0.0;
            }
        }
        params
    }

    fn tiny_bank() -> FilterBank {
        let h = 0.5;
        let f0 = vec![h, -h, h, -h];
        let f1 = vec![h, h, -h, -h];
        FilterBank::from_filters(1, 2, 2, 0.05, [f0, f1].concat()).unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        let p = ModelParams::new(3, 64, 32, 0);
        let expect = 9 * 9 * 3 * 64 + 64 + 5 * 5 * 64 * 32 + 32 + 5 * 5 * 32 * 3 + 3;
        assert_eq!(p.param_count(), expect);
        assert!(p
            .layers
            .iter()
            .all(|l| l.weights.iter().all(|w| w.is_finite())));
    }

    #[test]
    fn zero_params_propagate_only_the_output_bias() {
        let mut params = ModelParams::new(1, 2, 2, 0);
        for layer in params.layers.iter_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = random_image(6, 6, 1, 1);
        let out = forward(&params, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        params.layers[2].bias[0] = 0.7;
        let out = forward(&params, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn delta_net_is_identity_on_positive_input() {
        let params = delta_identity_net();
        let x = random_image(10, 9, 1, 2);
        let out = forward(&params, &x).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        let params = ModelParams::new(2, 3, 2, 7);
        let x = random_image(8, 8, 2, 3);
        let fast = forward(&params, &x).unwrap();

        // Direct per-pixel evaluation of the three layers.
        let conv_direct = |input: &Vec<Vec<Vec<f64>>>, layer: &ConvLayer, relu: bool| {
            let h = input[0].len();
            let w = input[0][0].len();
            let ph = (layer.kh / 2) as isize;
            let pw = (layer.kw / 2) as isize;
            let mut out = vec![vec![vec![0.0f64; w]; h]; layer.c_out];
            for co in 0..layer.c_out {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = layer.bias[co] as f64;
                        for ci in 0..layer.c_in {
                            for ky in 0..layer.kh {
                                for kx in 0..layer.kw {
                                    let iy = y as isize + ky as isize - ph;
                                    let ix = xx as isize + kx as isize - pw;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        let wgt = layer.weights
                                            [((co * layer.c_in + ci) * layer.kh + ky) * layer.kw
                                                + kx]
                                            as f64;
                                        acc += wgt * input[ci][iy as usize][ix as usize];
                                    }
                                }
                            }
                        }
                        out[co][y][xx] = if relu { acc.max(0.0) } else { acc };
                    }
                }
            }
            out
        };

        let mut a: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|c| {
                (0..8)
                    .map(|y| (0..8).map(|xx| x.get(y, xx, c) as f64).collect())
                    .collect()
            })
            .collect();
        a = conv_direct(&a, &params.layers[0], true);
        a = conv_direct(&a, &params.layers[1], true);
        a = conv_direct(&a, &params.layers[2], false);
        for c in 0..2 {
            for y in 0..8 {
                for xx in 0..8 {
                    let got = fast.get(y, xx, c) as f64;
                    assert!(
                        (got - a[c][y][xx]).abs() < 1e-4,
                        "({y},{xx},{c}): {got} vs {}",
                        a[c][y][xx]
                    );
                }
            }
        }
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let params = ModelParams::new(3, 4, 4, 0);
        let x = random_image(8, 8, 1, 0);
        assert!(matches!(
            forward(&params, &x),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn forward_is_translation_equivariant_in_the_interior() {
        let params = ModelParams::new(1, 4, 3, 11);
        let x1 = random_image(28, 28, 1, 5);
        let (sy, sx) = (2usize, 3usize);
        let x2 = Image::from_fn(28, 28, 1, |y, x, c| {
            if y >= sy && x >= sx {
                x1.get(y - sy, x - sx, c)
            } else {
                0.0
            }
        });
        let o1 = forward(&params, &x1).unwrap();
        let o2 = forward(&params, &x2).unwrap();
        for y in 10..20 {
            for x in 11..20 {
                let a = o2.get(y, x, 0);
                let b = o1.get(y - sy, x - sx, 0);
                assert!((a - b).abs() < 1e-5, "({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn pixel_loss_examples() {
        let a = random_image(4, 4, 1, 1);
        assert_eq!(pixel_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let y = Image::new(1, 1, 1, vec![1.0]).unwrap();
        let yhat = Image::new(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(pixel_loss(&[y], &[yhat]).unwrap(), 1.0);
    }

    #[test]
    fn pixel_loss_matches_scalar_oracle_on_batch_of_three() {
        let ys: Vec<Image> = (0..3).map(|i| random_image(5, 4, 3, i)).collect();
        let yhats: Vec<Image> = (10..13).map(|i| random_image(5, 4, 3, i)).collect();
        let got = pixel_loss(&ys, &yhats).unwrap();
        let mut expect = 0.0;
        for (a, b) in ys.iter().zip(&yhats) {
            for (p, q) in a.data().iter().zip(b.data()) {
                expect += (*p as f64 - *q as f64).powi(2);
            }
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn filter_loss_zero_residual_and_impulse_examples() {
        let bank = tiny_bank();
        let a = random_image(6, 6, 1, 3);
        assert_eq!(
            filter_loss(&[a.clone()], &[a.clone()], &bank).unwrap(),
            0.0
        );

        // Impulse residual: energy through each unit filter is exactly 1,
        // so the mean over the bank's two filters is 1.
        let y = Image::from_fn(5, 5, 1, |r, c, _| if r == 2 && c == 2 { 1.0 } else { 0.0 });
        let yhat = Image::zeros(5, 5, 1);
        let got = filter_loss(&[y], &[yhat], &bank).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn filter_loss_equals_gram_quadratic_form() {
        use crate::gram::gram_from_autocorr;
        let bank = tiny_bank();
        let y = random_image(7, 6, 1, 4);
        let yhat = random_image(7, 6, 1, 5);
        let got = filter_loss(&[y.clone()], &[yhat.clone()], &bank).unwrap();
        let res = crate::raster::residual(&y, &yhat).unwrap();
        let q = gram_from_autocorr(&res.plane(0), 2).unwrap();
        let mut expect = 0.0;
        for m in 0..2 {
            expect += q.quad_form(bank.filter(0, m));
        }
        expect /= 2.0;
        assert!(
            (got - expect).abs() < 1e-5 * expect.max(1e-9),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn filter_loss_is_permutation_invariant_and_quadratic_in_scale() {
        let bank = tiny_bank();
        let swapped = FilterBank::from_filters(
            1,
            2,
            2,
            0.05,
            [bank.filter(0, 1).to_vec(), bank.filter(0, 0).to_vec()].concat(),
        )
        .unwrap();
        let y = random_image(6, 8, 1, 6);
        let yhat = random_image(6, 8, 1, 7);
        let l1 = filter_loss(&[y.clone()], &[yhat.clone()], &bank).unwrap();
        let l2 = filter_loss(&[y.clone()], &[yhat.clone()], &swapped).unwrap();
        assert_eq!(l1, l2);

        // Scale the residual by 3 by scaling both images.
        let ys = Image::from_fn(6, 8, 1, |r, c, ch| 3.0 * y.get(r, c, ch));
        let yhats = Image::from_fn(6, 8, 1, |r, c, ch| 3.0 * yhat.get(r, c, ch));
        let l3 = filter_loss(&[ys], &[yhats], &bank).unwrap();
        assert!((l3 - 9.0 * l1).abs() < 1e-5 * l3.abs().max(1e-9));
    }

    #[test]
    fn total_loss_reduces_to_pixel_loss_at_alpha_zero() {
        let bank = tiny_bank();
        let y = vec![random_image(6, 6, 1, 8)];
        let yhat = vec![random_image(6, 6, 1, 9)];
        let total = total_loss(&y, &yhat, Some(&bank), 0.0).unwrap();
        let pixel = pixel_loss(&y, &yhat).unwrap();
        assert_eq!(total.to_bits(), pixel.to_bits());
        let with_filter = total_loss(&y, &yhat, Some(&bank), 0.5).unwrap();
        let expect = pixel + 0.5 * filter_loss(&y, &yhat, &bank).unwrap();
        assert!((with_filter - expect).abs() < 1e-6);
        assert!(matches!(
            total_loss(&y, &yhat, Some(&bank), -1.0),
            Err(Error::NegativeAlpha(_))
        ));
    }

    #[test]
    fn exact_zero_residual_gives_exact_zero_gradients() {
        let params = delta_identity_net();
        let x = random_image(9, 9, 1, 10);
        let batch = vec![(x.clone(), x.clone())];
        let bank = tiny_bank();
        let (parts, grads) = loss_and_grads(&params, &batch, Some(&bank), 1.0).unwrap();
        assert_eq!(parts.pixel, 0.0);
        assert_eq!(parts.filter, 0.0);
        for g in &grads.layers[2].weights {
            assert!(g.abs() <= 1e-7, "{g}");
        }
    }

    #[test]
    fn single_pixel_net_matches_hand_chain_rule() {
        // 1x1 image through the net: because every kernel is a centered delta
        // times a scalar, the map is w3*relu(w2*relu(w1*u + b1) + b2) + b3.
        let mut params = delta_identity_net();
        let (w1, w2, w3) = (0.8f32, -1.2f32, 0.6f32);
        let (b1, b2, b3) = (0.1f32, 0.9f32, -0.05f32);
        let centers: Vec<usize> = params
            .layers
            .iter()
            .map(|l| (l.kh / 2) * l.kw + l.kw / 2)
            .collect();
        params.layers[0].weights[centers[0]] = w1;
        params.layers[1].weights[centers[1]] = w2;
        params.layers[2].weights[centers[2]] = w3;
        params.layers[0].bias[0] = b1;
        params.layers[1].bias[0] = b2;
        params.layers[2].bias[0] = b3;

        let u = 0.5f32;
        let y = 0.3f32;
        let x = Image::new(1, 1, 1, vec![u]).unwrap();
        let t = Image::new(1, 1, 1, vec![y]).unwrap();
        let (_, grads) = loss_and_grads(&params, &[(x, t)], None, 0.0).unwrap();

        let z1 = (w1 as f64) * (u as f64) + b1 as f64;
        let a1 = z1.max(0.0);
        let z2 = (w2 as f64) * a1 + b2 as f64;
        let a2 = z2.max(0.0);
        let yhat = (w3 as f64) * a2 + b3 as f64;
        let dl = 2.0 * (yhat - y as f64);
        let dw3 = dl * a2;
        let db3 = dl;
        let da2 = dl * w3 as f64;
        let dz2 = if z2 > 0.0 { da2 } else { 0.0 };
        let dw2 = dz2 * a1;
        let db2 = dz2;
        let da1 = dz2 * w2 as f64;
        let dz1 = if z1 > 0.0 { da1 } else { 0.0 };
        let dw1 = dz1 * u as f64;
        let db1 = dz1;

        let tol = 1e-10;
        assert!((grads.layers[2].weights[centers[2]] - dw3).abs() < tol);
        assert!((grads.layers[2].bias[0] - db3).abs() < tol);
        assert!((grads.layers[1].weights[centers[1]] - dw2).abs() < tol);
        assert!((grads.layers[1].bias[0] - db2).abs() < tol);
        assert!((grads.layers[0].weights[centers[0]] - dw1).abs() < tol);
        assert!((grads.layers[0].bias[0] - db1).abs() < tol);
    }

    #[test]
    fn gradients_agree_with_finite_differences_on_a_small_net() {
        let params = ModelParams::new(1, 3, 2, 21);
        let batch: Vec<(Image, Image)> = (0..2)
            .map(|i| (random_image(8, 8, 1, 30 + i), random_image(8, 8, 1, 40 + i)))
            .collect();
        let bank = tiny_bank();
        let (_, grads) = loss_and_grads(&params, &batch, Some(&bank), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for li in 0..3 {
            for _ in 0..6 {
                let wi = rng.gen_range(0..params.layers[li].weights.len());
                let mut plus = params.clone();
                let mut minus = params.clone();
                let h = 1e-3f32;
                plus.layers[li].weights[wi] += h;
                minus.layers[li].weights[wi] -= h;
                let step =
                    plus.layers[li].weights[wi] as f64 - minus.layers[li].weights[wi] as f64;
                let lp = batch_loss(&plus, &batch, Some(&bank), 1.0).unwrap().total(1.0);
                let lm = batch_loss(&minus, &batch, Some(&bank), 1.0)
                    .unwrap()
                    .total(1.0);
                let fd = (lp - lm) / step;
                let an = grads.layers[li].weights[wi];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "layer {li} weight {wi}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ModelParams::new(1, 2, 2, 3);
        let reference = params.clone();
        let grads = ModelGrads::zeros(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params, reference);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = ModelParams::new(1, 2, 2, 4);
        let before = params.layers[0].weights[0];
        let mut grads = ModelGrads::zeros(&params);
        grads.layers[0].weights[0] = 3.7;
        let mut state = AdamState::new(&params);
        let lr = 0.01;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let delta = params.layers[0].weights[0] as f64 - before as f64;
        assert!(delta < 0.0);
        assert!(delta.abs() <= lr * (1.0 + 1e-6));
        assert!(delta.abs() > lr * 0.99);
    }

    #[test]
    fn adam_walks_a_quadratic_to_its_minimum() {
        // Track a single scalar parameter (the output bias) under f(p) = p^2,
        // alongside a textbook simulation with the same f32 narrowing.
        let mut params = ModelParams::new(1, 2, 2, 5);
        for l in params.layers.iter_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        params.layers[2].bias[0] = 1.0;
        let mut state = AdamState::new(&params);
        let lr = 0.1;

        let mut sim_p = 1.0f32;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=100 {
            let mut grads = ModelGrads::zeros(&params);
            let g = 2.0 * params.layers[2].bias[0] as f64;
            grads.layers[2].bias[0] = g;
            adam_step(&mut params, &grads, &mut state, lr).unwrap();

            let gs = 2.0 * sim_p as f64;
            m = BETA1 * m + (1.0 - BETA1) * gs;
            v = BETA2 * v + (1.0 - BETA2) * gs * gs;
            let mh = m / (1.0 - BETA1.powi(t));
            let vh = v / (1.0 - BETA2.powi(t));
            sim_p = (sim_p as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
        }
        let p = params.layers[2].bias[0];
        assert!((p - sim_p).abs() < 1e-7, "{p} vs {sim_p}");
        assert!(p.abs() < 0.05, "after 100 steps p = {p}");
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.srnw");
        let params = ModelParams::new(3, 4, 3, 17);
        params.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.srnw");
        let params = ModelParams::new(1, 2, 2, 0);
        params.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format(_))));

        let mut truncated = fs::read(&path).unwrap();
        truncated[0] = b'S';
        truncated.truncate(truncated.len() - 3);
        fs::write(&path, &truncated).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn empty_batch_and_negative_alpha_are_rejected() {
        let params = ModelParams::new(1, 2, 2, 0);
        assert!(matches!(
            loss_and_grads(&params, &[], None, 0.0),
            Err(Error::EmptyBatch)
        ));
        let x = random_image(6, 6, 1, 0);
        let batch = vec![(x.clone(), x)];
        assert!(matches!(
            loss_and_grads(&params, &batch, None, -0.5),
            Err(Error::NegativeAlpha(_))
        ));
    }
}
