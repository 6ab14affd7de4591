//! The desk-scale host network: a small convolutional classifier trained
//! from scratch, with capturable per-layer pre-activation outputs and
//! evaluation with or without response patching.
//!
//! Architecture is fixed: conv1 (12 filters, 5x5, 3 input channels) ->
//! rectifier -> 2x2 max-pool -> conv2 (16 filters, 3x3) -> rectifier ->
//! 2x2 max-pool -> affine to `n_classes`. All weights are f64.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_forward, ResponseTensor};

pub const CONV1_FILTERS: usize = 12;
pub const CONV1_KERNEL: usize = 5;
pub const IN_CHANNELS: usize = 3;
pub const CONV2_FILTERS: usize = 16;
pub const CONV2_KERNEL: usize = 3;
const POOL: usize = 2;

const NET_MAGIC: [u8; 4] = *b"TNET";
const NET_VERSION: u16 = 1;

/// Which representation of a convolution layer an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Linear response, before the rectifier.
    Pre,
    /// After the rectifier.
    Post,
}

/// Anything that can rewrite a layer's captured responses at inference time.
pub trait ResponsePatcher: Sync {
    fn layer(&self) -> usize;
    fn activation(&self) -> Activation;
    fn patch(&self, responses: &ResponseTensor) -> Result<ResponseTensor>;
}

/// Small trainable convolutional classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub n_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

/// Spatial sizes of every stage for a given input size.
#[derive(Debug, Clone, Copy)]
pub struct StageDims {
    pub c1: (usize, usize),
    pub p1: (usize, usize),
    pub c2: (usize, usize),
    pub p2: (usize, usize),
    pub fc_in: usize,
}

pub fn stage_dims(input_h: usize, input_w: usize) -> Result<StageDims> {
    if input_h < 12 || input_w < 12 {
        return Err(Error::DimMismatch {
            axis: "input size (need >= 12)",
            expected: 12,
            actual: input_h.min(input_w),
        });
    }
    let c1 = (input_h - CONV1_KERNEL + 1, input_w - CONV1_KERNEL + 1);
    let p1 = (c1.0 / POOL, c1.1 / POOL);
    let c2 = (p1.0 - CONV2_KERNEL + 1, p1.1 - CONV2_KERNEL + 1);
    let p2 = (c2.0 / POOL, c2.1 / POOL);
    let fc_in = CONV2_FILTERS * p2.0 * p2.1;
    Ok(StageDims { c1, p1, c2, p2, fc_in })
}

impl ToyNet {
    /// Fresh network with seeded He/Xavier weight init and zero biases.
    pub fn new(n_classes: usize, input_h: usize, input_w: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::DimMismatch {
                axis: "n_classes",
                expected: 2,
                actual: n_classes,
            });
        }
        let dims = stage_dims(input_h, input_w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..count).map(|_| dist.sample(rng)).collect()
        };
        let conv1_w = he(
            IN_CHANNELS * CONV1_KERNEL * CONV1_KERNEL,
            CONV1_FILTERS * IN_CHANNELS * CONV1_KERNEL * CONV1_KERNEL,
            &mut rng,
        );
        let conv2_w = he(
            CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL,
            CONV2_FILTERS * CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL,
            &mut rng,
        );
        let xavier = Normal::new(0.0, (1.0 / dims.fc_in as f64).sqrt()).unwrap();
        let fc_w: Vec<f64> = (0..n_classes * dims.fc_in)
            .map(|_| xavier.sample(&mut rng))
            .collect();
        Ok(Self {
            n_classes,
            input_h,
            input_w,
            conv1_w,
            conv1_b: vec![0.0; CONV1_FILTERS],
            conv2_w,
            conv2_b: vec![0.0; CONV2_FILTERS],
            fc_w,
            fc_b: vec![0.0; n_classes],
        })
    }

    pub fn n_conv_layers(&self) -> usize {
        2
    }

    pub fn dims(&self) -> StageDims {
        stage_dims(self.input_h, self.input_w).expect("validated at construction")
    }

    pub fn conv1_weights(&self) -> ResponseTensor {
        ResponseTensor::new(
            self.conv1_w.clone(),
            [CONV1_FILTERS, IN_CHANNELS, CONV1_KERNEL, CONV1_KERNEL],
        )
        .expect("conv1 weight block is well-formed")
    }

    pub fn conv2_weights(&self) -> ResponseTensor {
        ResponseTensor::new(
            self.conv2_w.clone(),
            [CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL],
        )
        .expect("conv2 weight block is well-formed")
    }

    pub fn set_conv1(&mut self, weights: &ResponseTensor, bias: &[f64]) {
        self.conv1_w.copy_from_slice(weights.data());
        self.conv1_b.copy_from_slice(bias);
    }

    /// Logits for a batch of images, optionally rewriting one layer's
    /// responses through `patcher` mid-forward.
    pub fn forward_logits(
        &self,
        images: &ResponseTensor,
        patcher: Option<&dyn ResponsePatcher>,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_internal(images, None, patcher)?.0)
    }

    /// Plain forward plus the captured pre-activation output of the given
    /// convolution layer (1 or 2). Scores are identical to [`Self::forward_logits`].
    pub fn forward_capture(
        &self,
        images: &ResponseTensor,
        capture_layer: usize,
    ) -> Result<(Vec<Vec<f64>>, ResponseTensor)> {
        self.forward_capture_mode(images, capture_layer, Activation::Pre)
    }

    /// Capture either the pre- or post-rectifier output of a layer.
    pub fn forward_capture_mode(
        &self,
        images: &ResponseTensor,
        capture_layer: usize,
        mode: Activation,
    ) -> Result<(Vec<Vec<f64>>, ResponseTensor)> {
        let (logits, captured) = self.forward_internal(images, Some((capture_layer, mode)), None)?;
        Ok((logits, captured.expect("capture requested")))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 1 || layer == 2 {
            Ok(())
        } else {
            Err(Error::LayerOutOfRange(layer, self.n_conv_layers()))
        }
    }

    fn forward_internal(
        &self,
        images: &ResponseTensor,
        capture: Option<(usize, Activation)>,
        patcher: Option<&dyn ResponsePatcher>,
    ) -> Result<(Vec<Vec<f64>>, Option<ResponseTensor>)> {
        let [_, c, h, w] = images.dims();
        if c != IN_CHANNELS || h != self.input_h || w != self.input_w {
            return Err(Error::DimMismatch {
                axis: "input image dims",
                expected: self.input_h,
                actual: h,
            });
        }
        if let Some((layer, _)) = capture {
            self.check_layer(layer)?;
        }
        if let Some(p) = patcher {
            self.check_layer(p.layer())?;
        }
        let dims = self.dims();

        let mut captured: Option<ResponseTensor> = None;
        let mut grab = |t: &ResponseTensor, layer: usize, mode: Activation| {
            if capture == Some((layer, mode)) {
                captured = Some(t.clone());
            }
        };
        let apply = |t: ResponseTensor, layer: usize, mode: Activation| -> Result<ResponseTensor> {
            match patcher {
                Some(p) if p.layer() == layer && p.activation() == mode => p.patch(&t),
                _ => Ok(t),
            }
        };

        let k1 = self.conv1_weights();
        let k2 = self.conv2_weights();

        let mut z1 = conv2d_forward(images, &k1, &self.conv1_b, 1)?;
        grab(&z1, 1, Activation::Pre);
        z1 = apply(z1, 1, Activation::Pre)?;
        let mut a1 = relu_tensor(&z1);
        grab(&a1, 1, Activation::Post);
        a1 = apply(a1, 1, Activation::Post)?;
        let p1 = maxpool_tensor(&a1);

        let mut z2 = conv2d_forward(&p1, &k2, &self.conv2_b, 1)?;
        grab(&z2, 2, Activation::Pre);
        z2 = apply(z2, 2, Activation::Pre)?;
        let mut a2 = relu_tensor(&z2);
        grab(&a2, 2, Activation::Post);
        a2 = apply(a2, 2, Activation::Post)?;
        let p2 = maxpool_tensor(&a2);

        let n = images.n_images();
        let mut logits = Vec::with_capacity(n);
        for img in 0..n {
            let start = p2.index(img, 0, 0, 0);
            let flat = &p2.data()[start..start + dims.fc_in];
            logits.push(self.fc_forward(flat));
        }
        Ok((logits, captured))
    }

    fn fc_forward(&self, flat: &[f64]) -> Vec<f64> {
        let fc_in = flat.len();
        (0..self.n_classes)
            .map(|k| {
                let row = &self.fc_w[k * fc_in..(k + 1) * fc_in];
                self.fc_b[k] + row.iter().zip(flat).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Mean cross-entropy and its gradient w.r.t. every parameter, over the
    /// given images. Gradient layout matches [`Self::params_flat`].
    pub fn loss_and_grad(&self, images: &ResponseTensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let n = images.n_images();
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        let per_image: Vec<(f64, Grads)> = (0..n)
            .into_par_iter()
            .map(|i| self.backprop_single(images, i, labels[i]))
            .collect();
        let mut loss = 0.0;
        let mut total = Grads::zeros(self);
        for (l, g) in per_image {
            loss += l;
            total.add(&g);
        }
        let scale = 1.0 / n as f64;
        loss *= scale;
        total.scale(scale);
        Ok((loss, total.into_flat()))
    }

    fn backprop_single(&self, images: &ResponseTensor, img: usize, label: usize) -> (f64, Grads) {
        let dims = self.dims();
        let (h, w) = (self.input_h, self.input_w);
        let input = {
            let start = images.index(img, 0, 0, 0);
            &images.data()[start..start + IN_CHANNELS * h * w]
        };

        // forward with caches
        let z1 = conv_single(
            input,
            IN_CHANNELS,
            (h, w),
            &self.conv1_w,
            &self.conv1_b,
            CONV1_FILTERS,
            CONV1_KERNEL,
        );
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let (p1, idx1) = maxpool_single(&a1, CONV1_FILTERS, dims.c1);
        let z2 = conv_single(
            &p1,
            CONV1_FILTERS,
            dims.p1,
            &self.conv2_w,
            &self.conv2_b,
            CONV2_FILTERS,
            CONV2_KERNEL,
        );
        let a2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        let (p2, idx2) = maxpool_single(&a2, CONV2_FILTERS, dims.c2);
        let logits = self.fc_forward(&p2);

        // softmax cross-entropy
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -probs[label].max(1e-300).ln();
        let mut dlogits = probs;
        dlogits[label] -= 1.0;

        let mut g = Grads::zeros(self);
        // fc
        let mut dflat = vec![0.0; dims.fc_in];
        for k in 0..self.n_classes {
            let dk = dlogits[k];
            g.fc_b[k] += dk;
            let row = &self.fc_w[k * dims.fc_in..(k + 1) * dims.fc_in];
            let grow = &mut g.fc_w[k * dims.fc_in..(k + 1) * dims.fc_in];
            for i in 0..dims.fc_in {
                grow[i] += dk * p2[i];
                dflat[i] += dk * row[i];
            }
        }
        // pool2 + relu2
        let da2 = maxpool_backward(&dflat, &idx2, a2.len());
        let dz2: Vec<f64> = da2
            .iter()
            .zip(&z2)
            .map(|(&d, &zv)| if zv > 0.0 { d } else { 0.0 })
            .collect();
        // conv2
        let dp1 = conv_backward(
            &p1,
            CONV1_FILTERS,
            dims.p1,
            &self.conv2_w,
            CONV2_FILTERS,
            CONV2_KERNEL,
            &dz2,
            &mut g.conv2_w,
            &mut g.conv2_b,
        );
        // pool1 + relu1
        let da1 = maxpool_backward(&dp1, &idx1, a1.len());
        let dz1: Vec<f64> = da1
            .iter()
            .zip(&z1)
            .map(|(&d, &zv)| if zv > 0.0 { d } else { 0.0 })
            .collect();
        // conv1 (input gradient discarded)
        let _ = conv_backward(
            input,
            IN_CHANNELS,
            (h, w),
            &self.conv1_w,
            CONV1_FILTERS,
            CONV1_KERNEL,
            &dz1,
            &mut g.conv1_w,
            &mut g.conv1_b,
        );
        (loss, g)
    }

    /// All parameters as one flat vector (declaration order).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.conv1_w);
        out.extend_from_slice(&self.conv1_b);
        out.extend_from_slice(&self.conv2_w);
        out.extend_from_slice(&self.conv2_b);
        out.extend_from_slice(&self.fc_w);
        out.extend_from_slice(&self.fc_b);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for chunk in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ] {
            chunk.copy_from_slice(&flat[pos..pos + chunk.len()]);
            pos += chunk.len();
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&NET_MAGIC)?;
        w.write_u16::<LittleEndian>(NET_VERSION)?;
        for v in [
            IN_CHANNELS,
            CONV1_FILTERS,
            CONV1_KERNEL,
            CONV2_FILTERS,
            CONV2_KERNEL,
            self.n_classes,
            self.input_h,
            self.input_w,
        ] {
            w.write_u16::<LittleEndian>(v as u16)?;
        }
        for v in self.params_flat() {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let display = path.as_ref().display().to_string();
        let mut r = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::Corrupt {
            path: display.clone(),
            detail: e.to_string(),
        })?;
        if magic != NET_MAGIC {
            return Err(Error::BadMagic {
                path: display,
                expected: NET_MAGIC,
                actual: magic,
            });
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != NET_VERSION {
            return Err(Error::BadVersion {
                path: display,
                expected: NET_VERSION,
                got: version,
            });
        }
        let mut header = [0usize; 8];
        for h in &mut header {
            *h = r.read_u16::<LittleEndian>()? as usize;
        }
        let expected = [IN_CHANNELS, CONV1_FILTERS, CONV1_KERNEL, CONV2_FILTERS, CONV2_KERNEL];
        if header[..5] != expected {
            return Err(Error::Corrupt {
                path: display,
                detail: format!("architecture header {header:?} does not match this build"),
            });
        }
        let (n_classes, input_h, input_w) = (header[5], header[6], header[7]);
        let mut net = ToyNet::new(n_classes, input_h, input_w, 0)?;
        let count = net.params_flat().len();
        let mut flat = vec![0.0; count];
        for v in flat.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| Error::Corrupt {
                path: display.clone(),
                detail: format!("truncated weight block: {e}"),
            })?;
        }
        net.set_params_flat(&flat);
        Ok(net)
    }
}

struct Grads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl Grads {
    fn zeros(net: &ToyNet) -> Self {
        Self {
            conv1_w: vec![0.0; net.conv1_w.len()],
            conv1_b: vec![0.0; net.conv1_b.len()],
            conv2_w: vec![0.0; net.conv2_w.len()],
            conv2_b: vec![0.0; net.conv2_b.len()],
            fc_w: vec![0.0; net.fc_w.len()],
            fc_b: vec![0.0; net.fc_b.len()],
        }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in [
            (&mut self.conv1_w, &other.conv1_w),
            (&mut self.conv1_b, &other.conv1_b),
            (&mut self.conv2_w, &other.conv2_w),
            (&mut self.conv2_b, &other.conv2_b),
            (&mut self.fc_w, &other.fc_w),
            (&mut self.fc_b, &other.fc_b),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, c: f64) {
        for a in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ] {
            for x in a.iter_mut() {
                *x *= c;
            }
        }
    }

    fn into_flat(self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc_w,
            self.fc_b,
        ] {
            out.extend(a);
        }
        out
    }
}

fn conv_single(
    input: &[f64],
    c_in: usize,
    (h, w): (usize, usize),
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for f in 0..c_out {
        let out_map = &mut out[f * oh * ow..(f + 1) * oh * ow];
        out_map.fill(bias[f]);
        for c in 0..c_in {
            let in_map = &input[c * h * w..(c + 1) * h * w];
            let k_map = &weights[(f * c_in + c) * k * k..(f * c_in + c + 1) * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let in_row = &in_map[(oy + ky) * w + ox..(oy + ky) * w + ox + k];
                        let k_row = &k_map[ky * k..ky * k + k];
                        for (iv, kv) in in_row.iter().zip(k_row) {
                            acc += iv * kv;
                        }
                    }
                    out_map[oy * ow + ox] += acc;
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    c_in: usize,
    (h, w): (usize, usize),
    weights: &[f64],
    c_out: usize,
    k: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut dinput = vec![0.0; c_in * h * w];
    for f in 0..c_out {
        let dmap = &dout[f * oh * ow..(f + 1) * oh * ow];
        dbias[f] += dmap.iter().sum::<f64>();
        for c in 0..c_in {
            let in_map = &input[c * h * w..(c + 1) * h * w];
            let k_map = &weights[(f * c_in + c) * k * k..(f * c_in + c + 1) * k * k];
            let dk_map = &mut dweights[(f * c_in + c) * k * k..(f * c_in + c + 1) * k * k];
            let din_map = &mut dinput[c * h * w..(c + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dmap[oy * ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let base = (oy + ky) * w + ox;
                        for kx in 0..k {
                            dk_map[ky * k + kx] += d * in_map[base + kx];
                            din_map[base + kx] += d * k_map[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    dinput
}

fn maxpool_single(input: &[f64], channels: usize, (h, w): (usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let oh = h / POOL;
    let ow = w / POOL;
    let mut out = vec![0.0; channels * oh * ow];
    let mut idx = vec![0usize; channels * oh * ow];
    for c in 0..channels {
        let in_map = &input[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let i = (oy * POOL + dy) * w + ox * POOL + dx;
                        if in_map[i] > best {
                            best = in_map[i];
                            best_i = i;
                        }
                    }
                }
                out[(c * oh + oy) * ow + ox] = best;
                idx[(c * oh + oy) * ow + ox] = c * h * w + best_i;
            }
        }
    }
    (out, idx)
}

fn maxpool_backward(dout: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut din = vec![0.0; input_len];
    for (&d, &i) in dout.iter().zip(idx) {
        din[i] += d;
    }
    din
}

fn relu_tensor(t: &ResponseTensor) -> ResponseTensor {
    let data: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
    ResponseTensor::new(data, t.dims()).expect("relu preserves shape")
}

fn maxpool_tensor(t: &ResponseTensor) -> ResponseTensor {
    let [n, c, h, w] = t.dims();
    let oh = h / POOL;
    let ow = w / POOL;
    let mut out = ResponseTensor::zeros([n, c, oh, ow]).expect("pool output dims");
    for img in 0..n {
        for ch in 0..c {
            let in_map = t.map_slice(img, ch);
            let out_map = out.map_slice_mut(img, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..POOL {
                        for dx in 0..POOL {
                            best = best.max(in_map[(oy * POOL + dy) * w + ox * POOL + dx]);
                        }
                    }
                    out_map[oy * ow + ox] = best;
                }
            }
        }
    }
    out
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 7,
            batch_size: 32,
        }
    }
}

/// A trained network plus its per-epoch mean training loss.
#[derive(Debug)]
pub struct TrainOutcome {
    pub net: ToyNet,
    pub epoch_loss: Vec<f64>,
}

/// Seeded mini-batch gradient descent with momentum on softmax
/// cross-entropy. Returns the final-epoch network; per-epoch loss is logged
/// and returned.
pub fn train(dataset: &DatasetBundle, params: &TrainParams) -> Result<TrainOutcome> {
    let n_classes = dataset.n_classes();
    if n_classes < 2 {
        return Err(Error::DimMismatch {
            axis: "n_classes",
            expected: 2,
            actual: n_classes,
        });
    }
    let [n, _, h, w] = dataset.images.dims();
    let mut net = ToyNet::new(n_classes, h, w, params.seed)?;
    let mut velocity = vec![0.0; net.params_flat().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xba7c_4e11);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(params.batch_size) {
            let batch_images = gather_images(&dataset.images, batch)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, grad) = net.loss_and_grad(&batch_images, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged);
            }
            loss_sum += loss;
            batches += 1;
            let mut flat = net.params_flat();
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(flat.iter_mut()) {
                *v = params.momentum * *v + g;
                *p -= params.learning_rate * *v;
            }
            net.set_params_flat(&flat);
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.6}");
        epoch_loss.push(mean_loss);
    }
    Ok(TrainOutcome { net, epoch_loss })
}

fn gather_images(images: &ResponseTensor, indices: &[usize]) -> Result<ResponseTensor> {
    let [_, c, h, w] = images.dims();
    let stride = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        let start = images.index(i, 0, 0, 0);
        data.extend_from_slice(&images.data()[start..start + stride]);
    }
    ResponseTensor::new(data, [indices.len(), c, h, w])
}

/// Top-1 accuracy, with the optional patcher applied mid-forward.
pub fn evaluate(
    net: &ToyNet,
    dataset: &DatasetBundle,
    patcher: Option<&dyn ResponsePatcher>,
) -> Result<f64> {
    let n = dataset.images.n_images();
    if n == 0 || dataset.labels.is_empty() {
        return Err(Error::EmptySamples("evaluation dataset"));
    }
    let mut correct = 0usize;
    let chunk = 128;
    let indices: Vec<usize> = (0..n).collect();
    for block in indices.chunks(chunk) {
        let images = gather_images(&dataset.images, block)?;
        let logits = net.forward_logits(&images, patcher)?;
        for (pos, &i) in block.iter().enumerate() {
            let pred = argmax(&logits[pos]);
            if pred == dataset.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, DatasetBundle};

    #[test]
    fn zero_image_with_zero_biases_is_uniform() {
        let net = ToyNet::new(5, 16, 16, 3).unwrap();
        let images = ResponseTensor::zeros([1, 3, 16, 16]).unwrap();
        let logits = net.forward_logits(&images, None).unwrap();
        for &l in &logits[0] {
            assert!((l - logits[0][0]).abs() < 1e-15);
        }
    }

    #[test]
    fn capture_shape_arithmetic() {
        let net = ToyNet::new(4, 28, 28, 1).unwrap();
        let images = ResponseTensor::zeros([3, 3, 28, 28]).unwrap();
        let (_, captured) = net.forward_capture(&images, 1).unwrap();
        assert_eq!(captured.dims(), [3, CONV1_FILTERS, 24, 24]);
        let (_, captured2) = net.forward_capture(&images, 2).unwrap();
        assert_eq!(captured2.dims(), [3, CONV2_FILTERS, 10, 10]);
    }

    #[test]
    fn capture_does_not_change_scores() {
        let bundle = gen_shapes(3, 4, 20, 99).unwrap();
        let net = ToyNet::new(4, 20, 20, 5).unwrap();
        let plain = net.forward_logits(&bundle.images, None).unwrap();
        let (captured_scores, _) = net.forward_capture(&bundle.images, 1).unwrap();
        assert_eq!(plain, captured_scores);
    }

    #[test]
    fn captured_layer1_matches_direct_convolution() {
        let bundle = gen_shapes(2, 2, 16, 42).unwrap();
        let net = ToyNet::new(2, 16, 16, 9).unwrap();
        let (_, captured) = net.forward_capture(&bundle.images, 1).unwrap();
        let direct = conv2d_forward(
            &bundle.images,
            &net.conv1_weights(),
            &net.conv1_b,
            1,
        )
        .unwrap();
        assert_eq!(captured, direct);
    }

    #[test]
    fn invalid_layer_is_rejected() {
        let net = ToyNet::new(2, 16, 16, 1).unwrap();
        let images = ResponseTensor::zeros([1, 3, 16, 16]).unwrap();
        assert!(matches!(
            net.forward_capture(&images, 3),
            Err(Error::LayerOutOfRange(3, 2))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let bundle = gen_shapes(4, 2, 16, 11).unwrap();
        let params = TrainParams {
            epochs: 2,
            learning_rate: 0.0,
            seed: 13,
            ..TrainParams::default()
        };
        let outcome = train(&bundle, &params).unwrap();
        let fresh = ToyNet::new(2, 16, 16, 13).unwrap();
        assert_eq!(outcome.net.params_flat(), fresh.params_flat());
    }

    #[test]
    fn same_seed_trains_byte_identical_networks() {
        let bundle = gen_shapes(6, 3, 16, 21).unwrap();
        let params = TrainParams {
            epochs: 2,
            seed: 77,
            ..TrainParams::default()
        };
        let a = train(&bundle, &params).unwrap();
        let b = train(&bundle, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.tnet");
        let pb = dir.path().join("b.tnet");
        a.net.save(&pa).unwrap();
        b.net.save(&pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn separable_task_reaches_high_accuracy_and_loss_decreases() {
        let bundle = gen_shapes(30, 2, 20, 31).unwrap();
        let params = TrainParams {
            epochs: 20,
            learning_rate: 0.05,
            seed: 5,
            ..TrainParams::default()
        };
        let outcome = train(&bundle, &params).unwrap();
        for i in 0..4 {
            assert!(
                outcome.epoch_loss[i + 1] < outcome.epoch_loss[i],
                "loss must decrease over the first epochs: {:?}",
                &outcome.epoch_loss[..6]
            );
        }
        let acc = evaluate(&outcome.net, &bundle, None).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn training_beats_permuted_labels() {
        let bundle = gen_shapes(12, 3, 16, 41).unwrap();
        let params = TrainParams {
            epochs: 8,
            seed: 3,
            ..TrainParams::default()
        };
        let outcome = train(&bundle, &params).unwrap();
        let mut permuted = bundle.clone();
        permuted.labels.rotate_left(1);
        let acc_true = evaluate(&outcome.net, &bundle, None).unwrap();
        let acc_perm = evaluate(&outcome.net, &permuted, None).unwrap();
        assert!(acc_true >= acc_perm);
    }

    #[test]
    fn random_net_on_balanced_ten_class_set_is_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let n = 1000;
        let count = n * 3 * 16 * 16;
        let data: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..1.0)).collect();
        let images = ResponseTensor::new(data, [n, 3, 16, 16]).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let bundle = DatasetBundle::new(images, labels, "noise", "none", 55).unwrap();
        let mut accs = Vec::new();
        for seed in 0..10 {
            let net = ToyNet::new(10, 16, 16, seed).unwrap();
            accs.push(evaluate(&net, &bundle, None).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.10).abs() <= 0.03, "mean accuracy {mean}");
    }

    #[test]
    fn relu_is_idempotent() {
        let t = ResponseTensor::new(vec![-1.0, 0.0, 2.5, -0.3], [1, 1, 2, 2]).unwrap();
        let once = relu_tensor(&t);
        let twice = relu_tensor(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let net = ToyNet::new(6, 18, 18, 123).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("net.tnet");
        let p2 = dir.path().join("net2.tnet");
        net.save(&p1).unwrap();
        let loaded = ToyNet::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(net, loaded);
    }

    #[test]
    fn truncated_net_file_is_corrupt() {
        let net = ToyNet::new(3, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.tnet");
        net.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ToyNet::load(&p), Err(Error::Corrupt { .. })));
    }
}
