//! Encoder-decoder 1-D CNN that maps a GCC-PHAT lag vector to a Gaussian
//! delay likelihood, with manual backpropagation, Adam and early stopping.
//!
//! Each block is `conv(k=4) -> max-pool/upsample(2) -> batchnorm -> ReLU`.
//! The convolution pads two samples on the left and one on the right so its
//! output keeps the input length; the pooling stage halves it (encoder) and
//! the upsampling stage doubles it by repetition (decoder).
//!
//! Activations are laid out `[batch][channel][time]` in one flat buffer.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{DelayLikelihood, GccFrame};
use crate::error::{Error, Result};
use crate::sim::TrainingPair;

pub const KERNEL: usize = 4;
const PAD_LEFT: usize = 2;
const PAD_RIGHT: usize = 1;
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-3;

/// Channel progression of the default network.
pub const DEFAULT_CHANNELS: [usize; 9] = [1, 2, 8, 32, 128, 32, 8, 2, 1];

pub trait Scalar: Float + Sum + Send + Sync + Debug + Default + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn lit<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Max-pool by two.
    Halve,
    /// Nearest-neighbour repetition by two.
    Double,
}

impl Resample {
    fn out_len(self, len: usize) -> usize {
        match self {
            Resample::Halve => len / 2,
            Resample::Double => len * 2,
        }
    }

    fn code(self) -> u32 {
        match self {
            Resample::Halve => 0,
            Resample::Double => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Resample::Halve),
            1 => Some(Resample::Double),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the stored running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub resample: Resample,
    /// `[out][in][KERNEL]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(in_ch: usize, out_ch: usize, resample: Resample, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_ch * KERNEL) as f64).sqrt();
        let weight = (0..out_ch * in_ch * KERNEL)
            .map(|_| lit(rng.gen_range(-limit..limit)))
            .collect();
        ConvBlock {
            in_ch,
            out_ch,
            resample,
            weight,
            bias: vec![T::zero(); out_ch],
            gamma: vec![T::one(); out_ch],
            beta: vec![T::zero(); out_ch],
            running_mean: vec![T::zero(); out_ch],
            running_var: vec![T::one(); out_ch],
        }
    }

    pub fn conv_param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn norm_param_count(&self) -> usize {
        4 * self.out_ch
    }

    /// Trainable arrays in checkpoint / optimiser order.
    fn trainable(&self) -> [&Vec<T>; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    fn trainable_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| lit::<U>(x.to_f64().expect("finite"))).collect();
        ConvBlock {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            resample: self.resample,
            weight: c(&self.weight),
            bias: c(&self.bias),
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
        }
    }
}

/// Shape of a network: input length and channel count at every block
/// boundary. The first half of the blocks pool, the second half upsample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_len: usize,
    pub channels: Vec<usize>,
}

impl Architecture {
    pub fn deepgcc(input_len: usize) -> Self {
        Architecture {
            input_len,
            channels: DEFAULT_CHANNELS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len().saturating_sub(1);
        if blocks == 0 || !blocks.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "need an even, non-zero number of blocks, got {blocks}"
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::shape("channel counts must be positive"));
        }
        let factor = 1usize << (blocks / 2);
        if self.input_len == 0 || !self.input_len.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "input length {} is not divisible by {factor}",
                self.input_len
            )));
        }
        Ok(())
    }

    fn resample_for(&self, block: usize) -> Resample {
        if block < (self.channels.len() - 1) / 2 {
            Resample::Halve
        } else {
            Resample::Double
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_len: usize,
    blocks: Vec<ConvBlock<T>>,
}

/// The network in its stored (single precision) form.
pub type EncoderDecoderNet = Network<f32>;

/// Parameter totals, split the way the architecture is usually quoted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub conv: usize,
    pub batchnorm: usize,
    pub trainable: usize,
    pub total: usize,
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = arch
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBlock::new(w[0], w[1], arch.resample_for(i), &mut rng))
            .collect();
        Ok(Network {
            input_len: arch.input_len,
            blocks,
        })
    }

    pub fn from_blocks(input_len: usize, blocks: Vec<ConvBlock<T>>) -> Result<Self> {
        let net = Network { input_len, blocks };
        net.check_structure()?;
        Ok(net)
    }

    fn check_structure(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::shape("network has no blocks"));
        }
        if self.blocks[0].in_ch != 1 || self.blocks.last().map(|b| b.out_ch) != Some(1) {
            return Err(Error::shape("network must map one channel to one channel"));
        }
        let mut len = self.input_len;
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 && self.blocks[i - 1].out_ch != b.in_ch {
                return Err(Error::shape(format!("block {i} input channels do not chain")));
            }
            let n = b.out_ch;
            if b.weight.len() != n * b.in_ch * KERNEL
                || b.bias.len() != n
                || b.gamma.len() != n
                || b.beta.len() != n
                || b.running_mean.len() != n
                || b.running_var.len() != n
            {
                return Err(Error::shape(format!("block {i} parameter arrays have wrong sizes")));
            }
            if b.running_var.iter().any(|v| !(*v > T::zero())) {
                return Err(Error::invalid(format!("block {i} has non-positive running variance")));
            }
            if b.resample == Resample::Halve && !len.is_multiple_of(2) {
                return Err(Error::shape(format!("block {i} pools an odd length {len}")));
            }
            len = b.resample.out_len(len);
        }
        if len != self.input_len {
            return Err(Error::shape(format!("network maps length {} to {len}", self.input_len)));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn blocks(&self) -> &[ConvBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvBlock<T>] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> ParamCount {
        let conv = self.blocks.iter().map(ConvBlock::conv_param_count).sum();
        let batchnorm = self.blocks.iter().map(ConvBlock::norm_param_count).sum();
        let trainable = conv + self.blocks.iter().map(|b| 2 * b.out_ch).sum::<usize>();
        ParamCount {
            conv,
            batchnorm,
            trainable,
            total: conv + batchnorm,
        }
    }

    /// `(length, channels)` at the input and after every block.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.input_len, 1)];
        let mut len = self.input_len;
        for b in &self.blocks {
            len = b.resample.out_len(len);
            out.push((len, b.out_ch));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_len: self.input_len,
            blocks: self.blocks.iter().map(ConvBlock::cast).collect(),
        }
    }

    /// Pack a batch of f64 vectors into the activation layout.
    pub fn batch_from(&self, inputs: &[&[f64]]) -> Result<Vec<T>> {
        let mut flat = Vec::with_capacity(inputs.len() * self.input_len);
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != self.input_len {
                return Err(Error::shape(format!(
                    "input {i} has length {}, network expects {}",
                    x.len(),
                    self.input_len
                )));
            }
            flat.extend(x.iter().map(|v| lit::<T>(*v)));
        }
        Ok(flat)
    }

    /// Run a batch of `batch` inputs (flattened `[batch][input_len]`).
    pub fn forward(&self, input: &[T], batch: usize, mode: Mode) -> Result<ForwardPass<T>> {
        if batch == 0 || input.len() != batch * self.input_len {
            return Err(Error::shape(format!(
                "batch of {batch} needs {} values, got {}",
                batch * self.input_len,
                input.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = input.to_vec();
        let mut len = self.input_len;
        for block in &self.blocks {
            let cache = block_forward(block, x, batch, len, mode);
            len = cache.out_len;
            x = cache.out.clone();
            caches.push(cache);
        }
        Ok(ForwardPass { batch, mode, caches })
    }

    /// Gradients of the loss with respect to every trainable parameter given
    /// the loss gradient at the network output.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_output: &[T]) -> Result<Gradients<T>> {
        let last = pass.caches.last().expect("non-empty");
        if grad_output.len() != last.out.len() {
            return Err(Error::shape("output gradient does not match the forward pass"));
        }
        let mut grads: Vec<BlockGrads<T>> = Vec::with_capacity(self.blocks.len());
        let mut dout = grad_output.to_vec();
        for (block, cache) in self.blocks.iter().zip(&pass.caches).rev() {
            let (g, dx) = block_backward(block, cache, &dout, pass.batch, pass.mode);
            grads.push(g);
            dout = dx;
        }
        grads.reverse();
        Ok(Gradients { blocks: grads })
    }

    /// Fold the batch statistics of a training pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        if pass.mode != Mode::Train {
            return;
        }
        let m: T = lit(BN_MOMENTUM);
        for (block, cache) in self.blocks.iter_mut().zip(&pass.caches) {
            for c in 0..block.out_ch {
                block.running_mean[c] = m * block.running_mean[c] + (T::one() - m) * cache.mean[c];
                block.running_var[c] = m * block.running_var[c] + (T::one() - m) * cache.var[c];
            }
        }
    }

    /// MSE loss and its parameter gradients on one batch.
    pub fn loss_and_grad(
        &self,
        input: &[T],
        target: &[T],
        batch: usize,
        mode: Mode,
    ) -> Result<(T, Gradients<T>, ForwardPass<T>)> {
        let pass = self.forward(input, batch, mode)?;
        let out = pass.output();
        if target.len() != out.len() {
            return Err(Error::shape("target batch does not match the output"));
        }
        let n: T = lit(out.len() as f64);
        let two: T = lit(2.0);
        let mut loss = T::zero();
        let mut dout = Vec::with_capacity(out.len());
        for (p, t) in out.iter().zip(target) {
            let d = *p - *t;
            loss = loss + d * d;
            dout.push(two * d / n);
        }
        let grads = self.backward(&pass, &dout)?;
        Ok((loss / n, grads, pass))
    }

    /// Inference-mode prediction for several lag vectors.
    pub fn predict(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let flat = self.batch_from(inputs)?;
        let pass = self.forward(&flat, inputs.len(), Mode::Infer)?;
        Ok(pass
            .output()
            .chunks(self.input_len)
            .map(|c| c.iter().map(|v| v.to_f64().expect("finite")).collect())
            .collect())
    }

    /// Single-frame forward pass. In [`Mode::Train`] the frame is normalised
    /// with its own statistics, which are then folded into the running ones.
    pub fn forward_frame(&mut self, input: &GccFrame, mode: Mode) -> Result<DelayLikelihood> {
        let flat = self.batch_from(&[&input.lags])?;
        let pass = self.forward(&flat, 1, mode)?;
        self.update_running_stats(&pass);
        Ok(DelayLikelihood {
            values: pass.output().iter().map(|v| v.to_f64().expect("finite")).collect(),
            fs: input.fs,
        })
    }

    /// Trainable arrays of every block, flattened in a fixed order.
    pub fn trainable_arrays(&self) -> Vec<&Vec<T>> {
        self.blocks.iter().flat_map(|b| b.trainable()).collect()
    }

    pub fn trainable_arrays_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.blocks.iter_mut().flat_map(|b| b.trainable_mut()).collect()
    }
}

/// Per-block intermediates kept for backpropagation.
#[derive(Debug, Clone)]
struct BlockCache<T> {
    in_len: usize,
    out_len: usize,
    /// Input with the convolution padding applied, `[batch][in][in_len + 3]`.
    padded: Vec<T>,
    /// Flat index into the conv output chosen by each pooled sample.
    pool_index: Vec<u32>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    /// Batchnorm output before the ReLU.
    pre_act: Vec<T>,
    out: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    batch: usize,
    mode: Mode,
    caches: Vec<BlockCache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &[T] {
        &self.caches.last().expect("non-empty").out
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `(length, channels)` produced by every block.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.caches
            .iter()
            .map(|c| (c.out_len, c.out.len() / (self.batch * c.out_len)))
            .collect()
    }

    /// Output of block `i`, `[batch][channels][len]`.
    pub fn block_output(&self, i: usize) -> &[T] {
        &self.caches[i].out
    }
}

fn block_forward<T: Scalar>(b: &ConvBlock<T>, x: Vec<T>, batch: usize, in_len: usize, mode: Mode) -> BlockCache<T> {
    let (cin, cout) = (b.in_ch, b.out_ch);
    let plen = in_len + PAD_LEFT + PAD_RIGHT;

    let mut padded = vec![T::zero(); batch * cin * plen];
    for bi in 0..batch {
        for i in 0..cin {
            let src = &x[(bi * cin + i) * in_len..][..in_len];
            padded[(bi * cin + i) * plen + PAD_LEFT..][..in_len].copy_from_slice(src);
        }
    }

    // convolution, length preserving
    let mut conv = vec![T::zero(); batch * cout * in_len];
    for bi in 0..batch {
        for o in 0..cout {
            let row = &mut conv[(bi * cout + o) * in_len..][..in_len];
            row.iter_mut().for_each(|v| *v = b.bias[o]);
            for i in 0..cin {
                let xp = &padded[(bi * cin + i) * plen..][..plen];
                let w = &b.weight[(o * cin + i) * KERNEL..][..KERNEL];
                for (k, &wk) in w.iter().enumerate() {
                    for (r, &xv) in row.iter_mut().zip(&xp[k..k + in_len]) {
                        *r = *r + wk * xv;
                    }
                }
            }
        }
    }

    // resample
    let out_len = b.resample.out_len(in_len);
    let mut res = vec![T::zero(); batch * cout * out_len];
    let mut pool_index = Vec::new();
    match b.resample {
        Resample::Halve => {
            pool_index = vec![0u32; res.len()];
            for row in 0..batch * cout {
                for t in 0..out_len {
                    let a = row * in_len + 2 * t;
                    // ties keep the earlier sample
                    let pick = if conv[a + 1] > conv[a] { a + 1 } else { a };
                    res[row * out_len + t] = conv[pick];
                    pool_index[row * out_len + t] = pick as u32;
                }
            }
        }
        Resample::Double => {
            for row in 0..batch * cout {
                for t in 0..out_len {
                    res[row * out_len + t] = conv[row * in_len + t / 2];
                }
            }
        }
    }

    // batchnorm
    let count: T = lit((batch * out_len) as f64);
    let eps: T = lit(BN_EPS);
    let mut mean = vec![T::zero(); cout];
    let mut var = vec![T::zero(); cout];
    let mut inv_std = vec![T::zero(); cout];
    for c in 0..cout {
        let (m, v) = match mode {
            Mode::Train => {
                let mut s = T::zero();
                for bi in 0..batch {
                    s = s + res[(bi * cout + c) * out_len..][..out_len].iter().copied().sum::<T>();
                }
                let m = s / count;
                let mut q = T::zero();
                for bi in 0..batch {
                    for v in &res[(bi * cout + c) * out_len..][..out_len] {
                        let d = *v - m;
                        q = q + d * d;
                    }
                }
                (m, q / count)
            }
            Mode::Infer => (b.running_mean[c], b.running_var[c]),
        };
        mean[c] = m;
        var[c] = v;
        inv_std[c] = T::one() / (v + eps).sqrt();
    }
    let mut xhat = vec![T::zero(); res.len()];
    let mut pre_act = vec![T::zero(); res.len()];
    let mut out = vec![T::zero(); res.len()];
    for bi in 0..batch {
        for c in 0..cout {
            let base = (bi * cout + c) * out_len;
            for t in base..base + out_len {
                let h = (res[t] - mean[c]) * inv_std[c];
                let y = b.gamma[c] * h + b.beta[c];
                xhat[t] = h;
                pre_act[t] = y;
                out[t] = if y > T::zero() { y } else { T::zero() };
            }
        }
    }

    BlockCache {
        in_len,
        out_len,
        padded,
        pool_index,
        xhat,
        inv_std,
        mean,
        var,
        pre_act,
        out,
    }
}

fn block_backward<T: Scalar>(
    b: &ConvBlock<T>,
    cache: &BlockCache<T>,
    dout: &[T],
    batch: usize,
    mode: Mode,
) -> (BlockGrads<T>, Vec<T>) {
    let (cin, cout) = (b.in_ch, b.out_ch);
    let (in_len, out_len) = (cache.in_len, cache.out_len);

    // ReLU
    let dy: Vec<T> = dout
        .iter()
        .zip(&cache.pre_act)
        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
        .collect();

    // batchnorm
    let mut dgamma = vec![T::zero(); cout];
    let mut dbeta = vec![T::zero(); cout];
    let mut dres = vec![T::zero(); dy.len()];
    let count: T = lit((batch * out_len) as f64);
    for c in 0..cout {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..batch {
            let base = (bi * cout + c) * out_len;
            for t in base..base + out_len {
                sum_dy = sum_dy + dy[t];
                sum_dy_xhat = sum_dy_xhat + dy[t] * cache.xhat[t];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = b.gamma[c];
        let s = cache.inv_std[c];
        for bi in 0..batch {
            let base = (bi * cout + c) * out_len;
            for t in base..base + out_len {
                dres[t] = match mode {
                    Mode::Train => g * s / count * (count * dy[t] - sum_dy - cache.xhat[t] * sum_dy_xhat),
                    Mode::Infer => g * s * dy[t],
                };
            }
        }
    }

    // resample
    let mut dconv = vec![T::zero(); batch * cout * in_len];
    match b.resample {
        Resample::Halve => {
            for (d, &idx) in dres.iter().zip(&cache.pool_index) {
                dconv[idx as usize] = dconv[idx as usize] + *d;
            }
        }
        Resample::Double => {
            for row in 0..batch * cout {
                for t in 0..in_len {
                    let a = row * out_len + 2 * t;
                    dconv[row * in_len + t] = dres[a] + dres[a + 1];
                }
            }
        }
    }

    // convolution
    let plen = in_len + PAD_LEFT + PAD_RIGHT;
    let mut dweight = vec![T::zero(); b.weight.len()];
    let mut dbias = vec![T::zero(); cout];
    let mut dpad = vec![T::zero(); batch * cin * plen];
    for bi in 0..batch {
        for o in 0..cout {
            let g = &dconv[(bi * cout + o) * in_len..][..in_len];
            dbias[o] = dbias[o] + g.iter().copied().sum::<T>();
            for i in 0..cin {
                let xp = &cache.padded[(bi * cin + i) * plen..][..plen];
                let dxp = &mut dpad[(bi * cin + i) * plen..][..plen];
                for k in 0..KERNEL {
                    let widx = (o * cin + i) * KERNEL + k;
                    let mut acc = T::zero();
                    for (gv, xv) in g.iter().zip(&xp[k..k + in_len]) {
                        acc = acc + *gv * *xv;
                    }
                    dweight[widx] = dweight[widx] + acc;
                    let w = b.weight[widx];
                    for (d, gv) in dxp[k..k + in_len].iter_mut().zip(g) {
                        *d = *d + w * *gv;
                    }
                }
            }
        }
    }
    let mut dx = vec![T::zero(); batch * cin * in_len];
    for row in 0..batch * cin {
        dx[row * in_len..][..in_len].copy_from_slice(&dpad[row * plen + PAD_LEFT..][..in_len]);
    }

    (
        BlockGrads {
            weight: dweight,
            bias: dbias,
            gamma: dgamma,
            beta: dbeta,
        },
        dx,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// One gradient per trainable parameter. Running statistics are not
/// trainable and have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<BlockGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn arrays(&self) -> Vec<&Vec<T>> {
        self.blocks
            .iter()
            .flat_map(|g| [&g.weight, &g.bias, &g.gamma, &g.beta])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    weight: vec![T::zero(); b.weight.len()],
                    bias: vec![T::zero(); b.out_ch],
                    gamma: vec![T::zero(); b.out_ch],
                    beta: vec![T::zero(); b.out_ch],
                })
                .collect(),
        }
    }
}

/// Mean squared error over all elements.
pub fn loss_mse(pred: &DelayLikelihood, target: &DelayLikelihood) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Adam with bias correction and inverse-time learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>, lr: f64, decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = net
            .trainable_arrays()
            .iter()
            .map(|a| vec![T::zero(); a.len()])
            .collect();
        AdamState {
            lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_defaults(net: &Network<T>) -> Self {
        Self::new(net, 1e-4, 1e-8)
    }

    /// Learning rate applied at update number `step` (1-based).
    pub fn effective_lr(&self, step: u64) -> f64 {
        self.lr / (1.0 + self.decay * step as f64)
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        let garrays = grads.arrays();
        let mut params = net.trainable_arrays_mut();
        if garrays.len() != params.len()
            || garrays.iter().zip(&params).any(|(g, p)| g.len() != p.len())
            || self.m.len() != params.len()
        {
            return Err(Error::shape("gradients do not match the network"));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.effective_lr(self.step);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - self.beta1), lit(1.0 - self.beta2));
        let (step_size, corr2, eps): (T, T, T) = (lit(lr / c1), lit(c2), lit(self.eps));
        for (idx, p) in params.iter_mut().enumerate() {
            let g = garrays[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let denom = (v[j] / corr2).sqrt() + eps;
                p[j] = p[j] - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Examples packed in the activation layout.
#[derive(Debug, Clone)]
pub struct PackedSet {
    len: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl PackedSet {
    pub fn new(pairs: &[TrainingPair], len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(pairs.len() * len);
        let mut targets = Vec::with_capacity(pairs.len() * len);
        for (i, p) in pairs.iter().enumerate() {
            if p.input.len() != len || p.target.len() != len {
                return Err(Error::Config(format!(
                    "example {i} has {} lags and a {}-value target, network expects {len}",
                    p.input.len(),
                    p.target.len()
                )));
            }
            inputs.extend(p.input.lags.iter().map(|v| *v as f32));
            targets.extend(p.target.values.iter().map(|v| *v as f32));
        }
        Ok(PackedSet { len, inputs, targets })
    }

    pub fn count(&self) -> usize {
        self.inputs.len() / self.len
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut x = Vec::with_capacity(idx.len() * self.len);
        let mut y = Vec::with_capacity(idx.len() * self.len);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * self.len..][..self.len]);
            y.extend_from_slice(&self.targets[i * self.len..][..self.len]);
        }
        (x, y)
    }
}

/// Inference-mode MSE over a set, evaluated in chunks of `chunk`.
pub fn evaluate(net: &EncoderDecoderNet, set: &PackedSet, chunk: usize) -> Result<f64> {
    let n = set.count();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let mut total = 0.0f64;
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(chunk.max(1)) {
        let (x, y) = set.gather(idx);
        let pass = net.forward(&x, idx.len(), Mode::Infer)?;
        total += pass
            .output()
            .iter()
            .zip(&y)
            .map(|(p, t)| ((p - t) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / (n * set.len) as f64)
}

/// Mini-batch training with per-epoch shuffling and early stopping on the
/// validation loss. On return `net` holds the parameters of the best
/// validation epoch.
pub fn train(
    net: &mut EncoderDecoderNet,
    opt: &mut AdamState<f32>,
    train_set: &[TrainingPair],
    val_set: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(Error::invalid("batch size, patience and max epochs must be >= 1"));
    }
    let train_packed = PackedSet::new(train_set, net.input_len())?;
    let val_packed = PackedSet::new(val_set, net.input_len())?;
    train_packed_sets(net, opt, &train_packed, &val_packed, cfg)
}

pub fn train_packed_sets(
    net: &mut EncoderDecoderNet,
    opt: &mut AdamState<f32>,
    train_set: &PackedSet,
    val_set: &PackedSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.count()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, EncoderDecoderNet)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.gather(idx);
            let (loss, grads, pass) = net.loss_and_grad(&x, &y, idx.len(), Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss} in epoch {epoch}")));
            }
            opt.step(net, &grads)?;
            net.update_running_stats(&pass);
            loss_sum += loss as f64 * idx.len() as f64;
        }
        let train_loss = loss_sum / train_set.count() as f64;
        let val_loss = evaluate(net, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became {val_loss} in epoch {epoch}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, net.clone()));
        } else if epoch - best.as_ref().expect("set on first epoch").0 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss, best_net) = best.expect("at least one epoch");
    *net = best_net;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout, version 1:
//
//   b"DGCC"            magic
//   u32                format version
//   u32                input length
//   u32                block count B
//   B x { u32 in_ch, u32 out_ch, u32 kernel, u32 resample (0 pool, 1 upsample) }
//   B x { f32 weight[out][in][kernel], bias[out], gamma[out], beta[out],
//         running_mean[out], running_var[out] }
//   u8                 optimiser section present (0/1)
//   if present:
//     f64 lr, f64 decay, f64 beta1, f64 beta2, f64 eps, u64 step
//     for every trainable array in block order (weight, bias, gamma, beta):
//       f32 m[len], then f32 v[len]

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: EncoderDecoderNet,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.net.input_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.net.blocks.len() as u32).to_le_bytes());
        for b in &self.net.blocks {
            for v in [b.in_ch as u32, b.out_ch as u32, KERNEL as u32, b.resample.code()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let put = |out: &mut Vec<u8>, a: &[f32]| a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for b in &self.net.blocks {
            for a in [&b.weight, &b.bias, &b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                put(&mut out, a);
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for v in [o.lr, o.decay, o.beta1, o.beta2, o.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&o.step.to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    put(&mut out, m);
                    put(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
        }
        let input_len = r.u32()? as usize;
        let count = r.u32()? as usize;
        if count == 0 || count > 1024 {
            return Err(r.err(format!("implausible block count {count}")));
        }
        let mut descriptors = Vec::with_capacity(count);
        for _ in 0..count {
            let (cin, cout, kernel, kind) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            if kernel as usize != KERNEL {
                return Err(r.err(format!("kernel width {kernel}, expected {KERNEL}")));
            }
            let resample = Resample::from_code(kind).ok_or_else(|| r.err(format!("unknown resample kind {kind}")))?;
            descriptors.push((cin as usize, cout as usize, resample));
        }
        let mut blocks = Vec::with_capacity(count);
        for (in_ch, out_ch, resample) in descriptors {
            blocks.push(ConvBlock {
                in_ch,
                out_ch,
                resample,
                weight: r.f32s(out_ch * in_ch * KERNEL)?,
                bias: r.f32s(out_ch)?,
                gamma: r.f32s(out_ch)?,
                beta: r.f32s(out_ch)?,
                running_mean: r.f32s(out_ch)?,
                running_var: r.f32s(out_ch)?,
            });
        }
        let net = Network::from_blocks(input_len, blocks)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut o = AdamState::new(&net, 0.0, 0.0);
                o.lr = r.f64()?;
                o.decay = r.f64()?;
                o.beta1 = r.f64()?;
                o.beta2 = r.f64()?;
                o.eps = r.f64()?;
                o.step = r.u64()?;
                for i in 0..o.m.len() {
                    let n = o.m[i].len();
                    o.m[i] = r.f32s(n)?;
                    o.v[i] = r.f32s(n)?;
                }
                Some(o)
            }
            flag => return Err(r.err(format!("bad optimiser flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { net, optimizer })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::dataio::write_atomic(path, &self.encode())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("unexpected end of checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("array too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
