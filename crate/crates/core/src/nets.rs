//! Small fixed-architecture MLPs with hand-derived gradients, Adam, and a toy
//! GAN trainer.
//!
//! Networks are three dense layers (`in -> h -> h -> out`) with a tanh or relu
//! hidden activation and an identity output. Two roles appear downstream: the
//! generator `g` mapping latent codes to data space, and the discriminator,
//! which serves double duty as a scalar logit source for the condition model
//! and (through its last hidden layer) as the feature map behind the kernels.
//! The trainer deliberately produces an imperfect generator — early stopping
//! on a multimodal target leaves headroom for refinement.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{gaussian_draws, DenseMatrix, SeededRng};
use crate::targets::GmmTarget;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative at pre-activation `v` (relu uses 0 at the kink).
    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::InvalidModelFile(format!("unknown activation code {other}"))),
        }
    }
}

/// Three-layer perceptron. Weights are stored row-major with shape
/// `(out, in)` per layer; the output activation is always identity.
#[derive(Debug, Clone)]
pub struct MlpNet {
    dims: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Parameter-shaped gradient bundle returned by [`MlpNet::vjp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            let bd = b.data().to_vec();
            for (i, v) in bd.iter().enumerate() {
                let (r, c) = (i / a.cols(), i % a.cols());
                a.set(r, c, a.get(r, c) + v);
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            let (rows, cols) = (w.rows(), w.cols());
            for r in 0..rows {
                for c in 0..cols {
                    w.set(r, c, w.get(r, c) * s);
                }
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }
}

impl MlpNet {
    /// Fixed-depth network `input -> hidden -> hidden -> output` with weights
    /// drawn from `N(0, 1/fan_in)` and zero biases.
    pub fn new(
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let dims = vec![input, hidden, hidden, output];
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for l in 0..3 {
            let (fan_out, fan_in) = (dims[l + 1], dims[l]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(DenseMatrix::from_vec(fan_out, fan_in, data).unwrap());
            biases.push(vec![0.0; fan_out]);
        }
        Self { dims, weights, biases, activation }
    }

    /// All-zero parameters; useful for tests that set weights by hand.
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        let dims = vec![input, hidden, hidden, output];
        let weights =
            (0..3).map(|l| DenseMatrix::zeros(dims[l + 1], dims[l])).collect();
        let biases = (0..3).map(|l| vec![0.0; dims[l + 1]]).collect();
        Self { dims, weights, biases, activation }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Number of weight layers (always 3 for this architecture).
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn params_finite(&self) -> bool {
        self.weights.iter().all(DenseMatrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "input has length {}, expected {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass through all layers.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_prefix(x, self.num_layers())
    }

    /// Forward through the first `layers` layers. Hidden activations apply to
    /// every traversed layer except the final network layer, which stays
    /// linear; `layers = 2` therefore yields the last hidden-layer features.
    pub fn forward_prefix(&self, x: &[f64], layers: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_prefix(layers)?;
        let mut a = x.to_vec();
        for l in 0..layers {
            let z = self.affine(l, &a);
            a = if l < self.num_layers() - 1 {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z
            };
        }
        Ok(a)
    }

    fn check_prefix(&self, layers: usize) -> Result<()> {
        if layers == 0 || layers > self.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "prefix depth {layers} outside 1..={}",
                self.num_layers()
            )));
        }
        Ok(())
    }

    #[inline]
    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let w = &self.weights[l];
        let b = &self.biases[l];
        (0..w.rows())
            .map(|r| {
                b[r] + w.row(r).iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
            })
            .collect()
    }

    /// Vector-Jacobian product `u^T d(output)/d(input)` and
    /// `u^T d(output)/d(params)` by reverse accumulation.
    pub fn vjp(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        if u.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "cotangent has length {}, expected {}",
                u.len(),
                self.output_dim()
            )));
        }
        let (inputs, preacts) = self.forward_caches(x, self.num_layers())?;
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = u.to_vec();
        for l in (0..self.num_layers()).rev() {
            let gz: Vec<f64> = if l == self.num_layers() - 1 {
                g
            } else {
                g.iter()
                    .zip(&preacts[l])
                    .map(|(gi, zi)| gi * self.activation.derivative(*zi))
                    .collect()
            };
            let w = &self.weights[l];
            for (r, &gr) in gz.iter().enumerate() {
                grads.biases[l][r] = gr;
                for (c, &ac) in inputs[l].iter().enumerate() {
                    grads.weights[l].set(r, c, gr * ac);
                }
            }
            let mut next = vec![0.0; w.cols()];
            for (r, &gr) in gz.iter().enumerate() {
                for (c, wv) in w.row(r).iter().enumerate() {
                    next[c] += wv * gr;
                }
            }
            g = next;
        }
        Ok((g, grads))
    }

    /// Input gradient of `<u, forward_prefix(x, layers)>`; parameter
    /// gradients are skipped.
    pub fn vjp_prefix(&self, x: &[f64], u: &[f64], layers: usize) -> Result<Vec<f64>> {
        let (_, preacts) = self.forward_caches(x, layers)?;
        let expected = if layers == self.num_layers() {
            self.output_dim()
        } else {
            self.dims[layers]
        };
        if u.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cotangent has length {}, expected {}",
                u.len(),
                expected
            )));
        }
        let mut g = u.to_vec();
        for l in (0..layers).rev() {
            let gz: Vec<f64> = if l == self.num_layers() - 1 {
                g
            } else {
                g.iter()
                    .zip(&preacts[l])
                    .map(|(gi, zi)| gi * self.activation.derivative(*zi))
                    .collect()
            };
            let w = &self.weights[l];
            let mut next = vec![0.0; w.cols()];
            for (r, &gr) in gz.iter().enumerate() {
                for (c, wv) in w.row(r).iter().enumerate() {
                    next[c] += wv * gr;
                }
            }
            g = next;
        }
        Ok(g)
    }

    /// Layer inputs and pre-activations for the first `layers` layers.
    fn forward_caches(&self, x: &[f64], layers: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        self.check_prefix(layers)?;
        let mut inputs = Vec::with_capacity(layers);
        let mut preacts = Vec::with_capacity(layers);
        let mut a = x.to_vec();
        for l in 0..layers {
            let z = self.affine(l, &a);
            inputs.push(a);
            a = if l < self.num_layers() - 1 {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            preacts.push(z);
        }
        Ok((inputs, preacts))
    }

    /// Persist to a little-endian binary file:
    /// magic `MLPB`, version u32, activation u8, layer count u32,
    /// layer sizes u32 each, then per layer the row-major weight tensor and
    /// the bias vector as raw f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"MLPB");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(self.activation.code());
        buf.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in 0..self.num_layers() {
            for v in self.weights[l].data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &self.biases[l] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != b"MLPB" {
            return Err(Error::InvalidModelFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::InvalidModelFile(format!("unsupported version {version}")));
        }
        let activation = Activation::from_code(r.u8()?)?;
        let layers = r.u32()? as usize;
        if layers != 3 {
            return Err(Error::InvalidModelFile(format!("expected 3 layers, got {layers}")));
        }
        let dims: Vec<usize> =
            (0..layers + 1).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let data: Vec<f64> = (0..rows * cols).map(|_| r.f64()).collect::<Result<_>>()?;
            weights.push(DenseMatrix::from_vec(rows, cols, data)?);
            biases.push((0..rows).map(|_| r.f64()).collect::<Result<_>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidModelFile("trailing bytes".into()));
        }
        Ok(Self { dims, weights, biases, activation })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::InvalidModelFile("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &MlpNet, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, net: &mut MlpNet, grads: &MlpGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for l in 0..net.num_layers() {
            let (rows, cols) = (net.weights[l].rows(), net.weights[l].cols());
            for r in 0..rows {
                for c in 0..cols {
                    let g = grads.weights[l].get(r, c);
                    let m = self.beta1 * self.m.weights[l].get(r, c) + (1.0 - self.beta1) * g;
                    let v = self.beta2 * self.v.weights[l].get(r, c) + (1.0 - self.beta2) * g * g;
                    self.m.weights[l].set(r, c, m);
                    self.v.weights[l].set(r, c, v);
                    let upd = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                    let w = net.weights[l].get(r, c);
                    net.weights[l].set(r, c, w - upd);
                }
            }
            for r in 0..net.biases[l].len() {
                let g = grads.biases[l][r];
                let m = self.beta1 * self.m.biases[l][r] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v.biases[l][r] + (1.0 - self.beta2) * g * g;
                self.m.biases[l][r] = m;
                self.v.biases[l][r] = v;
                net.biases[l][r] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Toy GAN training configuration.
#[derive(Debug, Clone)]
pub struct GanTrainConfig {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub batch_size: usize,
    /// Adam steps; deliberately small values leave the generator imperfect.
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// History cadence (a record is always taken at step 0 and at the end).
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            data_dim: 2,
            hidden: 64,
            activation: Activation::Tanh,
            batch_size: 256,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eval_every: 100,
            eval_samples: 512,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GanHistoryRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GanHistory {
    pub records: Vec<GanHistoryRecord>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
fn softplus(v: f64) -> f64 {
    // Stable log(1 + e^v).
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Chunk size for deterministic parallel gradient accumulation: chunks are
/// summed in index order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 32;

fn accumulate<T: Sync>(
    template: &MlpNet,
    items: &[T],
    per_item: impl Fn(&T) -> (f64, MlpGrads) + Sync,
) -> (f64, MlpGrads) {
    let partials: Vec<(f64, MlpGrads)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = MlpGrads::zeros_like(template);
            let mut loss = 0.0;
            for item in chunk {
                let (l, g) = per_item(item);
                loss += l;
                acc.add_assign(&g);
            }
            (loss, acc)
        })
        .collect();
    let mut total = MlpGrads::zeros_like(template);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    (loss, total)
}

/// Train a non-saturating GAN on mixture samples.
///
/// The discriminator emits a raw scalar logit, used directly as `d(x)` by the
/// discriminator condition model; its last hidden layer provides the
/// vector-valued feature map for the kernels. Returns the final nets plus a
/// loss/MMD history whose first record is the untrained generator.
pub fn train_toy_gan(
    target: &GmmTarget,
    cfg: &GanTrainConfig,
    rng: &mut SeededRng,
) -> Result<(MlpNet, MlpNet, GanHistory)> {
    if cfg.batch_size == 0 || cfg.latent_dim == 0 {
        return Err(Error::InvalidConfig("batch size and latent dim must be >= 1".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig("learning rate must be > 0".into()));
    }
    if cfg.data_dim != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "config data_dim {} != target dim {}",
            cfg.data_dim,
            target.dim()
        )));
    }

    let mut gen = MlpNet::new(cfg.latent_dim, cfg.hidden, cfg.data_dim, cfg.activation, rng);
    let mut disc = MlpNet::new(cfg.data_dim, cfg.hidden, 1, cfg.activation, rng);
    let mut adam_g = AdamState::new(&gen, cfg.lr, cfg.beta1, cfg.beta2);
    let mut adam_d = AdamState::new(&disc, cfg.lr, cfg.beta1, cfg.beta2);

    // Fixed evaluation sets so history records are comparable and the
    // training stream is untouched by evaluation.
    let eval_targets = target.sample(cfg.eval_samples, rng);
    let eval_latents = gaussian_draws(rng, cfg.eval_samples, cfg.latent_dim, 1.0);
    let eval_bw = metrics::median_heuristic_bandwidth(&eval_targets, &[]);

    let mut history = GanHistory::default();
    let record = |step: usize,
                      d_loss: f64,
                      g_loss: f64,
                      gen: &MlpNet,
                      history: &mut GanHistory|
     -> Result<()> {
        let fakes: Vec<Vec<f64>> =
            eval_latents.iter().map(|z| gen.forward(z)).collect::<Result<_>>()?;
        let mmd = metrics::mmd(&fakes, &eval_targets, eval_bw)?;
        history.records.push(GanHistoryRecord { step, d_loss, g_loss, mmd });
        Ok(())
    };
    record(0, f64::NAN, f64::NAN, &gen, &mut history)?;

    let inv_batch = 1.0 / cfg.batch_size as f64;
    for step in 1..=cfg.steps {
        // Discriminator update.
        let reals = target.sample(cfg.batch_size, rng);
        let zs = gaussian_draws(rng, cfg.batch_size, cfg.latent_dim, 1.0);
        let fakes: Vec<Vec<f64>> = zs.iter().map(|z| gen.forward(z)).collect::<Result<_>>()?;

        let (loss_real, mut d_grads) = accumulate(&disc, &reals, |x| {
            let t = disc.forward(x).expect("real sample dim")[0];
            let coeff = (sigmoid(t) - 1.0) * inv_batch;
            let (_, g) = disc.vjp(x, &[coeff]).expect("disc vjp");
            (softplus(-t) * inv_batch, g)
        });
        let (loss_fake, d_grads_fake) = accumulate(&disc, &fakes, |x| {
            let t = disc.forward(x).expect("fake sample dim")[0];
            let coeff = sigmoid(t) * inv_batch;
            let (_, g) = disc.vjp(x, &[coeff]).expect("disc vjp");
            (softplus(t) * inv_batch, g)
        });
        d_grads.add_assign(&d_grads_fake);
        let d_loss = loss_real + loss_fake;
        adam_d.update(&mut disc, &d_grads);

        // Generator update (non-saturating: minimize softplus(-D(g(z)))).
        let zs_g = gaussian_draws(rng, cfg.batch_size, cfg.latent_dim, 1.0);
        let (g_loss, g_grads) = accumulate(&gen, &zs_g, |z| {
            let x = gen.forward(z).expect("latent dim");
            let t = disc.forward(&x).expect("disc dim")[0];
            let coeff = (sigmoid(t) - 1.0) * inv_batch;
            let dx = disc
                .vjp_prefix(&x, &[coeff], disc.num_layers())
                .expect("disc input grad");
            let (_, grads) = gen.vjp(z, &dx).expect("gen vjp");
            (softplus(-t) * inv_batch, grads)
        });
        adam_g.update(&mut gen, &g_grads);

        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(Error::DivergedTraining { step });
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            if !gen.params_finite() || !disc.params_finite() {
                return Err(Error::DivergedTraining { step });
            }
            record(step, d_loss, g_loss, &gen, &mut history)?;
        }
    }
    Ok((gen, disc, history))
}
