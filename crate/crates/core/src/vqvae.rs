//! Conditional multi-codebook VQVAE.
//!
//! The encoder reads `state ⊕ action` and emits a latent of width `d_lat`.
//! The latent is cut into `H` contiguous slices; slice `h` is replaced by
//! its nearest vector in codebook `h`. The decoder reads `z_q ⊕ state` and
//! reconstructs the action. The indices of the chosen vectors form the
//! label sequence that is counted downstream.
//!
//! Training minimizes reconstruction + codebook + γ·commitment. Gradients
//! cross the quantizer by straight-through copy. Codebook vectors are moved
//! by the FCM rule, or by Adam on the codebook term when FCM is disabled.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::counting::{LabelSequence, Quantizer};
use crate::error::{check_dim, Error, Result};
use crate::fcm::{self, argmin_lowest};
use crate::nn::{read_f64s, read_u32, read_u64, Activation, Adam, DenseNet, Gradients};

const CODEBOOK_MAGIC: &[u8; 4] = b"VQCS";
const CODEBOOK_VERSION: u32 = 1;

/// N vectors of one latent subspace plus usage statistics.
///
/// `lifetime` counts every selection ever made. `recent`/`recent_total`
/// are the same tallies under exponential decay and drive the use rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f64>,
    lifetime: Vec<u64>,
    recent: Vec<f64>,
    recent_total: f64,
}

impl Codebook {
    /// Builds a codebook from row-major vectors of width `dim`.
    pub fn from_vectors(dim: usize, vectors: Vec<f64>) -> Self {
        assert!(dim > 0 && !vectors.is_empty() && vectors.len().is_multiple_of(dim));
        let n = vectors.len() / dim;
        Self {
            dim,
            vectors,
            lifetime: vec![0; n],
            recent: vec![0.0; n],
            recent_total: 0.0,
        }
    }

    /// `size` vectors picked from `points` by D² sampling. Points must be
    /// non-empty and `dim` wide.
    pub fn seed_from_points<R: Rng + ?Sized>(dim: usize, points: &[&[f64]], size: usize, rng: &mut R) -> Self {
        let mut vectors = Vec::with_capacity(size * dim);
        for i in d2_sample(points, size, rng) {
            vectors.extend_from_slice(points[i]);
        }
        Self::from_vectors(dim, vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn sq_distances(&self, z: &[f64]) -> Vec<f64> {
        self.vectors
            .chunks_exact(self.dim)
            .map(|e| e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect()
    }

    /// Nearest vector and its squared distance; lowest index wins ties.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d: f64 = e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn lifetime_usage(&self) -> &[u64] {
        &self.lifetime
    }

    pub fn lifetime_total(&self) -> u64 {
        self.lifetime.iter().sum()
    }

    /// Use rate `R_k` of every vector from the decayed tallies; all zero
    /// before the first recorded selection.
    pub fn use_rates(&self) -> Vec<f64> {
        if self.recent_total <= 0.0 {
            return vec![0.0; self.len()];
        }
        self.recent
            .iter()
            .map(|&u| (u / self.recent_total).clamp(0.0, 1.0))
            .collect()
    }

    /// Decays the recent tallies by `decay`, then credits each selection.
    pub fn record_usage(&mut self, selected: &[usize], decay: f64) {
        for r in &mut self.recent {
            *r *= decay;
        }
        self.recent_total *= decay;
        for &k in selected {
            self.lifetime[k] += 1;
            self.recent[k] += 1.0;
        }
        self.recent_total += selected.len() as f64;
    }
}

/// H independent codebooks of equal size and width.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    books: Vec<Codebook>,
}

impl CodebookSet {
    pub fn new(books: Vec<Codebook>) -> Result<Self> {
        let first = books
            .first()
            .ok_or_else(|| Error::Config("need at least one codebook".into()))?;
        let (n, dim) = (first.len(), first.dim());
        for b in &books {
            check_dim("codebook size", n, b.len())?;
            check_dim("codebook width", dim, b.dim())?;
        }
        Ok(Self { books })
    }

    pub fn zeros(count: usize, size: usize, dim: usize) -> Self {
        Self {
            books: (0..count)
                .map(|_| Codebook::from_vectors(dim, vec![0.0; size * dim]))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self) -> usize {
        self.books[0].len()
    }

    pub fn dim(&self) -> usize {
        self.books[0].dim()
    }

    pub fn book(&self, h: usize) -> &Codebook {
        &self.books[h]
    }

    pub fn book_mut(&mut self, h: usize) -> &mut Codebook {
        &mut self.books[h]
    }

    pub fn books(&self) -> &[Codebook] {
        &self.books
    }

    /// Checkpoint block: H, N, width, then per codebook the N×width vectors
    /// as f64 followed by N lifetime usage counters as u64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        for v in [self.count(), self.size(), self.dim()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for b in &self.books {
            for v in &b.vectors {
                w.write_all(&v.to_le_bytes())?;
            }
            for u in &b.lifetime {
                w.write_all(&u.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores vectors and lifetime counters; decayed tallies restart from
    /// the lifetime counts.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("bad codebook magic".into()));
        }
        let version = read_u32(r)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let h = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        if h == 0 || n == 0 || dim == 0 || n > 1 << 16 {
            return Err(Error::Format(format!("implausible codebook shape {h}×{n}×{dim}")));
        }
        let mut books = Vec::with_capacity(h);
        for _ in 0..h {
            let mut book = Codebook::from_vectors(dim, read_f64s(r, n * dim)?);
            book.lifetime = (0..n).map(|_| read_u64(r)).collect::<Result<_>>()?;
            book.recent = book.lifetime.iter().map(|&u| u as f64).collect();
            book.recent_total = book.recent.iter().sum();
            books.push(book);
        }
        Self::new(books)
    }
}

/// A latent vector viewed as H equal-width contiguous slices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPartition {
    latent: Vec<f64>,
    width: usize,
}

impl LatentPartition {
    pub fn new(latent: Vec<f64>, subspaces: usize) -> Result<Self> {
        if subspaces == 0 || !latent.len().is_multiple_of(subspaces) {
            return Err(Error::Config(format!(
                "latent width {} is not divisible by {subspaces} codebooks",
                latent.len()
            )));
        }
        let width = latent.len() / subspaces;
        Ok(Self { latent, width })
    }

    pub fn count(&self) -> usize {
        self.latent.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn subspace(&self, h: usize) -> &[f64] {
        &self.latent[h * self.width..(h + 1) * self.width]
    }

    pub fn subspaces(&self) -> impl Iterator<Item = &[f64]> {
        self.latent.chunks_exact(self.width)
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    /// Concatenates the slices back into the full latent.
    pub fn concat(&self) -> Vec<f64> {
        self.subspaces().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub z_q: Vec<f64>,
    pub labels: Vec<usize>,
    /// Squared distance from each slice to its chosen vector.
    pub sq_distances: Vec<f64>,
}

/// Nearest vector in one codebook: `(z_q^h, k*)`.
pub fn quantize_subspace(z: &[f64], codebook: &Codebook) -> (Vec<f64>, usize) {
    let (k, _) = codebook.nearest(z);
    (codebook.vector(k).to_vec(), k)
}

pub fn quantize_partition(partition: &LatentPartition, codebooks: &CodebookSet) -> Result<QuantizationResult> {
    check_dim("codebook count", codebooks.count(), partition.count())?;
    check_dim("subspace width", codebooks.dim(), partition.width())?;
    let mut z_q = Vec::with_capacity(partition.latent().len());
    let mut labels = Vec::with_capacity(partition.count());
    let mut sq_distances = Vec::with_capacity(partition.count());
    for (z, book) in partition.subspaces().zip(codebooks.books()) {
        let (k, d) = book.nearest(z);
        z_q.extend_from_slice(book.vector(k));
        labels.push(k);
        sq_distances.push(d);
    }
    Ok(QuantizationResult {
        z_q,
        labels,
        sq_distances,
    })
}

/// The three loss terms; `commitment` already carries the γ factor, so
/// `total = reconstruction + codebook + commitment`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLoss {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.reconstruction.is_finite()
            && self.codebook.is_finite()
            && self.commitment.is_finite()
    }
}

/// Per-sample loss from its parts.
pub fn vq_loss(
    action: &[f64],
    reconstruction: &[f64],
    partition: &LatentPartition,
    quantization: &QuantizationResult,
    commitment_weight: f64,
) -> VqLoss {
    let recon: f64 = action
        .iter()
        .zip(reconstruction)
        .map(|(a, r)| (a - r) * (a - r))
        .sum();
    let residual: f64 = partition
        .latent()
        .iter()
        .zip(&quantization.z_q)
        .map(|(z, e)| (z - e) * (z - e))
        .sum();
    let commitment = commitment_weight * residual;
    VqLoss {
        total: recon + residual + commitment,
        reconstruction: recon,
        codebook: residual,
        commitment,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub codebooks: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    pub usage_decay: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub use_fcm: bool,
}

impl VqConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            latent_dim: 64,
            codebooks: 4,
            codebook_size: 256,
            commitment: 0.25,
            usage_decay: fcm::DEFAULT_USAGE_DECAY,
            lr: 1e-3,
            hidden: vec![256, 256],
            use_fcm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config("state and action dims must be positive".into()));
        }
        if self.codebooks == 0 || !self.latent_dim.is_multiple_of(self.codebooks) {
            return Err(Error::Config(format!(
                "latent dim {} must be divisible by codebook count {}",
                self.latent_dim, self.codebooks
            )));
        }
        if self.codebook_size == 0 || self.codebook_size > 1 << 16 {
            return Err(Error::Config("codebook size must be in 1..=65536".into()));
        }
        if !(self.usage_decay > 0.0 && self.usage_decay < 1.0) {
            return Err(Error::Config("usage decay must lie in (0, 1)".into()));
        }
        if self.commitment < 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("commitment must be ≥ 0 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVae {
    config: VqConfig,
    encoder: DenseNet,
    decoder: DenseNet,
    codebooks: CodebookSet,
}

/// Gradients of the batch-mean loss.
#[derive(Debug, Clone)]
pub struct VqGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    /// Gradient of the codebook term for each codebook, row-major like its vectors.
    pub codebooks: Vec<Vec<f64>>,
}

/// Everything a forward pass over a batch produces.
#[derive(Debug, Clone)]
pub struct VqForward {
    pub latents: Array2<f64>,
    pub quantized: Array2<f64>,
    pub labels: Vec<Vec<usize>>,
    pub reconstructions: Array2<f64>,
}

fn concat_cols(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts match")
}

impl VqVae {
    pub fn new<R: Rng + ?Sized>(config: VqConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut enc_dims = vec![config.state_dim + config.action_dim];
        enc_dims.extend(&config.hidden);
        enc_dims.push(config.latent_dim);
        let mut dec_dims = vec![config.latent_dim + config.state_dim];
        dec_dims.extend(&config.hidden);
        dec_dims.push(config.action_dim);
        let encoder = DenseNet::new(&enc_dims, Activation::Relu, Activation::Identity, rng)?;
        let decoder = DenseNet::new(&dec_dims, Activation::Relu, Activation::Identity, rng)?;
        let codebooks = CodebookSet::zeros(
            config.codebooks,
            config.codebook_size,
            config.latent_dim / config.codebooks,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn from_parts(config: VqConfig, encoder: DenseNet, decoder: DenseNet, codebooks: CodebookSet) -> Result<Self> {
        config.validate()?;
        check_dim("encoder input", config.state_dim + config.action_dim, encoder.input_dim())?;
        check_dim("encoder output", config.latent_dim, encoder.output_dim())?;
        check_dim("decoder input", config.latent_dim + config.state_dim, decoder.input_dim())?;
        check_dim("decoder output", config.action_dim, decoder.output_dim())?;
        check_dim("codebook count", config.codebooks, codebooks.count())?;
        check_dim("codebook size", config.codebook_size, codebooks.size())?;
        check_dim("codebook width", config.latent_dim / config.codebooks, codebooks.dim())?;
        Ok(Self {
            config,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn codebooks(&self) -> &CodebookSet {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut CodebookSet {
        &mut self.codebooks
    }

    pub fn encode(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", self.config.state_dim, state.len())?;
        check_dim("action", self.config.action_dim, action.len())?;
        let input: Vec<f64> = state.iter().chain(action).copied().collect();
        self.encoder.forward(&input)
    }

    pub fn partition(&self, latent: Vec<f64>) -> Result<LatentPartition> {
        check_dim("latent", self.config.latent_dim, latent.len())?;
        LatentPartition::new(latent, self.config.codebooks)
    }

    pub fn quantize(&self, latent: &[f64]) -> Result<QuantizationResult> {
        quantize_partition(&self.partition(latent.to_vec())?, &self.codebooks)
    }

    pub fn decode(&self, z_q: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        check_dim("quantized latent", self.config.latent_dim, z_q.len())?;
        check_dim("state", self.config.state_dim, state.len())?;
        let input: Vec<f64> = z_q.iter().chain(state).copied().collect();
        self.decoder.forward(&input)
    }

    /// Full per-sample loss of one pair.
    pub fn loss(&self, state: &[f64], action: &[f64]) -> Result<VqLoss> {
        let partition = self.partition(self.encode(state, action)?)?;
        let q = quantize_partition(&partition, &self.codebooks)?;
        let recon = self.decode(&q.z_q, state)?;
        Ok(vq_loss(action, &recon, &partition, &q, self.config.commitment))
    }

    fn check_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<()> {
        check_dim("state batch width", self.config.state_dim, states.ncols())?;
        check_dim("action batch width", self.config.action_dim, actions.ncols())?;
        check_dim("batch rows", states.nrows(), actions.nrows())
    }

    pub fn encode_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(states, actions)?;
        self.encoder.forward_batch(concat_cols(states, actions).view())
    }

    /// Quantizes each latent row: returns `z_q` rows and label rows.
    pub fn quantize_batch(&self, latents: ArrayView2<f64>) -> (Array2<f64>, Vec<Vec<usize>>) {
        let width = self.codebooks.dim();
        let mut z_q = Array2::zeros(latents.raw_dim());
        let mut labels = Vec::with_capacity(latents.nrows());
        for (i, row) in latents.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("row-major latents");
            let mut seq = Vec::with_capacity(self.codebooks.count());
            for (h, book) in self.codebooks.books().iter().enumerate() {
                let (k, _) = book.nearest(&row[h * width..(h + 1) * width]);
                z_q.slice_mut(s![i, h * width..(h + 1) * width])
                    .assign(&ndarray::ArrayView1::from(book.vector(k)));
                seq.push(k);
            }
            labels.push(seq);
        }
        (z_q, labels)
    }

    pub fn labels_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<LabelSequence>> {
        let latents = self.encode_batch(states, actions)?;
        let (_, labels) = self.quantize_batch(latents.view());
        labels
            .iter()
            .map(|l| LabelSequence::new(l, self.config.codebook_size))
            .collect()
    }

    pub fn forward_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<VqForward> {
        let latents = self.encode_batch(states, actions)?;
        let (quantized, labels) = self.quantize_batch(latents.view());
        let reconstructions = self
            .decoder
            .forward_batch(concat_cols(quantized.view(), states).view())?;
        Ok(VqForward {
            latents,
            quantized,
            labels,
            reconstructions,
        })
    }

    /// Per-sample losses for a batch.
    pub fn loss_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<VqLoss>> {
        let fwd = self.forward_batch(states, actions)?;
        let gamma = self.config.commitment;
        Ok((0..states.nrows())
            .map(|i| {
                let recon: f64 = actions
                    .row(i)
                    .iter()
                    .zip(fwd.reconstructions.row(i))
                    .map(|(a, r)| (a - r) * (a - r))
                    .sum();
                let residual: f64 = fwd
                    .latents
                    .row(i)
                    .iter()
                    .zip(fwd.quantized.row(i))
                    .map(|(z, e)| (z - e) * (z - e))
                    .sum();
                VqLoss {
                    total: recon + (1.0 + gamma) * residual,
                    reconstruction: recon,
                    codebook: residual,
                    commitment: gamma * residual,
                }
            })
            .collect())
    }

    /// Batch-mean loss and its gradients. Decoder-input gradients on `z_q`
    /// are copied straight through to the encoder output; the commitment
    /// term adds `2γ(z_e − sg[e])`; the codebook term yields `2(e − sg[z_e])`
    /// for the selected vectors only.
    pub fn loss_and_gradients(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(VqLoss, VqGradients, VqForward)> {
        self.check_batch(states, actions)?;
        let batch = states.nrows();
        if batch == 0 {
            return Err(Error::Config("empty training batch".into()));
        }
        let scale = 1.0 / batch as f64;
        let gamma = self.config.commitment;
        let enc_trace = self.encoder.forward_traced(concat_cols(states, actions).view())?;
        let latents = enc_trace.output().clone();
        let (quantized, labels) = self.quantize_batch(latents.view());
        let dec_trace = self
            .decoder
            .forward_traced(concat_cols(quantized.view(), states).view())?;
        let recon = dec_trace.output().clone();

        let diff_a = &recon - &actions;
        let diff_z = &latents - &quantized;
        let recon_loss = diff_a.iter().map(|v| v * v).sum::<f64>() * scale;
        let residual = diff_z.iter().map(|v| v * v).sum::<f64>() * scale;
        let loss = VqLoss {
            total: recon_loss + (1.0 + gamma) * residual,
            reconstruction: recon_loss,
            codebook: residual,
            commitment: gamma * residual,
        };

        let grad_recon = diff_a.mapv(|v| 2.0 * scale * v);
        let (dec_grads, dec_input_grad) = self.decoder.backward(&dec_trace, grad_recon.view());
        let latent_dim = self.config.latent_dim;
        let mut grad_latent = dec_input_grad.slice(s![.., ..latent_dim]).to_owned();
        grad_latent.scaled_add(2.0 * gamma * scale, &diff_z);
        let (enc_grads, _) = self.encoder.backward(&enc_trace, grad_latent.view());

        let width = self.codebooks.dim();
        let mut code_grads: Vec<Vec<f64>> = self
            .codebooks
            .books()
            .iter()
            .map(|b| vec![0.0; b.vectors().len()])
            .collect();
        for (i, seq) in labels.iter().enumerate() {
            for (h, &k) in seq.iter().enumerate() {
                let g = &mut code_grads[h][k * width..(k + 1) * width];
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj -= 2.0 * scale * diff_z[[i, h * width + j]];
                }
            }
        }
        Ok((
            loss,
            VqGradients {
                encoder: enc_grads,
                decoder: dec_grads,
                codebooks: code_grads,
            },
            VqForward {
                latents,
                quantized,
                labels,
                reconstructions: recon,
            },
        ))
    }

    /// Seeds every codebook from encoder outputs of a warmup batch using
    /// D²-weighted sampling, so initial vectors spread over the data.
    pub fn init_codebooks<R: Rng + ?Sized>(
        &mut self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<()> {
        let latents = self.encode_batch(states, actions)?;
        if latents.nrows() == 0 {
            return Err(Error::Config("warmup batch is empty".into()));
        }
        let width = self.codebooks.dim();
        let n = self.codebooks.size();
        for h in 0..self.codebooks.count() {
            let points: Vec<&[f64]> = latents
                .rows()
                .into_iter()
                .map(|r| &r.to_slice().expect("row-major")[h * width..(h + 1) * width])
                .collect();
            self.codebooks.books[h] = Codebook::seed_from_points(width, &points, n, rng);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.encoder.write_to(w)?;
        self.decoder.write_to(w)?;
        self.codebooks.write_to(w)
    }

    /// Reads encoder, decoder and codebooks. Training-only settings in
    /// `config` (learning rate, decay, FCM flag) are taken from the caller.
    pub fn read_from<R: Read>(r: &mut R, config: VqConfig) -> Result<Self> {
        let encoder = DenseNet::read_from(r)?;
        let decoder = DenseNet::read_from(r)?;
        let codebooks = CodebookSet::read_from(r)?;
        Self::from_parts(config, encoder, decoder, codebooks)
    }
}

/// D² sampling of `k` indices: the first uniformly, each next with
/// probability proportional to its squared distance from the chosen set.
/// Falls back to uniform picks once every point is already covered.
fn d2_sample<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<usize> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    chosen.push(first);
    let mut best: Vec<f64> = points.iter().map(|p| sq(p, points[first])).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = best.len() - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        chosen.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq(p, points[next]));
        }
    }
    chosen
}

impl Quantizer for VqVae {
    fn labels(&self, state: &[f64], action: &[f64]) -> Result<LabelSequence> {
        let q = self.quantize(&self.encode(state, action)?)?;
        LabelSequence::new(&q.labels, self.config.codebook_size)
    }

    fn labels_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<LabelSequence>> {
        VqVae::labels_batch(self, states, actions)
    }
}

/// Owns a VQVAE during pretraining together with its optimizers.
#[derive(Debug, Clone)]
pub struct VqTrainer {
    model: VqVae,
    encoder_opt: Adam,
    decoder_opt: Adam,
    codebook_opts: Vec<Adam>,
}

impl VqTrainer {
    pub fn new(model: VqVae) -> Self {
        let lr = model.config.lr;
        let encoder_opt = Adam::for_net(&model.encoder, lr);
        let decoder_opt = Adam::for_net(&model.decoder, lr);
        let codebook_opts = model
            .codebooks
            .books()
            .iter()
            .map(|b| Adam::new(b.vectors().len(), lr))
            .collect();
        Self {
            model,
            encoder_opt,
            decoder_opt,
            codebook_opts,
        }
    }

    pub fn model(&self) -> &VqVae {
        &self.model
    }

    pub fn into_model(self) -> VqVae {
        self.model
    }

    /// One gradient step on encoder and decoder followed by a codebook update
    /// (FCM round, or Adam on the codebook term when FCM is off).
    pub fn train_step(&mut self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<VqLoss> {
        let (loss, grads, fwd) = self.model.loss_and_gradients(states, actions)?;
        if !loss.is_finite() || !grads.encoder.is_finite() || !grads.decoder.is_finite() {
            return Err(Error::NonFinite(format!("VQVAE loss {loss:?}")));
        }
        self.encoder_opt.step_net(&mut self.model.encoder, &grads.encoder);
        self.decoder_opt.step_net(&mut self.model.decoder, &grads.decoder);

        let width = self.model.codebooks.dim();
        let decay = self.model.config.usage_decay;
        for h in 0..self.model.codebooks.count() {
            let book = &mut self.model.codebooks.books[h];
            if self.model.config.use_fcm {
                let slices: Vec<&[f64]> = fwd
                    .latents
                    .rows()
                    .into_iter()
                    .map(|r| &r.to_slice().expect("row-major")[h * width..(h + 1) * width])
                    .collect();
                fcm::fcm_update(book, &slices, decay);
            } else {
                self.codebook_opts[h].step_slice(&mut book.vectors, &grads.codebooks[h]);
                let selected: Vec<usize> = fwd.labels.iter().map(|l| l[h]).collect();
                book.record_usage(&selected, decay);
            }
        }
        if !self.model.encoder.is_finite() || !self.model.decoder.is_finite() {
            return Err(Error::NonFinite("VQVAE parameters after update".into()));
        }
        Ok(loss)
    }
}

/// Fraction of codebook vectors (over all codebooks) that label at least
/// one of the given pairs, plus the per-codebook used counts.
pub fn use_rate(model: &VqVae, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<UseRate> {
    let h = model.codebooks.count();
    let n = model.codebooks.size();
    let mut hit = vec![vec![false; n]; h];
    let chunk = 4096;
    let mut start = 0;
    while start < states.nrows() {
        let end = (start + chunk).min(states.nrows());
        let latents = model.encode_batch(states.slice(s![start..end, ..]), actions.slice(s![start..end, ..]))?;
        let width = model.codebooks.dim();
        for row in latents.rows() {
            let row = row.as_slice().expect("row-major");
            for (b, book) in model.codebooks.books().iter().enumerate() {
                let sq = book.sq_distances(&row[b * width..(b + 1) * width]);
                hit[b][argmin_lowest(&sq)] = true;
            }
        }
        start = end;
    }
    let per_codebook: Vec<usize> = hit.iter().map(|v| v.iter().filter(|&&x| x).count()).collect();
    let used: usize = per_codebook.iter().sum();
    Ok(UseRate {
        per_codebook,
        codebook_size: n,
        rate: used as f64 / (h * n) as f64,
        queries: states.nrows(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UseRate {
    pub per_codebook: Vec<usize>,
    pub codebook_size: usize,
    pub rate: f64,
    pub queries: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> VqConfig {
        VqConfig {
            latent_dim: 8,
            codebooks: 2,
            codebook_size: 16,
            hidden: vec![12],
            ..VqConfig::new(3, 2)
        }
    }

    #[test]
    fn partition_examples() {
        let p = LatentPartition::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(p.subspace(0), &[1.0, 2.0]);
        assert_eq!(p.subspace(1), &[3.0, 4.0]);
        let single = LatentPartition::new(vec![1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(single.subspace(0), &[1.0, 2.0, 3.0]);
        let table = LatentPartition::new(vec![0.5; 64], 4).unwrap();
        assert_eq!((table.count(), table.width()), (4, 16));
        assert!(LatentPartition::new(vec![0.0; 64], 3).is_err());
    }

    #[test]
    fn exact_match_selects_that_vector() {
        let mut vectors = vec![0.0; 8 * 2];
        for (i, v) in vectors.iter_mut().enumerate() {
            *v = i as f64;
        }
        let book = Codebook::from_vectors(2, vectors);
        let (z_q, k) = quantize_subspace(&[6.0, 7.0], &book);
        assert_eq!((k, z_q), (3, vec![6.0, 7.0]));
        assert_eq!(book.nearest(&[6.0, 7.0]).1, 0.0);
    }

    #[test]
    fn nearest_by_inspection_and_tie_break() {
        let book = Codebook::from_vectors(2, vec![0.0, 0.0, 10.0, 10.0]);
        assert_eq!(book.nearest(&[1.0, 1.0]).0, 0);
        let tie = Codebook::from_vectors(1, vec![-1.0, 1.0]);
        assert_eq!(tie.nearest(&[0.0]).0, 0);
    }

    #[test]
    fn zero_encoder_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small_config();
        let model = VqVae::new(cfg.clone(), &mut rng).unwrap();
        let mut enc = model.encoder().clone();
        let bias = Array1::from_iter((0..8).map(|i| i as f64 * 0.1));
        enc.visit_params_mut(|p| p.iter_mut().for_each(|v| *v = 0.0));
        let mut layers = enc.layers().to_vec();
        layers.last_mut().unwrap().bias = bias.clone();
        let enc = DenseNet::from_layers(layers, Activation::Relu, Activation::Identity).unwrap();
        let model = VqVae::from_parts(cfg, enc, model.decoder().clone(), model.codebooks().clone()).unwrap();
        assert_eq!(model.encode(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap(), bias.to_vec());
    }

    #[test]
    fn encode_and_decode_check_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VqVae::new(small_config(), &mut rng).unwrap();
        assert!(model.encode(&[1.0, 2.0], &[4.0, 5.0]).is_err());
        assert!(model.decode(&[0.0; 7], &[0.0; 3]).is_err());
        assert_eq!(model.encode(&[0.0; 3], &[0.0; 2]).unwrap().len(), 8);
        assert_eq!(model.decode(&[0.0; 8], &[0.0; 3]).unwrap().len(), 2);
        let table = VqVae::new(VqConfig { hidden: vec![8], ..VqConfig::new(2, 2) }, &mut rng).unwrap();
        assert_eq!(table.encode(&[0.1, 0.2], &[0.3, 0.4]).unwrap().len(), 64);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let p = LatentPartition::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let q = QuantizationResult {
            z_q: vec![1.0, 2.0, 3.0, 4.0],
            labels: vec![0, 0],
            sq_distances: vec![0.0, 0.0],
        };
        let l = vq_loss(&[0.5], &[0.5], &p, &q, 0.25);
        assert_eq!(l, VqLoss::default());
    }

    #[test]
    fn commitment_is_gamma_times_codebook() {
        let p = LatentPartition::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let q = QuantizationResult {
            z_q: vec![0.0, 2.5, 3.0, 1.0],
            labels: vec![0, 0],
            sq_distances: vec![1.25, 9.0],
        };
        let l = vq_loss(&[0.5, 1.0], &[0.0, 1.0], &p, &q, 0.25);
        assert_eq!(l.commitment, 0.25 * l.codebook);
        assert!((l.total - (l.reconstruction + l.codebook + l.commitment)).abs() < 1e-12);
    }

    #[test]
    fn codebook_checkpoint_round_trip() {
        let mut book = Codebook::from_vectors(2, vec![1.0, 2.0, 3.0, 4.0]);
        book.record_usage(&[1, 1, 0], 0.99);
        let set = CodebookSet::new(vec![book.clone(), book]).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = CodebookSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.book(0).vectors(), set.book(0).vectors());
        assert_eq!(back.book(1).lifetime_usage(), &[1, 2]);
    }

    #[test]
    fn usage_counters_stay_consistent() {
        let mut book = Codebook::from_vectors(1, vec![0.0, 1.0, 2.0]);
        book.record_usage(&[0, 2, 2], 0.99);
        book.record_usage(&[1], 0.99);
        assert_eq!(book.lifetime_total(), 4);
        let rates = book.use_rates();
        assert!((rates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_has_zero_codebook_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = VqConfig { codebook_size: 4, ..small_config() };
        let mut model = VqVae::new(cfg, &mut rng).unwrap();
        let states = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let actions = Array2::from_shape_fn((4, 2), |(i, j)| (i * j) as f64 * 0.1);
        // Codebooks equal to the encoder's outputs on exactly this batch.
        let latents = model.encode_batch(states.view(), actions.view()).unwrap();
        for h in 0..2 {
            let v: Vec<f64> = latents.slice(s![.., h * 4..(h + 1) * 4]).iter().copied().collect();
            model.codebooks_mut().books[h] = Codebook::from_vectors(4, v);
        }
        let losses = model.loss_batch(states.view(), actions.view()).unwrap();
        assert!(losses.iter().all(|l| l.codebook == 0.0 && l.commitment == 0.0));
    }

    proptest! {
        #[test]
        fn partition_round_trip_is_exact(v in proptest::collection::vec(-1e6f64..1e6, 12), h in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12])) {
            let p = LatentPartition::new(v.clone(), h).unwrap();
            prop_assert_eq!(p.concat(), v);
        }

        #[test]
        fn quantize_matches_exhaustive_scan_and_is_idempotent(
            seed in 0u64..1000,
            query in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<f64> = (0..256 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let book = Codebook::from_vectors(4, vectors);
            let (_, k) = quantize_subspace(&query, &book);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..256 {
                let d: f64 = book.vector(j).iter().zip(&query).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d { best_d = d; best = j; }
            }
            prop_assert_eq!(k, best);
            let (z_q, k2) = quantize_subspace(book.vector(k), &book);
            prop_assert_eq!(k2, k);
            prop_assert_eq!(z_q.as_slice(), book.vector(k));
        }

        #[test]
        fn batch_loss_terms_are_consistent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = VqVae::new(small_config(), &mut rng).unwrap();
            let states = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
            let actions = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
            model.init_codebooks(states.view(), actions.view(), &mut rng).unwrap();
            for l in model.loss_batch(states.view(), actions.view()).unwrap() {
                prop_assert!(l.reconstruction >= 0.0 && l.codebook >= 0.0 && l.commitment >= 0.0);
                let parts = l.reconstruction + l.codebook + l.commitment;
                prop_assert!((l.total - parts).abs() <= 1e-9 * parts.max(1e-300));
            }
        }
    }
}
