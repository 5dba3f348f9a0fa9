//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! A [`DenseNet`] is a chain of affine layers `z = W x + b` followed by an
//! element-wise activation. The forward pass over a batch records a
//! [`Trace`] of layer activations; [`DenseNet::backward`] replays it in
//! reverse to produce parameter gradients and the gradient with respect to
//! the network input. Losses are composed by the caller, who supplies the
//! gradient of the loss with respect to the network output.
//!
//! Batches are row-major: one sample per row.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{check_dim, Error, Result};

const NET_MAGIC: &[u8; 4] = b"VQNN";
const NET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// One affine layer. `weight` has shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    hidden: Activation,
    output: Activation,
}

/// Activations recorded by [`DenseNet::forward_traced`]; `activations[0]`
/// is the input batch and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients, shaped exactly like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl DenseNet {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must list at least two positive sizes, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Builds a network from explicit layers. Shapes must chain.
    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            check_dim("layer bias", l.weight.nrows(), l.bias.len())?;
        }
        for pair in layers.windows(2) {
            check_dim("layer chain", pair[0].weight.nrows(), pair[1].weight.ncols())?;
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(batch)?.iter().copied().collect())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.affine(layer, h.view(), self.activation_for(i));
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<Trace> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.affine(layer, activations[i].view(), self.activation_for(i));
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    fn affine(&self, layer: &Dense, x: ArrayView2<f64>, act: Activation) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        if !z.is_standard_layout() {
            // Downstream code slices rows as contiguous memory.
            z = z.as_standard_layout().into_owned();
        }
        z += &layer.bias;
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    /// Back-propagates `grad_output` (dL/d output, one row per sample)
    /// through a recorded trace. Returns parameter gradients and dL/d input.
    pub fn backward(&self, trace: &Trace, grad_output: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        assert_eq!(
            grad_output.dim(),
            trace.output().dim(),
            "gradient shape must match the traced output"
        );
        let mut delta = grad_output.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_for(i);
            if act != Activation::Identity {
                delta.zip_mut_with(&trace.activations[i + 1], |d, &y| *d *= act.grad_at_output(y));
            }
            let weight = delta.t().dot(&trace.activations[i]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[i].weight);
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.num_params(), flat.len())?;
        let mut offset = 0;
        self.visit_params_mut(|chunk| {
            chunk.copy_from_slice(&flat[offset..offset + chunk.len()]);
            offset += chunk.len();
        });
        Ok(())
    }

    /// Visits weight then bias storage of every layer, in order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight.as_slice_mut().expect("standard layout"));
            f(l.bias.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self ← tau · source + (1 − tau) · self`, elementwise.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weight.zip_mut_with(&src.weight, |d, &s| *d = tau * s + (1.0 - tau) * *d);
            dst.bias.zip_mut_with(&src.bias, |d, &s| *d = tau * s + (1.0 - tau) * *d);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&NET_VERSION.to_le_bytes())?;
        let dims = self.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[self.hidden.tag(), self.output.tag()])?;
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Format("bad network magic".into()));
        }
        let version = read_u32(r)?;
        if version != NET_VERSION {
            return Err(Error::Format(format!("unsupported network version {version}")));
        }
        let n = read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let hidden = Activation::from_tag(tags[0])?;
        let output = Activation::from_tag(tags[1])?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in dims.windows(2) {
            let weight = read_f64s(r, w[0] * w[1])?;
            let bias = read_f64s(r, w[1])?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((w[1], w[0]), weight)
                    .map_err(|e| Error::Format(e.to_string()))?,
                bias: Array1::from(bias),
            });
        }
        Self::from_layers(layers, hidden, output)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_net(net: &DenseNet, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment accumulators, shaped like the flat parameter vector.
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    fn begin_step(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn update_chunk(&mut self, offset: usize, params: &mut [f64], grads: &[f64], corr: (f64, f64)) {
        let (c1, c2) = corr;
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter size mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/gradient size mismatch");
        let corr = self.begin_step();
        self.update_chunk(0, params, grads, corr);
    }

    pub fn step_net(&mut self, net: &mut DenseNet, grads: &Gradients) {
        assert_eq!(net.num_params(), self.m.len(), "optimizer/network size mismatch");
        let corr = self.begin_step();
        let mut offset = 0;
        for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
            let w = layer.weight.as_slice_mut().expect("standard layout");
            let gw = g.weight.as_slice().expect("standard layout");
            let n = w.len();
            self.update_chunk(offset, w, gw, corr);
            offset += n;
            let b = layer.bias.as_slice_mut().expect("standard layout");
            let gb = g.bias.as_slice().expect("standard layout");
            let n = b.len();
            self.update_chunk(offset, b, gb, corr);
            offset += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> DenseNet {
        DenseNet::from_layers(
            vec![Dense {
                weight: array![[1.0, 0.0], [0.0, 1.0]],
                bias: array![0.0, 0.0],
            }],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        assert_eq!(identity_net().forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let net = DenseNet::from_layers(
            vec![Dense {
                weight: Array2::zeros((1, 3)),
                bias: array![3.0],
            }],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[5.0, -1.0, 9.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        assert!(matches!(
            identity_net().forward(&[1.0]),
            Err(Error::Dimension { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let layers = vec![
            Dense { weight: Array2::zeros((3, 2)), bias: Array1::zeros(3) },
            Dense { weight: Array2::zeros((1, 4)), bias: Array1::zeros(1) },
        ];
        assert!(DenseNet::from_layers(layers, Activation::Tanh, Activation::Identity).is_err());
    }

    #[test]
    fn two_layer_tanh_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::new(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.7];
        let got = net.forward(&x).unwrap();
        let l = net.layers();
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = l[0].bias[j];
            for (i, xi) in x.iter().enumerate() {
                acc += l[0].weight[[j, i]] * xi;
            }
            *h = acc.tanh();
        }
        for k in 0..2 {
            let mut acc = l[1].bias[k];
            for (j, h) in hidden.iter().enumerate() {
                acc += l[1].weight[[k, j]] * h;
            }
            assert!((acc - got[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn glorot_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNet::new(&[10, 30], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(net.layers()[0].weight.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn sum_loss_gives_unit_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(&[3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let trace = net.forward_traced(x.view()).unwrap();
        let (g, _) = net.backward(&trace, Array2::ones((1, 2)).view());
        assert_eq!(g.layers[0].bias, array![1.0, 1.0]);
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient() {
        let mut p = vec![0.5, -2.0];
        let mut opt = Adam::new(2, 1e-3);
        for _ in 0..10 {
            opt.step_slice(&mut p, &[0.0, 0.0]);
        }
        assert!((p[0] - 0.5).abs() <= 1e-12 && (p[1] + 2.0).abs() <= 1e-12);
    }

    #[test]
    fn adam_descends_on_positive_gradient() {
        let mut p = vec![1.0];
        let mut opt = Adam::new(1, 1e-3);
        let mut last = p[0];
        for _ in 0..5 {
            opt.step_slice(&mut p, &[2.0]);
            assert!(p[0] < last);
            last = p[0];
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::new(&[4, 8, 3], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VQNN");
        let back = DenseNet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseNet::new(&[2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let b = DenseNet::new(&[2, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut t = b.clone();
        t.soft_update_from(&a, 0.0);
        assert_eq!(t, b);
        t.soft_update_from(&a, 1.0);
        assert_eq!(t, a);
    }
}
