use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output head. The Gaussian head splits the output into `[mean | log_std]`
/// halves and clamps the log-std half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Linear,
    Gaussian { log_std_min: f64, log_std_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation, head: Head) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { sizes, activation, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {:?}", self.sizes)));
        }
        if let Head::Gaussian { log_std_min, log_std_max } = self.head {
            if self.output_dim() % 2 != 0 || !(log_std_min < log_std_max) {
                return Err(Error::InvalidArgument("Gaussian head needs an even output and min < max".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total weights plus biases implied by the layer sizes.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Dense network with all parameters in one flat vector, laid out per layer
/// as a row-major `in x out` weight block followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpParts", into = "MlpParts")]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Activations retained by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (the first entry is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    /// Unclamped network output.
    raw_output: Array2<f64>,
}

pub struct Backward {
    pub param_grad: Vec<f64>,
    pub input_grad: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpParts {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl TryFrom<MlpParts> for Mlp {
    type Error = Error;

    fn try_from(p: MlpParts) -> Result<Self> {
        Mlp::from_params(p.spec, p.params)
    }
}

impl From<Mlp> for MlpParts {
    fn from(m: Mlp) -> Self {
        MlpParts { spec: m.spec, params: m.params }
    }
}

fn offsets_for(spec: &MlpSpec) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(spec.n_layers() + 1);
    let mut acc = 0;
    offsets.push(0);
    for w in spec.sizes.windows(2) {
        acc += w[0] * w[1] + w[1];
        offsets.push(acc);
    }
    offsets
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weights
    /// and biases.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let offsets = offsets_for(&spec);
        Ok(Self { spec, params, offsets })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "parameter vector of length {} for an architecture with {}",
                params.len(),
                spec.param_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let offsets = offsets_for(&spec);
        Ok(Self { spec, params, offsets })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; callers keep them finite.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
        let base = self.offsets[l];
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[base..base + fan_in * fan_out]).unwrap();
        let b = ArrayView1::from(&self.params[base + fan_in * fan_out..self.offsets[l + 1]]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn apply_head(&self, mut out: Array2<f64>) -> Array2<f64> {
        if let Head::Gaussian { log_std_min, log_std_max } = self.spec.head {
            let half = self.spec.output_dim() / 2;
            out.slice_mut(s![.., half..]).mapv_inplace(|v| v.clamp(log_std_min, log_std_max));
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n = self.spec.n_layers();
        let mut h = x.to_owned();
        for l in 0..n {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            if l + 1 < n {
                z.mapv_inplace(|v| self.spec.activation.apply(v));
            }
            h = z;
        }
        Ok(self.apply_head(h))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n = self.spec.n_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut h = x.to_owned();
        for l in 0..n {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            inputs.push(h);
            if l + 1 < n {
                let act = z.mapv(|v| self.spec.activation.apply(v));
                pre.push(z);
                h = act;
            } else {
                h = z;
            }
        }
        let out = self.apply_head(h.clone());
        Ok((out, ForwardCache { inputs, pre, raw_output: h }))
    }

    /// Reverse-mode pass for the batch recorded in `cache`. `grad_out` is the
    /// loss gradient with respect to the (clamped) output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Backward> {
        let n = self.spec.n_layers();
        if cache.inputs.len() != n || cache.inputs[0].ncols() != self.spec.input_dim() {
            return Err(Error::InvalidArgument("forward cache does not belong to this network".into()));
        }
        if grad_out.dim() != cache.raw_output.dim() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match cached output {:?}",
                grad_out.dim(),
                cache.raw_output.dim()
            )));
        }
        let mut delta = grad_out.to_owned();
        if let Head::Gaussian { log_std_min, log_std_max } = self.spec.head {
            let half = self.spec.output_dim() / 2;
            let raw = cache.raw_output.slice(s![.., half..]);
            let mut d = delta.slice_mut(s![.., half..]);
            ndarray::Zip::from(&mut d).and(&raw).for_each(|g, &r| {
                if r < log_std_min || r > log_std_max {
                    *g = 0.0;
                }
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..n).rev() {
            if l + 1 < n {
                let act = self.spec.activation;
                ndarray::Zip::from(&mut delta).and(&cache.pre[l]).for_each(|d, &z| *d *= act.derivative(z));
            }
            let (fan_in, fan_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
            let base = self.offsets[l];
            let gw = cache.inputs[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            // logical iteration order is row-major whatever the memory layout
            for (dst, src) in grad[base..base + fan_in * fan_out].iter_mut().zip(gw.iter()) {
                *dst = *src;
            }
            for (dst, src) in grad[base + fan_in * fan_out..self.offsets[l + 1]].iter_mut().zip(gb.iter()) {
                *dst = *src;
            }
            let (w, _) = self.layer(l);
            delta = delta.dot(&w.t());
        }
        Ok(Backward { param_grad: grad, input_grad: delta })
    }

    /// Copy another network's parameters into this one.
    pub fn copy_from(&mut self, other: &Mlp) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::Dimension("architectures differ".into()));
        }
        self.params.copy_from_slice(&other.params);
        Ok(())
    }

    /// `self <- (1 - rate) * online + rate * self`, elementwise.
    pub fn blend_from(&mut self, online: &Mlp, rate: f64) -> Result<()> {
        if online.spec != self.spec {
            return Err(Error::Dimension("architectures differ".into()));
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - rate) * o + rate * *t;
        }
        Ok(())
    }
}

const MLP_MAGIC: &[u8; 8] = b"QCSEMLP1";

#[derive(Serialize, Deserialize)]
struct MlpHeader {
    spec: MlpSpec,
    param_count: usize,
}

/// Write `magic | u32 header length | JSON architecture | f64 params (LE)`.
pub fn write_mlp(net: &Mlp, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&MlpHeader { spec: net.spec.clone(), param_count: net.params.len() })?;
    w.write_all(MLP_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mlp(r: &mut impl Read) -> Result<Mlp> {
    let bad = |m: &str| Error::Schema(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("checkpoint truncated"))?;
    if &magic != MLP_MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("checkpoint truncated"))?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(|_| bad("checkpoint truncated"))?;
    let header: MlpHeader = serde_json::from_slice(&header).map_err(|e| Error::Schema(e.to_string()))?;
    if header.param_count != header.spec.param_count() {
        return Err(bad("parameter count disagrees with the architecture"));
    }
    let mut params = Vec::with_capacity(header.param_count);
    let mut buf = [0u8; 8];
    for _ in 0..header.param_count {
        r.read_exact(&mut buf).map_err(|_| bad("checkpoint truncated"))?;
        params.push(f64::from_le_bytes(buf));
    }
    Mlp::from_params(header.spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn small(head: Head, act: Activation, sizes: &[usize], seed: u64) -> Mlp {
        let spec = MlpSpec { sizes: sizes.to_vec(), activation: act, head };
        Mlp::new(spec, &mut stream(seed, Stream::Init)).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        let net = small(Head::Linear, Activation::Tanh, &[3, 5, 4, 2], 0);
        assert_eq!(net.params().len(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_weights_give_bias_broadcast() {
        let spec = MlpSpec { sizes: vec![2, 3, 2], activation: Activation::Tanh, head: Head::Linear };
        let mut params = vec![0.0; spec.param_count()];
        let n = params.len();
        params[n - 2] = 0.25;
        params[n - 1] = -1.5;
        let net = Mlp::from_params(spec, params).unwrap();
        let out = net.forward(array![[1.0, 2.0], [-3.0, 4.0]].view()).unwrap();
        assert_eq!(out, array![[0.25, -1.5], [0.25, -1.5]]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = small(Head::Linear, Activation::Relu, &[3, 8, 8, 2], 4);
        let mut rng = stream(9, Stream::Sampling);
        let x = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let full = net.forward(x.view()).unwrap();
        for i in 0..8 {
            let one = net.forward(x.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(one.row(0), full.row(i));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = small(Head::Linear, Activation::Tanh, &[3, 4, 1], 0);
        assert!(matches!(net.forward(Array2::zeros((2, 4)).view()), Err(Error::Dimension(_))));
        let (_, cache) = net.forward_cached(Array2::zeros((2, 3)).view()).unwrap();
        assert!(net.backward(&cache, Array2::zeros((3, 1)).view()).is_err());
        let other = small(Head::Linear, Activation::Tanh, &[5, 4, 1], 0);
        let (_, foreign) = other.forward_cached(Array2::zeros((2, 5)).view()).unwrap();
        assert!(net.backward(&foreign, Array2::zeros((2, 1)).view()).is_err());
    }

    #[test]
    fn gaussian_head_clamps_log_std() {
        let spec = MlpSpec {
            sizes: vec![1, 2],
            activation: Activation::Tanh,
            head: Head::Gaussian { log_std_min: -5.0, log_std_max: 2.0 },
        };
        // weight row [0, 10] then biases [0, 0]
        let net = Mlp::from_params(spec, vec![0.0, 10.0, 0.0, 0.0]).unwrap();
        let out = net.forward(array![[1.0], [-1.0], [0.1]].view()).unwrap();
        assert_eq!(out.column(1).to_vec(), vec![2.0, -5.0, 1.0]);
        let (_, cache) = net.forward_cached(array![[1.0], [0.1]].view()).unwrap();
        let g = net.backward(&cache, array![[0.0, 1.0], [0.0, 1.0]].view()).unwrap();
        // only the unclamped row contributes to the log-std weight gradient
        assert!((g.param_grad[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = small(Head::Linear, Activation::Tanh, &[2, 6, 3], 1);
        let (_, cache) = net.forward_cached(array![[0.3, -0.2]].view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((1, 3)).view()).unwrap();
        assert!(g.param_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = small(Head::Gaussian { log_std_min: -5.0, log_std_max: 2.0 }, Activation::Relu, &[4, 7, 4], 3);
        let mut buf = Vec::new();
        write_mlp(&net, &mut buf).unwrap();
        let back = read_mlp(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_mlp(&mut &buf[..buf.len() - 3]).is_err());
    }
}
