//! Small feed-forward networks with hand-written backpropagation.
//!
//! Batches are `DMatrix` values with one column per sample. Parameters are
//! exposed as a flat vector laid out per layer as the weight matrix
//! (`fan_out x fan_in`, row-major) followed by the bias.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field2d::{read_all, write_atomic};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
        }
    }

    fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiableNet {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Intermediate values of a batched forward pass, kept for backprop.
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().unwrap()
    }
}

impl DifferentiableNet {
    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument("net needs >= 2 nonzero widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)),
                    b: DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    /// Net with the given layers; hidden layers use `activation`.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no layers".into()));
        }
        let mut widths = vec![layers[0].w.ncols()];
        for l in &layers {
            if l.w.ncols() != *widths.last().unwrap() || l.b.len() != l.w.nrows() {
                return Err(Error::InvalidArgument("inconsistent layer shapes".into()));
            }
            widths.push(l.w.nrows());
        }
        Ok(Self {
            widths,
            activation,
            layers,
        })
    }

    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                out.extend(l.w.row(r).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let mut o = 0;
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            for i in 0..r {
                for j in 0..c {
                    l.w[(i, j)] = p[o + i * c + j];
                }
            }
            o += r * c;
            for i in 0..r {
                l.b[i] = p[o + i];
            }
            o += r;
        }
        Ok(())
    }

    fn check_batch(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                got: x.nrows(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_batch(x)?;
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        acts.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            let a = if i + 1 < n {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardCache { acts, pre })
    }

    /// Batched evaluation, one column per sample.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(x)?;
        let n = self.layers.len();
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &a;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i + 1 < n {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    /// Backprop of per-sample cotangents (`d_out x n`). Returns the input
    /// cotangents and, if requested, the parameter gradient summed over the
    /// batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        cot: &DMatrix<f64>,
        want_params: bool,
    ) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
        if cot.nrows() != self.d_out() || cot.ncols() != cache.acts[0].ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.d_out(),
                got: cot.nrows(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        let mut dz = cot.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if want_params {
                let dw = &dz * cache.acts[i].transpose();
                let db = dz.column_sum();
                grads.push((dw, db));
            }
            let mut da = l.w.transpose() * &dz;
            if i > 0 {
                let z = &cache.pre[i - 1];
                let a = &cache.acts[i];
                for ((d, z), a) in da.iter_mut().zip(z.iter()).zip(a.iter()) {
                    *d *= self.activation.deriv(*z, *a);
                }
            }
            dz = da;
        }
        let params = want_params.then(|| {
            let mut out = Vec::with_capacity(self.n_params());
            for (dw, db) in grads.iter().rev() {
                for r in 0..dw.nrows() {
                    out.extend(dw.row(r).iter());
                }
                out.extend(db.iter());
            }
            out
        });
        Ok((dz, params))
    }

    /// `cotangent^T * d output / d input`.
    pub fn vjp_input(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(&DMatrix::from_column_slice(input.len(), 1, input))?;
        let cot = DMatrix::from_column_slice(cotangent.len(), 1, cotangent);
        Ok(self.backward(&cache, &cot, false)?.0.as_slice().to_vec())
    }

    /// `cotangent^T * d output / d params`, in the flat layout.
    pub fn grad_params(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(&DMatrix::from_column_slice(input.len(), 1, input))?;
        let cot = DMatrix::from_column_slice(cotangent.len(), 1, cotangent);
        Ok(self.backward(&cache, &cot, true)?.1.unwrap())
    }

    /// Serialized checkpoint with optional extra header scalars.
    pub fn to_bytes(&self, extra: &[f64]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.activation.id().to_le_bytes());
        buf.extend_from_slice(&(extra.len() as u32).to_le_bytes());
        for v in extra.iter().chain(self.params().iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(Self, Vec<f64>)> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("missing TFNN magic"));
        }
        if cur.u32().ok_or_else(|| bad("truncated"))? != VERSION {
            return Err(bad("unsupported version"));
        }
        let nw = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        if !(2..=64).contains(&nw) {
            return Err(bad("bad layer count"));
        }
        let widths: Vec<usize> = (0..nw)
            .map(|_| cur.u32().map(|w| w as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated"))?;
        let act = cur
            .u32()
            .and_then(Activation::from_id)
            .ok_or_else(|| bad("unknown activation"))?;
        let n_extra = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let extra: Vec<f64> = (0..n_extra)
            .map(|_| cur.f64())
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated"))?;
        let mut net = DifferentiableNet::from_layers(
            widths
                .windows(2)
                .map(|w| Layer {
                    w: DMatrix::zeros(w[1], w[0]),
                    b: DVector::zeros(w[1]),
                })
                .collect(),
            act,
        )
        .map_err(|_| bad("bad widths"))?;
        let params: Vec<f64> = (0..net.n_params())
            .map(|_| cur.f64())
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated parameters"))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        net.set_params(&params).map_err(|_| bad("non-finite parameters"))?;
        Ok((net, extra))
    }

    pub fn save(&self, path: &Path, extra: &[f64]) -> Result<()> {
        write_atomic(path, &self.to_bytes(extra))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<f64>)> {
        Self::from_bytes(path, &read_all(path)?)
    }
}

const MAGIC: &[u8; 4] = b"TFNN";
const VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// `s -> [s, sin(f_k s), cos(f_k s)]` with `f_k = base * 2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarEmbedding {
    pub n_freq: usize,
    pub base: f64,
}

impl ScalarEmbedding {
    pub fn new(n_freq: usize, base: f64) -> Self {
        Self { n_freq, base }
    }

    pub fn dim(&self) -> usize {
        2 * self.n_freq + 1
    }

    pub fn embed_into(&self, s: f64, out: &mut [f64]) {
        out[0] = s;
        let mut f = self.base;
        for k in 0..self.n_freq {
            let (sn, cs) = (f * s).sin_cos();
            out[1 + 2 * k] = sn;
            out[2 + 2 * k] = cs;
            f *= 2.0;
        }
    }

    pub fn embed(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(s, &mut out);
        out
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn train_step(net: &mut DifferentiableNet, state: &mut TrainState, grads: &[f64]) -> Result<()> {
    let n = net.n_params();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradientOverflow);
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut p = net.params();
    for i in 0..n {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        p[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    net.set_params(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1e-8 + a.abs().max(b.abs()))
    }

    fn check_fd(net: &DifferentiableNet, seed: u64) {
        let mut r = rng::substream(seed, "fd", 0);
        for _ in 0..10 {
            let x: Vec<f64> = (0..net.d_in()).map(|_| r.gen_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..net.d_out()).map(|_| r.gen_range(-1.0..1.0)).collect();
            let dot = |o: Vec<f64>| o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
            let h = 1e-5;
            let gi = net.vjp_input(&x, &c).unwrap();
            for j in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (dot(net.forward(&xp).unwrap()) - dot(net.forward(&xm).unwrap())) / (2.0 * h);
                assert!(rel(gi[j], fd) < 1e-5 || (gi[j] - fd).abs() < 1e-9, "{} {}", gi[j], fd);
            }
            let gp = net.grad_params(&x, &c).unwrap();
            let p = net.params();
            let mut probe = net.clone();
            for j in (0..p.len()).step_by(7) {
                let mut pp = p.clone();
                pp[j] += h;
                probe.set_params(&pp).unwrap();
                let fp = dot(probe.forward(&x).unwrap());
                pp[j] -= 2.0 * h;
                probe.set_params(&pp).unwrap();
                let fm = dot(probe.forward(&x).unwrap());
                let fd = (fp - fm) / (2.0 * h);
                assert!(rel(gp[j], fd) < 1e-5 || (gp[j] - fd).abs() < 1e-9, "{} {}", gp[j], fd);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::substream(0, "init", 0);
        for (widths, act) in [
            (vec![3, 8, 8, 2], Activation::Tanh),
            (vec![11, 16, 16, 16, 2], Activation::Tanh),
            (vec![11, 16, 16, 1], Activation::Tanh),
            (vec![4, 6, 1], Activation::Softplus),
        ] {
            let net = DifferentiableNet::new(&widths, act, &mut r).unwrap();
            check_fd(&net, widths.len() as u64);
        }
    }

    #[test]
    fn linear_net_is_affine() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let b = DVector::from_vec(vec![0.25, -4.0]);
        let net = DifferentiableNet::from_layers(
            vec![Layer {
                w: w.clone(),
                b: b.clone(),
            }],
            Activation::Tanh,
        )
        .unwrap();
        let x = [1.0, -2.0, 0.5];
        let out = net.forward(&x).unwrap();
        assert_eq!(out, vec![1.0 - 4.0 + 1.5 + 0.25, -1.0 - 1.0 + 0.0 - 4.0]);
        assert_eq!(net.vjp_input(&x, &[2.0, 1.0]).unwrap(), vec![1.0, 4.5, 6.0]);
        assert_eq!(net.vjp_input(&x, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_last_layer_outputs_bias() {
        let mut net = DifferentiableNet::new(&[2, 5, 3], Activation::Tanh, &mut rng::substream(1, "i", 0)).unwrap();
        net.zero_last_layer();
        assert_eq!(net.forward(&[0.3, 7.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(net.n_params(), 3 * 5 + 6 * 3);
    }

    #[test]
    fn output_bias_gradient_is_cotangent() {
        let net = DifferentiableNet::new(&[2, 5, 3], Activation::Tanh, &mut rng::substream(1, "i", 0)).unwrap();
        let g = net.grad_params(&[0.1, 0.2], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(&g[g.len() - 3..], &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn tanh_zero_input_kills_first_layer_weight_grads() {
        let mut net = DifferentiableNet::new(&[2, 4, 4, 1], Activation::Tanh, &mut rng::substream(2, "i", 0)).unwrap();
        let mut p = net.params();
        // zero hidden biases
        let l0 = 4 * 2;
        p[l0..l0 + 4].iter_mut().for_each(|v| *v = 0.0);
        let l1 = l0 + 4 + 16;
        p[l1..l1 + 4].iter_mut().for_each(|v| *v = 0.0);
        net.set_params(&p).unwrap();
        let g = net.grad_params(&[0.0, 0.0], &[1.0]).unwrap();
        assert!(g[..l0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_init_and_finite_on_range() {
        let a = DifferentiableNet::new(&[2, 16, 2], Activation::Tanh, &mut rng::substream(5, "i", 0)).unwrap();
        let b = DifferentiableNet::new(&[2, 16, 2], Activation::Tanh, &mut rng::substream(5, "i", 0)).unwrap();
        assert_eq!(a.forward(&[0.5, -1.0]).unwrap(), b.forward(&[0.5, -1.0]).unwrap());
        for x in [-10.0, -3.0, 0.0, 4.0, 10.0] {
            for y in [-10.0, 0.0, 10.0] {
                assert!(a.forward(&[x, y]).unwrap().iter().all(|v| v.is_finite()));
            }
        }
        assert!(matches!(a.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn adam_step_closed_form() {
        let mut net = DifferentiableNet::new(&[2, 3, 1], Activation::Tanh, &mut rng::substream(5, "i", 0)).unwrap();
        let p0 = net.params();
        let mut st = TrainState::new(net.n_params(), 0.01);
        train_step(&mut net, &mut st, &vec![0.0; p0.len()]).unwrap();
        assert_eq!(net.params(), p0);
        let g: Vec<f64> = (0..p0.len()).map(|i| (i as f64 - 6.0) * 0.3).collect();
        let mut st = TrainState::new(net.n_params(), 0.01);
        train_step(&mut net, &mut st, &g).unwrap();
        for ((p1, p0), g) in net.params().iter().zip(&p0).zip(&g) {
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((p1 - p0 - expect).abs() < 1e-15);
        }
        let mut bad = g.clone();
        bad[0] = f64::NAN;
        assert!(matches!(
            train_step(&mut net, &mut st, &bad),
            Err(Error::GradientOverflow)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DifferentiableNet::new(&[11, 8, 1], Activation::Softplus, &mut rng::substream(5, "i", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.tfnn");
        net.save(&p, &[0.1, 100.0]).unwrap();
        let (back, extra) = DifferentiableNet::load(&p).unwrap();
        assert_eq!(back, net);
        assert_eq!(extra, vec![0.1, 100.0]);
        std::fs::write(&p, b"TFNNxx").unwrap();
        assert!(DifferentiableNet::load(&p).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = ScalarEmbedding::new(4, 1.0);
        let v = e.embed(0.5);
        assert_eq!(v.len(), 9);
        assert_eq!(v[0], 0.5);
        assert!((v[7] - 4.0f64.sin()).abs() < 1e-15);
    }
}
