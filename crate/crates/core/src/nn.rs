//! Minimal layer toolkit with hand-written backward passes.
//!
//! Everything runs on single `(c, h, w)` maps in f64; batching is done by
//! the callers. Convolutions are stride 1 with `k / 2` zero padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

/// Deterministic generator for `(seed, stream)`.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Running statistics and other buffers are not optimized.
    pub trainable: bool,
}

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
            trainable,
        });
        self.tensors.len() - 1
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Zeroed gradient buffers matching every tensor.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rounds every value to the nearest f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Normal samples with standard deviation `std`, rounded to f32 precision.
pub fn normal_init(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32 as f64
        })
        .collect()
}

/// Convolution weights are laid out `[out][in][ky][kx]`.
pub fn conv2d(x: &Tensor3, w: &[f64], b: &[f64], out_ch: usize, k: usize) -> Tensor3 {
    let s = x.shape();
    if k == 1 {
        return conv1x1(x, w, b, out_ch);
    }
    let (hh, ww) = (s.height, s.width);
    let pad = (k / 2) as isize;
    let mut out = Tensor3::zeros(s.with_channels(out_ch));
    for o in 0..out_ch {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..s.channels {
            let xin = x.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * s.channels + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (hh as isize - dy).min(hh as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (ww as isize - dx).min(ww as isize).max(0) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * ww..(y + 1) * ww];
                        let irow = &xin[sy * ww..(sy + 1) * ww];
                        for xx in x0..x1 {
                            let sx = (xx as isize + dx) as usize;
                            orow[xx] += wv * irow[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv1x1(x: &Tensor3, w: &[f64], b: &[f64], out_ch: usize) -> Tensor3 {
    let s = x.shape();
    let n = s.tokens();
    let mut out = Tensor3::zeros(s.with_channels(out_ch));
    for o in 0..out_ch {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..s.channels {
            let wv = w[o * s.channels + i];
            let xin = x.plane(i);
            for p in 0..n {
                plane[p] += wv * xin[p];
            }
        }
    }
    out
}

/// Backward of [`conv2d`]. Accumulates into `gw`/`gb`; returns the input
/// gradient when `need_input` is set.
pub fn conv2d_backward(
    x: &Tensor3,
    w: &[f64],
    k: usize,
    grad_out: &Tensor3,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Option<Tensor3> {
    let s = x.shape();
    let out_ch = grad_out.shape().channels;
    let (hh, ww) = (s.height, s.width);
    let pad = (k / 2) as isize;
    let mut gx = need_input.then(|| Tensor3::zeros(s));
    for o in 0..out_ch {
        let go = grad_out.plane(o);
        gb[o] += go.iter().sum::<f64>();
        for i in 0..s.channels {
            let xin = x.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * s.channels + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (hh as isize - dy).min(hh as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (ww as isize - dx).min(ww as isize).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for xx in x0..x1 {
                            let sx = (xx as isize + dx) as usize;
                            acc += go[y * ww + xx] * xin[sy * ww + sx];
                        }
                    }
                    gw[widx] += acc;
                    if let Some(gx) = gx.as_mut() {
                        if wv != 0.0 {
                            let gplane = gx.plane_mut(i);
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                for xx in x0..x1 {
                                    let sx = (xx as isize + dx) as usize;
                                    gplane[sy * ww + sx] += wv * go[y * ww + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    pre.zip_map(grad_out, |p, g| if p > 0.0 { g } else { 0.0 })
        .expect("relu shapes")
}

/// Non-overlapping `s x s` average pooling. Spatial dims must divide by `s`.
pub fn avg_pool(x: &Tensor3, s: usize) -> Tensor3 {
    let sh = x.shape();
    let out_shape = Shape3::new(sh.channels, sh.height / s, sh.width / s);
    let inv = 1.0 / (s * s) as f64;
    Tensor3::from_fn(out_shape, |c, h, w| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += x.get(c, h * s + dy, w * s + dx);
            }
        }
        acc * inv
    })
}

pub fn avg_pool_backward(in_shape: Shape3, s: usize, grad_out: &Tensor3) -> Tensor3 {
    let inv = 1.0 / (s * s) as f64;
    Tensor3::from_fn(in_shape, |c, h, w| grad_out.get(c, h / s, w / s) * inv)
}

/// Global average pool to one value per channel.
pub fn global_avg_pool(x: &Tensor3) -> Vec<f64> {
    let n = x.shape().tokens() as f64;
    (0..x.shape().channels)
        .map(|c| x.plane(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(shape: Shape3, grad: &[f64]) -> Tensor3 {
    let n = shape.tokens() as f64;
    Tensor3::from_fn(shape, |c, _, _| grad[c] / n)
}

/// `w` is `[out][in]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward(x: &[f64], w: &[f64], grad_out: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        gb[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

/// Softmax cross-entropy; returns (loss, d loss / d logits).
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[target];
    let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
    g[target] -= 1.0;
    (loss, g)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Global ℓ2 norm of a gradient set.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
/// Returns the norm before clipping and the applied scale factor.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let norm = grad_norm(grads);
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= scale;
        }
    }
    (norm, scale)
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shapes(params.len(), grads.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, t) in params.tensors.iter_mut().enumerate() {
            if !t.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            for j in 0..t.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                t.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Shape3, seed: u64) -> Tensor3 {
        let mut r = rng(seed, 0);
        Tensor3::from_vec(shape, normal_init(&mut r, shape.len(), 1.0)).unwrap()
    }

    /// Scalar probe `sum(out * proj)` and its finite-difference check.
    fn probe(out: &Tensor3, proj: &Tensor3) -> f64 {
        out.dot(proj).unwrap()
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let xs = Shape3::new(2, 4, 5);
        let x = rand_tensor(xs, 1);
        let mut r = rng(2, 0);
        let w = normal_init(&mut r, 3 * 2 * 9, 0.5);
        let b = normal_init(&mut r, 3, 0.5);
        let proj = rand_tensor(xs.with_channels(3), 3);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(&x, &w, 3, &proj, &mut gw, &mut gb, true).unwrap();
        let h = 1e-6;
        for idx in [0, 7, 20, 53] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (probe(&conv2d(&x, &wp, &b, 3, 3), &proj) - probe(&conv2d(&x, &wm, &b, 3, 3), &proj)) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6 * fd.abs().max(1.0), "w[{idx}] {fd} vs {}", gw[idx]);
        }
        for idx in [0, 9, 19, 39] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (probe(&conv2d(&xp, &w, &b, 3, 3), &proj) - probe(&conv2d(&xm, &w, &b, 3, 3), &proj)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let bsum: f64 = proj.plane(1).iter().sum();
        assert!((gb[1] - bsum).abs() < 1e-12);
    }

    #[test]
    fn conv1x1_matches_general_path() {
        let x = rand_tensor(Shape3::new(3, 2, 2), 5);
        let w = vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0];
        let b = vec![0.1, -0.1];
        let fast = conv2d(&x, &w, &b, 2, 1);
        let manual = Tensor3::from_fn(Shape3::new(2, 2, 2), |o, h, ww| {
            b[o] + (0..3).map(|i| w[o * 3 + i] * x.get(i, h, ww)).sum::<f64>()
        });
        for (a, m) in fast.data().iter().zip(manual.data()) {
            assert!((a - m).abs() < 1e-14);
        }
    }

    #[test]
    fn pool_and_linear_backward() {
        let x = rand_tensor(Shape3::new(2, 4, 4), 9);
        let p = avg_pool(&x, 2);
        assert_eq!(p.shape(), Shape3::new(2, 2, 2));
        assert!((p.get(1, 1, 0) - (x.get(1, 2, 0) + x.get(1, 2, 1) + x.get(1, 3, 0) + x.get(1, 3, 1)) / 4.0).abs() < 1e-15);
        let g = avg_pool_backward(x.shape(), 2, &p);
        assert_eq!(g.get(0, 3, 3), p.get(0, 1, 1) / 4.0);

        let xv = vec![1.0, -2.0];
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.0, 1.0, -1.0];
        assert_eq!(linear(&xv, &w, &b), vec![-3.0, -4.0, -8.0]);
        let mut gw = vec![0.0; 6];
        let mut gb = vec![0.0; 3];
        let gx = linear_backward(&xv, &w, &[1.0, 0.0, 1.0], &mut gw, &mut gb);
        assert_eq!(gx, vec![6.0, 8.0]);
        assert_eq!(gw, vec![1.0, -2.0, 0.0, 0.0, 1.0, -2.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let (norm, scale) = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((scale - 0.2).abs() < 1e-15);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.3]];
        assert_eq!(clip_grad_norm(&mut small, 1.0).1, 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::default();
        p.push("w", vec![2], vec![1.0, -1.0], true);
        p.push("stat", vec![1], vec![5.0], false);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[vec![2.0, -0.5], vec![1.0]]).unwrap();
        assert!((p.get(0)[0] - 0.9).abs() < 1e-6);
        assert!((p.get(0)[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.get(1), &[5.0]);
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut p = ParamSet::default();
        p.push("a", vec![1], vec![1.0], true);
        let c0 = p.checksum();
        p.get_mut(0)[0] = 1.0 + f64::EPSILON;
        assert_ne!(c0, p.checksum());
    }

    #[test]
    fn cross_entropy_gradient() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 1);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
    }
}
