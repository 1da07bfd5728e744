//! Batched value/derivative propagation and its reverse sweep.
//!
//! A batch of `B` points is laid out as `S` stacked row blocks of `B` rows
//! each, one block per stream (value first, then the enabled derivative
//! streams in the order dx, dt, dxx). Pre-activations of all streams share
//! one matrix product per layer; biases only enter the value block.
//!
//! For a hidden unit `h = σ(z)` with `σ' = σ(1-σ)` and `σ'' = σ'(1-2σ)`:
//!
//! ```text
//! h_x  = σ' z_x
//! h_t  = σ' z_t
//! h_xx = σ'' z_x² + σ' z_xx
//! ```

use super::{LayerSlot, MlpSpec, INPUT_DIM};
use crate::domain::ScaledPoint;

/// Which input-derivative streams are propagated next to the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub dx: bool,
    pub dt: bool,
    /// Requires `dx`.
    pub dxx: bool,
}

impl Streams {
    pub const VALUE: Streams = Streams {
        dx: false,
        dt: false,
        dxx: false,
    };
    pub const ALL: Streams = Streams {
        dx: true,
        dt: true,
        dxx: true,
    };
    pub const WITH_DX: Streams = Streams {
        dx: true,
        dt: false,
        dxx: false,
    };
    pub const WITH_DT: Streams = Streams {
        dx: false,
        dt: true,
        dxx: false,
    };

    pub fn count(&self) -> usize {
        1 + self.dx as usize + self.dt as usize + self.dxx as usize
    }

    pub fn dx_block(&self) -> Option<usize> {
        self.dx.then_some(1)
    }

    pub fn dt_block(&self) -> Option<usize> {
        self.dt.then_some(1 + self.dx as usize)
    }

    pub fn dxx_block(&self) -> Option<usize> {
        self.dxx.then_some(1 + self.dx as usize + self.dt as usize)
    }
}

/// Forward record of one batch through one network, reusable across calls.
#[derive(Debug, Clone)]
pub struct Tape {
    spec: MlpSpec,
    layers: Vec<LayerSlot>,
    streams: Streams,
    batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    output: Vec<f64>,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

impl Tape {
    pub fn new(spec: MlpSpec) -> Self {
        let layers = spec.layers();
        let hidden = spec.hidden_layers;
        Self {
            spec,
            layers,
            streams: Streams::VALUE,
            batch: 0,
            input: Vec::new(),
            pre: vec![Vec::new(); hidden],
            act: vec![Vec::new(); hidden],
            output: Vec::new(),
            grad_a: Vec::new(),
            grad_b: Vec::new(),
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn streams(&self) -> Streams {
        self.streams
    }

    /// Network outputs of one stream block, one entry per point.
    pub fn block(&self, block: usize) -> &[f64] {
        &self.output[block * self.batch..(block + 1) * self.batch]
    }

    pub fn value(&self) -> &[f64] {
        self.block(0)
    }

    /// All outputs, stream-major.
    pub fn outputs(&self) -> &[f64] {
        &self.output
    }

    /// Propagates `points` and the requested derivative streams.
    pub fn forward(&mut self, params: &[f64], points: &[ScaledPoint], streams: Streams) {
        assert!(!streams.dxx || streams.dx, "dxx stream requires dx");
        assert_eq!(params.len(), self.spec.param_count(), "parameter length");
        let b = points.len();
        let s = streams.count();
        let rows = s * b;
        let width = self.spec.hidden_width;
        self.streams = streams;
        self.batch = b;

        self.input.clear();
        self.input.resize(rows * INPUT_DIM, 0.0);
        for (i, p) in points.iter().enumerate() {
            self.input[2 * i] = p.x_hat;
            self.input[2 * i + 1] = p.t_hat;
        }
        if let Some(k) = streams.dx_block() {
            for i in 0..b {
                self.input[2 * (k * b + i)] = 1.0;
            }
        }
        if let Some(k) = streams.dt_block() {
            for i in 0..b {
                self.input[2 * (k * b + i) + 1] = 1.0;
            }
        }

        let dx_block = streams.dx_block();
        let dt_block = streams.dt_block();
        let dxx_block = streams.dxx_block();
        for l in 0..self.spec.hidden_layers {
            let slot = self.layers[l];
            let (done, rest) = self.act.split_at_mut(l);
            let prev: &[f64] = if l == 0 { &self.input } else { &done[l - 1] };
            let pre = &mut self.pre[l];
            pre.resize(rows * width, 0.0);
            gemm_nt(
                rows,
                slot.n_in,
                slot.n_out,
                prev,
                &params[slot.weights..slot.biases],
                pre,
            );
            let bias = &params[slot.biases..slot.end()];
            let act = &mut rest[0];
            act.resize(rows * width, 0.0);
            for i in 0..b {
                let z = &mut pre[i * width..(i + 1) * width];
                let h = &mut act[i * width..(i + 1) * width];
                for j in 0..width {
                    z[j] += bias[j];
                    h[j] = sigmoid(z[j]);
                }
            }
            let (values, derivs) = act.split_at_mut(b * width);
            for i in 0..b {
                let sig = &values[i * width..(i + 1) * width];
                if let Some(k) = dx_block {
                    let off = (k - 1) * b * width + i * width;
                    let zx = &pre[(k * b + i) * width..(k * b + i + 1) * width];
                    let hx = &mut derivs[off..off + width];
                    for j in 0..width {
                        hx[j] = sig[j] * (1.0 - sig[j]) * zx[j];
                    }
                }
                if let Some(k) = dt_block {
                    let off = (k - 1) * b * width + i * width;
                    let zt = &pre[(k * b + i) * width..(k * b + i + 1) * width];
                    let ht = &mut derivs[off..off + width];
                    for j in 0..width {
                        ht[j] = sig[j] * (1.0 - sig[j]) * zt[j];
                    }
                }
                if let (Some(kx), Some(k)) = (dx_block, dxx_block) {
                    let off = (k - 1) * b * width + i * width;
                    let zx = &pre[(kx * b + i) * width..(kx * b + i + 1) * width];
                    let zxx = &pre[(k * b + i) * width..(k * b + i + 1) * width];
                    let hxx = &mut derivs[off..off + width];
                    for j in 0..width {
                        let s1 = sig[j] * (1.0 - sig[j]);
                        let s2 = s1 * (1.0 - 2.0 * sig[j]);
                        hxx[j] = s2 * zx[j] * zx[j] + s1 * zxx[j];
                    }
                }
            }
        }

        let out_slot = self.layers[self.spec.hidden_layers];
        let w_out = &params[out_slot.weights..out_slot.biases];
        let b_out = params[out_slot.biases];
        let last = &self.act[self.spec.hidden_layers - 1];
        self.output.clear();
        self.output.extend(
            last.chunks_exact(width)
                .map(|row| dot(row, w_out)),
        );
        for o in &mut self.output[..b] {
            *o += b_out;
        }
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// partial derivatives with respect to [`Tape::outputs`] are `adjoint`.
    pub fn backward(&mut self, params: &[f64], adjoint: &[f64], grad: &mut [f64]) {
        let b = self.batch;
        let streams = self.streams;
        let rows = streams.count() * b;
        let width = self.spec.hidden_width;
        let hidden = self.spec.hidden_layers;
        assert_eq!(adjoint.len(), rows, "adjoint length");
        assert_eq!(grad.len(), params.len(), "gradient length");

        let out_slot = self.layers[hidden];
        let w_out = &params[out_slot.weights..out_slot.biases];
        let last = &self.act[hidden - 1];
        {
            let gw = &mut grad[out_slot.weights..out_slot.biases];
            for (row, &g) in last.chunks_exact(width).zip(adjoint) {
                if g != 0.0 {
                    for j in 0..width {
                        gw[j] += g * row[j];
                    }
                }
            }
            grad[out_slot.biases] += adjoint[..b].iter().sum::<f64>();
        }
        let mut g = std::mem::take(&mut self.grad_a);
        let mut g_prev = std::mem::take(&mut self.grad_b);
        g.clear();
        g.resize(rows * width, 0.0);
        for (row, &a) in g.chunks_exact_mut(width).zip(adjoint) {
            for j in 0..width {
                row[j] = a * w_out[j];
            }
        }

        let dx_block = streams.dx_block();
        let dt_block = streams.dt_block();
        let dxx_block = streams.dxx_block();
        for l in (0..hidden).rev() {
            let slot = self.layers[l];
            let pre = &self.pre[l];
            let sig_all = &self.act[l][..b * width];
            // d/dh -> d/dz, all streams of a point at once
            for i in 0..b {
                let sig = &sig_all[i * width..(i + 1) * width];
                let row = |k: usize| (k * b + i) * width;
                for j in 0..width {
                    let s = sig[j];
                    let s1 = s * (1.0 - s);
                    let s2 = s1 * (1.0 - 2.0 * s);
                    let gh = g[row(0) + j];
                    let mut gz = gh * s1;
                    if let Some(k) = dx_block {
                        let zx = pre[row(k) + j];
                        let ghx = g[row(k) + j];
                        gz += ghx * s2 * zx;
                        let mut gzx = ghx * s1;
                        if let Some(kk) = dxx_block {
                            let zxx = pre[row(kk) + j];
                            let ghxx = g[row(kk) + j];
                            let s3 = s1 * (1.0 - 6.0 * s + 6.0 * s * s);
                            gz += ghxx * (s3 * zx * zx + s2 * zxx);
                            gzx += 2.0 * ghxx * s2 * zx;
                            g[row(kk) + j] = ghxx * s1;
                        }
                        g[row(k) + j] = gzx;
                    }
                    if let Some(k) = dt_block {
                        let zt = pre[row(k) + j];
                        let ght = g[row(k) + j];
                        gz += ght * s2 * zt;
                        g[row(k) + j] = ght * s1;
                    }
                    g[row(0) + j] = gz;
                }
            }
            let prev: &[f64] = if l == 0 { &self.input } else { &self.act[l - 1] };
            gemm_tn_acc(
                slot.n_out,
                rows,
                slot.n_in,
                &g,
                prev,
                &mut grad[slot.weights..slot.biases],
            );
            let gb = &mut grad[slot.biases..slot.end()];
            for r in g[..b * width].chunks_exact(width) {
                for j in 0..width {
                    gb[j] += r[j];
                }
            }
            if l > 0 {
                g_prev.clear();
                g_prev.resize(rows * slot.n_in, 0.0);
                gemm_nn(
                    rows,
                    slot.n_out,
                    slot.n_in,
                    &g,
                    &params[slot.weights..slot.biases],
                    &mut g_prev,
                );
                std::mem::swap(&mut g, &mut g_prev);
            }
        }
        self.grad_a = g;
        self.grad_b = g_prev;
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c (m×n) = a (m×k) · wᵀ` with `w` stored row-major as `n×k`.
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && w.len() == n * k && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) += gᵀ · h` with `g` stored row-major as `k×m` and `h` as `k×n`.
fn gemm_tn_acc(m: usize, k: usize, n: usize, g: &[f64], h: &[f64], c: &mut [f64]) {
    debug_assert!(g.len() >= k * m && h.len() >= k * n && c.len() == m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            g.as_ptr(),
            1,
            m as isize,
            h.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) = a (m×k) · w (k×n)`, all row-major.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && w.len() == k * n && c.len() >= m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
