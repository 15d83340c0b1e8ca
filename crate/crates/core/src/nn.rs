//! Minimal dense/conv network kernels with explicit backprop, in f64.
//!
//! Layers cache nothing between calls; the caller keeps the activations it
//! needs and hands them back for the backward pass. Gradients accumulate
//! into `grad_*` buffers inside each layer so an optimizer can visit them
//! by name. All math is sequential and deterministic for a fixed seed.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// d(act)/dz expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layer: y = act(x W + b).
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-limit..limit));
        Dense {
            weight,
            bias: Array1::zeros(out_dim),
            activation,
            grad_weight: Array2::zeros((in_dim, out_dim)),
            grad_bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight);
        out += &self.bias;
        out.mapv_inplace(|z| self.activation.apply(z));
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// `x` and `y` must be the forward input and output of this layer.
    pub fn backward(&mut self, x: &Array2<f64>, y: &Array2<f64>, grad_y: &Array2<f64>) -> Array2<f64> {
        let mut grad_z = grad_y.clone();
        grad_z.zip_mut_with(y, |g, &out| *g *= self.activation.derivative_from_output(out));
        self.backward_preact(x, &grad_z)
    }

    /// Backward pass when the caller already holds dL/dz (the pre-activation
    /// gradient), e.g. the analytic sigmoid + cross-entropy combination.
    pub fn backward_preact(&mut self, x: &Array2<f64>, grad_z: &Array2<f64>) -> Array2<f64> {
        self.grad_weight += &x.t().dot(grad_z);
        self.grad_bias += &grad_z.sum_axis(Axis(0));
        grad_z.dot(&self.weight.t())
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 3x3-style convolution (stride 1, square kernel, zero padding) stored in
/// GEMM layout: weight is (out_channels, in_channels * k * k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub relu: bool,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((out_channels, in_channels * kernel * kernel), |_| {
            normal.sample(rng)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            padding,
            relu,
            grad_weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            grad_bias: Array1::zeros(out_channels),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.padding + 1 - self.kernel,
            w + 2 * self.padding + 1 - self.kernel,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Array4::zeros((n, self.out_channels, oh, ow));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), self.kernel, self.padding, oh, ow);
            let mut out_mat = self.weight.dot(&cols);
            for (mut row, &b) in out_mat.outer_iter_mut().zip(self.bias.iter()) {
                row += b;
            }
            if self.relu {
                out_mat.mapv_inplace(|v| v.max(0.0));
            }
            let reshaped = out_mat
                .into_shape_with_order((self.out_channels, oh, ow))
                .expect("conv output reshape");
            out.index_axis_mut(Axis(0), i).assign(&reshaped);
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient unless
    /// `need_grad_in` is false (the first layer of a network skips it).
    pub fn backward(
        &mut self,
        x: &Array4<f64>,
        y: &Array4<f64>,
        grad_y: &Array4<f64>,
        need_grad_in: bool,
    ) -> Option<Array4<f64>> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut grad_in = if need_grad_in {
            Some(Array4::zeros(x.dim()))
        } else {
            None
        };
        for i in 0..n {
            let mut g_mat = grad_y
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("conv grad reshape");
            if self.relu {
                let y_mat = y
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((self.out_channels, oh * ow))
                    .expect("conv act reshape");
                g_mat.zip_mut_with(&y_mat, |g, &out| {
                    if out <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let cols = im2col(x.index_axis(Axis(0), i), self.kernel, self.padding, oh, ow);
            self.grad_weight += &g_mat.dot(&cols.t());
            self.grad_bias += &g_mat.sum_axis(Axis(1));
            if let Some(grad_in) = grad_in.as_mut() {
                let g_cols = self.weight.t().dot(&g_mat);
                col2im(
                    &g_cols,
                    self.kernel,
                    self.padding,
                    (self.in_channels, h, w),
                    &mut grad_in.index_axis_mut(Axis(0), i),
                );
            }
        }
        grad_in
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    k: usize,
    pad: usize,
    shape: (usize, usize, usize),
    out: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = shape;
    let ow = w + 2 * pad + 1 - k;
    let oh = h + 2 * pad + 1 - k;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                let col_row = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ci, iy as usize, ix as usize)] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling (window == stride). Trailing rows/columns
/// that do not fill a window are dropped.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.size, w / self.size)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                best = best.max(x[(i, ci, oy * self.size + dy, ox * self.size + dx)]);
                            }
                        }
                        out[(i, ci, oy, ox)] = best;
                    }
                }
            }
        }
        out
    }

    /// Routes each output gradient to the first maximum in scan order.
    pub fn backward(&self, x: &Array4<f64>, grad_y: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut grad_in = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = (0, 0);
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let v = x[(i, ci, oy * self.size + dy, ox * self.size + dx)];
                                if v > best {
                                    best = v;
                                    best_pos = (oy * self.size + dy, ox * self.size + dx);
                                }
                            }
                        }
                        grad_in[(i, ci, best_pos.0, best_pos.1)] += grad_y[(i, ci, oy, ox)];
                    }
                }
            }
        }
        grad_in
    }
}

/// RMSprop with keyed state: s = rho s + (1 - rho) g^2; p -= lr g / (sqrt(s) + eps).
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    state: HashMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64) -> Self {
        RmsProp {
            learning_rate,
            rho,
            epsilon,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        let state = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), s) in param.iter_mut().zip(grad).zip(state.iter_mut()) {
            *s = self.rho * *s + (1.0 - self.rho) * g * g;
            *p -= self.learning_rate * g / (s.sqrt() + self.epsilon);
        }
    }
}

/// Writes named tensors in a simple little-endian container.
pub fn write_tensors(path: &Path, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(b"CTW1");
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        for &v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Named tensors as loaded from a container: dims plus flat data.
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f64>)>;

/// Reads the container written by `write_tensors`.
pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    if data.len() < 8 || &data[..4] != b"CTW1" {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let mut pos = 4;
    let read_u32 = |data: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > data.len() {
            return Err(bad("truncated container"));
        }
        let v = u32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let count = read_u32(&data, &mut pos)?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        if pos + 2 > data.len() {
            return Err(bad("truncated container"));
        }
        let name_len = u16::from_le_bytes(data[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len + 1 > data.len() {
            return Err(bad("truncated container"));
        }
        let name = String::from_utf8(data[pos..pos + name_len].to_vec())
            .map_err(|_| bad("tensor name is not utf-8"))?;
        pos += name_len;
        let ndim = data[pos] as usize;
        pos += 1;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&data, &mut pos)? as usize);
        }
        let len: usize = dims.iter().product();
        if pos + len * 8 > data.len() {
            return Err(bad("truncated tensor data"));
        }
        let mut values = Vec::with_capacity(len);
        for j in 0..len {
            values.push(f64::from_le_bytes(
                data[pos + j * 8..pos + j * 8 + 8].try_into().unwrap(),
            ));
        }
        pos += len * 8;
        tensors.insert(name, (dims, values));
    }
    Ok(tensors)
}
