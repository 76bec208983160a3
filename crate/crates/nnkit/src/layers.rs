//! Layer implementations. Every layer caches what its backward pass needs
//! during `forward`; `backward` accumulates parameter gradients and returns
//! the gradient with respect to the layer input.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    /// Connection weights of linear / convolutional layers. The only kind
    /// subject to pruning.
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Self { value, grad, kind }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Per-call forward context.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

fn expect_rank(x: &Tensor, rank: usize, who: &str) -> Result<()> {
    if x.ndim() != rank {
        return Err(NnError::Shape(format!(
            "{who} expects rank {rank}, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn to2(x: &Tensor) -> Array2<f64> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}

// ---------------------------------------------------------------------------
// im2col helpers (NCHW, zero padding)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }
}

fn im2col(x: &[f64], g: Geometry) -> Array2<f64> {
    let cols_w = g.c * g.kh * g.kw;
    let rows = g.n * g.oh * g.ow;
    let mut out = vec![0.0; rows * cols_w];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (n * g.oh + oy) * g.ow + ox;
                let base = row * cols_w;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            out[base + (c * g.kh + ky) * g.kw + kx] =
                                x[plane + iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols_w), out).expect("im2col shape")
}

fn col2im(cols: &Array2<f64>, g: Geometry) -> Vec<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let cols_w = g.c * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (n * g.oh + oy) * g.ow + ox;
                let base = row * cols_w;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            out[plane + iy as usize * g.w + ix as usize] +=
                                src[base + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[n, ch, h, w]` -> `[n*h*w, ch]`
fn nchw_to_rows(x: &Tensor) -> Array2<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = x.view().permuted_axes(IxDyn(&[0, 2, 3, 1]));
    let owned = p.as_standard_layout().into_owned();
    owned
        .into_shape_with_order((n * h * w, c))
        .expect("rows reshape")
}

/// `[n*h*w, ch]` -> `[n, ch, h, w]`
fn rows_to_nchw(rows: Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let t = rows
        .into_shape_with_order(IxDyn(&[n, h, w, c]))
        .expect("nchw reshape");
    t.permuted_axes(IxDyn(&[0, 3, 1, 2]))
        .as_standard_layout()
        .into_owned()
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Param::new(uniform(&[outputs, inputs], bound, rng), ParamKind::Weight);
        let bias = bias.then(|| Param::new(uniform(&[outputs], bound, rng), ParamKind::Bias));
        Self {
            weight,
            bias,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "linear")?;
        if x.shape()[1] != self.in_features() {
            return Err(NnError::Shape(format!(
                "linear expects {} inputs, got {}",
                self.in_features(),
                x.shape()[1]
            )));
        }
        let x2 = to2(x);
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x2.dot(&w.t());
        if let Some(b) = &self.bias {
            y += &b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        self.cache = Some(x2);
        Ok(y.into_dyn())
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("forward before backward");
        let g = to2(grad);
        let dw = g.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &g.sum_axis(Axis(0)).into_dyn();
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        g.dot(&w).into_dyn()
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Array2<f64>, Geometry)>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::new(
            uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| Param::new(uniform(&[out_ch], bound, rng), ParamKind::Bias));
        Self {
            weight,
            bias,
            stride,
            pad,
            cache: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (o, c, kh, kw) = self.dims();
        if input.len() != 3 || input[0] != c {
            return Err(NnError::Shape(format!(
                "conv expects [{c}, h, w], got {input:?}"
            )));
        }
        let oh = Geometry::conv_out(input[1], kh, self.stride, self.pad);
        let ow = Geometry::conv_out(input[2], kw, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![o, oh, ow]),
            _ => Err(NnError::Shape(format!(
                "conv kernel {kh}x{kw} does not fit input {input:?}"
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "conv2d")?;
        let s = x.shape().to_vec();
        let out = self.output_shape(&s[1..])?;
        let (o, c, kh, kw) = self.dims();
        let g = Geometry {
            n: s[0],
            c,
            h: s[2],
            w: s[3],
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            oh: out[1],
            ow: out[2],
        };
        let xs = x.as_standard_layout();
        let cols = im2col(xs.as_slice().unwrap(), g);
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let mut rows = cols.dot(&wm.t());
        if let Some(b) = &self.bias {
            rows += &b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        self.cache = Some((cols, g));
        Ok(rows_to_nchw(rows, g.n, o, g.oh, g.ow))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (cols, g) = self.cache.as_ref().expect("forward before backward");
        let (o, c, kh, kw) = self.dims();
        let g2 = nchw_to_rows(grad);
        let dw = g2.t().dot(cols);
        self.weight.grad += &dw
            .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
            .unwrap();
        if let Some(b) = &mut self.bias {
            b.grad += &g2.sum_axis(Axis(0)).into_dyn();
        }
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let dcols = g2.dot(&wm);
        let dx = col2im(&dcols, *g);
        ArrayD::from_shape_vec(IxDyn(&[g.n, g.c, g.h, g.w]), dx).unwrap()
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// `[in_ch, out_ch, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Array2<f64>, Geometry)>,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = out_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::new(
            uniform(&[in_ch, out_ch, kernel, kernel], bound, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| Param::new(uniform(&[out_ch], bound, rng), ParamKind::Bias));
        Self {
            weight,
            bias,
            stride,
            pad,
            cache: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (ci, co, kh, kw) = self.dims();
        if input.len() != 3 || input[0] != ci {
            return Err(NnError::Shape(format!(
                "conv-transpose expects [{ci}, h, w], got {input:?}"
            )));
        }
        let out = |size: usize, k: usize| -> Option<usize> {
            ((size - 1) * self.stride + k).checked_sub(2 * self.pad)
        };
        match (out(input[1], kh), out(input[2], kw)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![co, h, w]),
            _ => Err(NnError::Shape(format!(
                "conv-transpose cannot expand {input:?}"
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "conv_transpose2d")?;
        let s = x.shape().to_vec();
        let out = self.output_shape(&s[1..])?;
        let (ci, co, kh, kw) = self.dims();
        // Geometry of the adjoint convolution: output grid -> input grid.
        let g = Geometry {
            n: s[0],
            c: co,
            h: out[1],
            w: out[2],
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            oh: s[2],
            ow: s[3],
        };
        let xm = nchw_to_rows(x);
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((ci, co * kh * kw))
            .unwrap();
        let cols = xm.dot(&wm);
        let y = col2im(&cols, g);
        let mut y = ArrayD::from_shape_vec(IxDyn(&[g.n, co, g.h, g.w]), y).unwrap();
        if let Some(b) = &self.bias {
            for (ch, &bv) in b.value.iter().enumerate() {
                y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v + bv);
            }
        }
        self.cache = Some((xm, g));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xm, g) = self.cache.as_ref().expect("forward before backward");
        let (ci, co, kh, kw) = self.dims();
        let gs = grad.as_standard_layout();
        let gcols = im2col(gs.as_slice().unwrap(), *g);
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((ci, co * kh * kw))
            .unwrap();
        let dw = xm.t().dot(&gcols);
        self.weight.grad += &dw
            .into_shape_with_order(IxDyn(&[ci, co, kh, kw]))
            .unwrap();
        if let Some(b) = &mut self.bias {
            let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            b.grad += &db;
        }
        let dxm = gcols.dot(&wm.t());
        rows_to_nchw(dxm, g.n, ci, g.oh, g.ow)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(IxDyn(&[channels])), ParamKind::NormScale),
            beta: Param::new(Tensor::zeros(IxDyn(&[channels])), ParamKind::NormShift),
            running_mean: Tensor::zeros(IxDyn(&[channels])),
            running_var: Tensor::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        expect_rank(x, 4, "batchnorm2d")?;
        let c = self.channels();
        if x.shape()[1] != c {
            return Err(NnError::Shape(format!(
                "batchnorm expects {c} channels, got {:?}",
                x.shape()
            )));
        }
        let mut xhat = x.to_owned();
        let mut y = x.to_owned();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let (mean, var) = if train {
                let m = plane.len() as f64;
                let mean = plane.sum() / m;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * is);
            let xh = xhat.index_axis(Axis(1), ch);
            y.index_axis_mut(Axis(1), ch)
                .zip_mut_with(&xh, |o, &h| *o = gm * h + bt);
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train,
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let c = self.channels();
        let mut dx = grad.to_owned();
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx: f64 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let gm = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            let mut d = dx.index_axis_mut(Axis(1), ch);
            if cache.train {
                let m = g.len() as f64;
                // dxhat = g * gamma
                d.zip_mut_with(&xh, |o, &h| {
                    let gi = *o;
                    *o = gm * is / m * (m * gi - sum_g - h * sum_gx);
                });
            } else {
                d.mapv_inplace(|gi| gi * gm * is);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Pooling and shape layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        Self { size, cache: None }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[1] < self.size || input[2] < self.size {
            return Err(NnError::Shape(format!(
                "max-pool {} cannot reduce {input:?}",
                self.size
            )));
        }
        Ok(vec![input[0], input[1] / self.size, input[2] / self.size])
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "maxpool2d")?;
        let s = x.shape().to_vec();
        let out = self.output_shape(&s[1..])?;
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (out[1], out[2]);
        let k = self.size;
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + oy * k * w + ox * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * k + ky) * w + ox * k + kx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
        self.cache = Some((s, arg));
        Ok(ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), y).unwrap())
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (shape, arg) = self.cache.as_ref().expect("forward before backward");
        let mut dx = vec![0.0; shape.iter().product()];
        let gs = grad.as_standard_layout();
        for (g, &i) in gs.as_slice().unwrap().iter().zip(arg) {
            dx[i] += g;
        }
        ArrayD::from_shape_vec(IxDyn(shape), dx).unwrap()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "global_avg_pool")?;
        let s = x.shape().to_vec();
        let area = (s[2] * s[3]) as f64;
        let y = x.sum_axis(Axis(3)).sum_axis(Axis(2)) / area;
        self.cache = Some(s);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.cache.as_ref().expect("forward before backward");
        let area = (s[2] * s[3]) as f64;
        let mut dx = Tensor::zeros(IxDyn(s));
        for ((n, c), &g) in grad
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .indexed_iter()
        {
            dx.index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), c)
                .fill(g / area);
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let rest: usize = s[1..].iter().product();
        self.cache = Some(s.clone());
        Ok(x.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[s[0], rest]))
            .unwrap())
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.cache.as_ref().expect("forward before backward");
        grad.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(s))
            .unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Reshape {
    /// Per-sample target shape.
    pub target: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Self {
        Self {
            target,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let per: usize = s[1..].iter().product();
        if per != self.target.iter().product::<usize>() {
            return Err(NnError::Shape(format!(
                "cannot reshape {s:?} to per-sample {:?}",
                self.target
            )));
        }
        let mut full = vec![s[0]];
        full.extend_from_slice(&self.target);
        self.cache = Some(s);
        Ok(x.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&full))
            .unwrap())
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.cache.as_ref().expect("forward before backward");
        grad.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(s))
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Activations and dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.cache = Some(x.to_owned());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("forward before backward");
        let mut dx = grad.to_owned();
        dx.zip_mut_with(x, |g, &v| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

impl Sigmoid {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.as_ref().expect("forward before backward");
        let mut dx = grad.to_owned();
        dx.zip_mut_with(y, |g, &s| *g *= s * (1.0 - s));
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    cache: Option<Option<Tensor>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self { p, cache: None }
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut Ctx<'_>) -> Tensor {
        if !ctx.train || self.p <= 0.0 {
            self.cache = Some(None);
            return x.to_owned();
        }
        let keep = 1.0 - self.p;
        let mask = x.mapv(|_| {
            if ctx.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = x * &mask;
        self.cache = Some(Some(mask));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self.cache.as_ref().expect("forward before backward") {
            Some(mask) => grad * mask,
            None => grad.to_owned(),
        }
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
    relu: Relu,
}

impl Residual {
    /// Two 3x3 conv-bn stages with an optional 1x1 projection shortcut.
    pub fn basic(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let main = vec![
            Layer::Conv2d(Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng)),
            Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
            Layer::Relu(Relu::default()),
            Layer::Conv2d(Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng)),
            Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
        ];
        let shortcut = if stride != 1 || in_ch != out_ch {
            vec![
                Layer::Conv2d(Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng)),
                Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
            ]
        } else {
            Vec::new()
        };
        Self {
            main,
            shortcut,
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let mut a = x.to_owned();
        for l in &mut self.main {
            a = l.forward(&a, ctx)?;
        }
        let mut b = x.to_owned();
        for l in &mut self.shortcut {
            b = l.forward(&b, ctx)?;
        }
        if a.shape() != b.shape() {
            return Err(NnError::Shape(format!(
                "residual branches disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(self.relu.forward(&(a + b)))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let mut ga = g.clone();
        for l in self.main.iter_mut().rev() {
            ga = l.backward(&ga);
        }
        let mut gb = g;
        for l in self.shortcut.iter_mut().rev() {
            gb = l.backward(&gb);
        }
        ga + gb
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.main {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Layer enum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    BatchNorm2d(BatchNorm2d),
    MaxPool2d(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Reshape(Reshape),
    Relu(Relu),
    Sigmoid(Sigmoid),
    Dropout(Dropout),
    Residual(Box<Residual>),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Flatten(_) => "flatten",
            Layer::Reshape(_) => "reshape",
            Layer::Relu(_) => "relu",
            Layer::Sigmoid(_) => "sigmoid",
            Layer::Dropout(_) => "dropout",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::BatchNorm2d(l) => l.forward(x, ctx.train),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Reshape(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::Sigmoid(l) => Ok(l.forward(x)),
            Layer::Dropout(l) => Ok(l.forward(x, ctx)),
            Layer::Residual(l) => l.forward(x, ctx),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::ConvTranspose2d(l) => l.backward(grad),
            Layer::BatchNorm2d(l) => l.backward(grad),
            Layer::MaxPool2d(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Reshape(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Residual(l) => l.backward(grad),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear(l) => {
                if input.len() != 1 || input[0] != l.in_features() {
                    return Err(NnError::Shape(format!(
                        "linear expects [{}], got {input:?}",
                        l.in_features()
                    )));
                }
                Ok(vec![l.out_features()])
            }
            Layer::Conv2d(l) => l.output_shape(input),
            Layer::ConvTranspose2d(l) => l.output_shape(input),
            Layer::BatchNorm2d(l) => {
                if input.len() != 3 || input[0] != l.channels() {
                    return Err(NnError::Shape(format!(
                        "batchnorm expects {} channels, got {input:?}",
                        l.channels()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::MaxPool2d(l) => l.output_shape(input),
            Layer::GlobalAvgPool(_) => {
                if input.len() != 3 {
                    return Err(NnError::Shape(format!("avg-pool got {input:?}")));
                }
                Ok(vec![input[0]])
            }
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
            Layer::Reshape(l) => {
                if input.iter().product::<usize>() != l.target.iter().product::<usize>() {
                    return Err(NnError::Shape(format!(
                        "cannot reshape {input:?} to {:?}",
                        l.target
                    )));
                }
                Ok(l.target.clone())
            }
            Layer::Relu(_) | Layer::Sigmoid(_) | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Residual(l) => l.output_shape(input),
        }
    }

    /// Parameters of this layer, nested layers included, in depth order.
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Conv2d(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::ConvTranspose2d(l) => {
                std::iter::once(&l.weight).chain(l.bias.as_ref()).collect()
            }
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .flat_map(|l| l.params())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Conv2d(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::ConvTranspose2d(l) => std::iter::once(&mut l.weight)
                .chain(l.bias.as_mut())
                .collect(),
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .flat_map(|l| l.params_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still affects outputs (normalization statistics).
    pub fn buffers(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm2d(l) => vec![&l.running_mean, &l.running_var],
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .flat_map(|l| l.buffers())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm2d(l) => vec![&mut l.running_mean, &mut l.running_var],
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .flat_map(|l| l.buffers_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Parameter groups of the leaf layers inside this layer, shallow to deep.
    pub fn leaf_param_groups(&self) -> Vec<(&'static str, Vec<&Param>)> {
        match self {
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .flat_map(|l| l.leaf_param_groups())
                .collect(),
            other => {
                let p = other.params();
                if p.is_empty() {
                    Vec::new()
                } else {
                    vec![(other.name(), p)]
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        uniform(shape, 1.0, rng)
    }

    /// Central-difference check of input and parameter gradients for
    /// loss = sum(y * probe).
    fn check_layer(mut layer: Layer, input: &[usize], train: bool) {
        let mut r = rng();
        let x = random(input, &mut r);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(11);
        let mut ctx = Ctx {
            train,
            rng: &mut drop_rng,
        };
        let y = layer.forward(&x, &mut ctx).unwrap();
        let probe = random(y.shape(), &mut r);
        for p in layer.params_mut() {
            p.grad.fill(0.0);
        }
        let dx = layer.backward(&probe);

        let eps = 1e-6;
        let loss = |l: &mut Layer, x: &Tensor| -> f64 {
            let mut dr = ChaCha8Rng::seed_from_u64(11);
            let mut ctx = Ctx {
                train,
                rng: &mut dr,
            };
            // batchnorm running stats drift in train mode; irrelevant to output
            (l.forward(x, &mut ctx).unwrap() * &probe).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let num = (loss(&mut layer.clone(), &xp) - loss(&mut layer.clone(), &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!(
                (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                "{} input grad {i}: numeric {num} vs analytic {ana}",
                layer.name()
            );
        }
        let grads: Vec<Tensor> = layer.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.params_mut()[pi].value.as_slice_mut().unwrap()[i] += eps;
                lm.params_mut()[pi].value.as_slice_mut().unwrap()[i] -= eps;
                let num = (loss(&mut lp, &x) - loss(&mut lm, &x)) / (2.0 * eps);
                let ana = g.as_slice().unwrap()[i];
                assert!(
                    (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                    "{} param {pi}[{i}]: numeric {num} vs analytic {ana}",
                    layer.name()
                );
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check_layer(Layer::Linear(Linear::new(4, 3, true, &mut rng())), &[5, 4], true);
    }

    #[test]
    fn conv_gradients() {
        let l = Conv2d::new(2, 3, 3, 1, 1, true, &mut rng());
        check_layer(Layer::Conv2d(l), &[2, 2, 5, 5], true);
        let l = Conv2d::new(2, 2, 3, 2, 1, false, &mut rng());
        check_layer(Layer::Conv2d(l), &[2, 2, 6, 6], true);
    }

    #[test]
    fn conv_transpose_gradients() {
        let l = ConvTranspose2d::new(3, 2, 4, 2, 1, true, &mut rng());
        check_layer(Layer::ConvTranspose2d(l), &[2, 3, 2, 2], true);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let l = ConvTranspose2d::new(3, 2, 4, 2, 1, true, &mut rng());
        assert_eq!(l.output_shape(&[3, 4, 4]).unwrap(), vec![2, 8, 8]);
    }

    #[test]
    fn batchnorm_gradients_train_and_eval() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = ndarray::Array1::from_vec(vec![1.5, 0.7]).into_dyn();
        bn.beta.value = ndarray::Array1::from_vec(vec![0.1, -0.2]).into_dyn();
        check_layer(Layer::BatchNorm2d(bn.clone()), &[3, 2, 2, 2], true);
        bn.running_var = ndarray::Array1::from_vec(vec![2.0, 0.5]).into_dyn();
        check_layer(Layer::BatchNorm2d(bn), &[3, 2, 2, 2], false);
    }

    #[test]
    fn pooling_and_activation_gradients() {
        check_layer(Layer::MaxPool2d(MaxPool2d::new(2)), &[2, 2, 4, 4], true);
        check_layer(Layer::GlobalAvgPool(GlobalAvgPool::default()), &[2, 3, 3, 3], true);
        check_layer(Layer::Sigmoid(Sigmoid::default()), &[3, 4], true);
        check_layer(Layer::Relu(Relu::default()), &[3, 7], true);
        check_layer(Layer::Dropout(Dropout::new(0.3)), &[3, 7], true);
    }

    #[test]
    fn residual_gradients() {
        let r = Residual::basic(2, 3, 2, &mut rng());
        check_layer(Layer::Residual(Box::new(r)), &[3, 2, 4, 4], false);
        let r = Residual::basic(2, 2, 1, &mut rng());
        check_layer(Layer::Residual(Box::new(r)), &[3, 2, 4, 4], true);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = Geometry {
            n: 2,
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 2,
        };
        let mut r = rng();
        let x = random(&[2, 2, 5, 4], &mut r);
        let cols = im2col(x.as_slice().unwrap(), g);
        let y = uniform(cols.shape(), 1.0, &mut r)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
