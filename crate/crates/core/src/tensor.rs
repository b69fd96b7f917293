//! Dense NCHW tensors and the explicit forward/backward kernels the models
//! are composed from.
//!
//! Every kernel is a pure function: inputs are borrowed, outputs are fresh
//! tensors. Values are stored and accumulated in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid configuration: {detail}")]
    InvalidSpec { op: &'static str, detail: String },
}

pub type Result<T> = core::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidSpec { op, detail }
}

/// Row-major dense array. Feature maps are `(N, C, H, W)`, descriptors
/// `(N, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(mismatch(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(mismatch(
                "Tensor::reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(mismatch(op, format!("expected NCHW, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, c] => Ok((n, c)),
            _ => Err(mismatch(op, format!("expected (N, C), got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds `other` elementwise in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("Tensor::add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertion above covers every index reachable with
    // these strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// 2D convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, no bias, one group.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ConvSpec";
        if self.groups == 0 {
            return Err(invalid(OP, "groups must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid(OP, "channel counts must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(invalid(
                OP,
                format!(
                    "groups {} must divide in_channels {} and out_channels {}",
                    self.groups, self.in_channels, self.out_channels
                ),
            ));
        }
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(invalid(OP, "stride and kernel taps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    /// `floor((H + 2p - k) / s) + 1` per spatial axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(mismatch(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {}x{}", ph, pw, self.kernel_h, self.kernel_w),
            ));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_check(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvGeometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4("conv2d")?;
    if c != spec.in_channels {
        return Err(mismatch(
            "conv2d",
            format!("input has {} channels, spec expects {}", c, spec.in_channels),
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(mismatch(
            "conv2d",
            format!("weights {:?}, expected {:?}", weights.shape(), spec.weight_shape()),
        ));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(ConvGeometry {
        n,
        h,
        w,
        ho,
        wo,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
    })
}

/// Unfolds one group of one sample into a `(cin_g * kh * kw) x (ho * wo)` matrix.
fn im2col(x: &[f64], geo: &ConvGeometry, spec: &ConvSpec, col: &mut [f64]) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane = geo.ho * geo.wo;
    for ci in 0..geo.cin_g {
        let xc = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..geo.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let out_row = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *o = if ix < 0 || ix >= geo.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im(col: &[f64], geo: &ConvGeometry, spec: &ConvSpec, dx: &mut [f64]) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane = geo.ho * geo.wo;
    for ci in 0..geo.cin_g {
        let xc = &mut dx[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..geo.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for ox in 0..geo.wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[ix as usize] += src[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(input: &Tensor, weights: &Tensor, spec: &ConvSpec, geo: &ConvGeometry, out: &mut [f64]) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let c = spec.in_channels;
    for b in 0..geo.n {
        for ch in 0..c {
            let x = &input.data()[((b * c + ch) * geo.h) * geo.w..((b * c + ch + 1) * geo.h) * geo.w];
            let wk = &weights.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let y = &mut out[(b * c + ch) * geo.ho * geo.wo..(b * c + ch + 1) * geo.ho * geo.wo];
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                acc += wk[ky * kw + kx] * x[iy as usize * geo.w + ix as usize];
                            }
                        }
                    }
                    y[oy * geo.wo + ox] += acc;
                }
            }
        }
    }
}

fn depthwise_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    geo: &ConvGeometry,
    upstream: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let c = spec.in_channels;
    for b in 0..geo.n {
        for ch in 0..c {
            let base = (b * c + ch) * geo.h * geo.w;
            let x = &input.data()[base..base + geo.h * geo.w];
            let gx = &mut dx[base..base + geo.h * geo.w];
            let wk = &weights.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let gw = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
            let dy = &upstream[(b * c + ch) * geo.ho * geo.wo..(b * c + ch + 1) * geo.ho * geo.wo];
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let g = dy[oy * geo.wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                let xi = iy as usize * geo.w + ix as usize;
                                gw[ky * kw + kx] += g * x[xi];
                                gx[xi] += g * wk[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2D cross-correlation. `weights` is `(Cout, Cin/groups, kh, kw)`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let geo = conv_check(input, weights, spec)?;
    if spec.has_bias != bias.is_some() {
        return Err(mismatch("conv2d", "bias presence disagrees with spec.has_bias".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(mismatch("conv2d", format!("bias {:?}, expected [{}]", b.shape(), spec.out_channels)));
        }
    }
    let plane = geo.ho * geo.wo;
    let mut out = vec![0.0; geo.n * spec.out_channels * plane];

    if spec.is_depthwise() {
        depthwise_forward(input, weights, spec, &geo, &mut out);
    } else {
        let k = geo.cin_g * spec.kernel_h * spec.kernel_w;
        let mut col = if spec.is_pointwise() { Vec::new() } else { vec![0.0; k * plane] };
        let in_sample = spec.in_channels * geo.h * geo.w;
        for b in 0..geo.n {
            for g in 0..spec.groups {
                let x = &input.data()[b * in_sample + g * geo.cin_g * geo.h * geo.w..][..geo.cin_g * geo.h * geo.w];
                let cols: &[f64] = if spec.is_pointwise() {
                    x
                } else {
                    im2col(x, &geo, spec, &mut col);
                    &col
                };
                let wg = &weights.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
                let y = &mut out[(b * spec.out_channels + g * geo.cout_g) * plane..][..geo.cout_g * plane];
                gemm(geo.cout_g, k, plane, wg, false, cols, false, y, false);
            }
        }
    }

    if let Some(bias) = bias {
        for b in 0..geo.n {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * spec.out_channels + co) * plane..][..plane] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[geo.n, spec.out_channels, geo.ho, geo.wo], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, spec: &ConvSpec, upstream: &Tensor) -> Result<ConvGrads> {
    let geo = conv_check(input, weights, spec)?;
    let expected = [geo.n, spec.out_channels, geo.ho, geo.wo];
    if upstream.shape() != expected {
        return Err(mismatch(
            "conv2d_backward",
            format!("upstream {:?}, expected {:?}", upstream.shape(), expected),
        ));
    }
    let plane = geo.ho * geo.wo;
    let mut dx = vec![0.0; input.len()];
    let mut dw = vec![0.0; weights.len()];

    if spec.is_depthwise() {
        depthwise_backward(input, weights, spec, &geo, upstream.data(), &mut dx, &mut dw);
    } else {
        let k = geo.cin_g * spec.kernel_h * spec.kernel_w;
        let pointwise = spec.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; k * plane] };
        let mut dcol = vec![0.0; k * plane];
        let in_sample = spec.in_channels * geo.h * geo.w;
        let group_in = geo.cin_g * geo.h * geo.w;
        for b in 0..geo.n {
            for g in 0..spec.groups {
                let x_off = b * in_sample + g * group_in;
                let x = &input.data()[x_off..x_off + group_in];
                let cols: &[f64] = if pointwise {
                    x
                } else {
                    im2col(x, &geo, spec, &mut col);
                    &col
                };
                let dy = &upstream.data()[(b * spec.out_channels + g * geo.cout_g) * plane..][..geo.cout_g * plane];
                let wg = &weights.data()[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
                let dwg = &mut dw[g * geo.cout_g * k..(g + 1) * geo.cout_g * k];
                // dW_g += dY_g * cols^T
                gemm(geo.cout_g, plane, k, dy, false, cols, true, dwg, true);
                // dcols = W_g^T * dY_g
                gemm(k, geo.cout_g, plane, wg, true, dy, false, &mut dcol, false);
                let dxg = &mut dx[x_off..x_off + group_in];
                if pointwise {
                    for (d, s) in dxg.iter_mut().zip(&dcol) {
                        *d += s;
                    }
                } else {
                    col2im(&dcol, &geo, spec, dxg);
                }
            }
        }
    }

    let bias = spec.has_bias.then(|| {
        let mut db = vec![0.0; spec.out_channels];
        for b in 0..geo.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += upstream.data()[(b * spec.out_channels + co) * plane..][..plane].iter().sum::<f64>();
            }
        }
        Tensor::new(&[spec.out_channels], db).expect("bias length")
    });

    Ok(ConvGrads {
        input: Tensor::new(input.shape(), dx)?,
        weights: Tensor::new(weights.shape(), dw)?,
        bias,
    })
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn bn_check(op: &'static str, input: &Tensor, per_channel: &[&Tensor], epsilon: f64) -> Result<(usize, usize, usize)> {
    if !(epsilon > 0.0) {
        return Err(invalid(op, format!("epsilon must be positive, got {epsilon}")));
    }
    let (n, c, h, w) = input.dims4(op)?;
    for t in per_channel {
        if t.shape() != [c] {
            return Err(mismatch(op, format!("per-channel tensor {:?}, expected [{}]", t.shape(), c)));
        }
    }
    Ok((n, c, h * w))
}

fn channel_stats(input: &Tensor, n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += input.data()[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            for &x in &input.data()[(b * c + ch) * hw..][..hw] {
                v += (x - m) * (x - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Training mode normalizes with biased batch statistics and folds the
/// unbiased variance into the running estimate; eval mode uses the running
/// estimates only.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    training: bool,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let (n, c, hw) = bn_check("batchnorm", input, &[gamma, beta, running_mean, running_var], epsilon)?;
    let (mean, var) = if training {
        let (mean, var) = channel_stats(input, n, c, hw);
        let count = n * hw;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for ch in 0..c {
            let rm = &mut running_mean.data_mut()[ch];
            *rm = (1.0 - momentum) * *rm + momentum * mean[ch];
            let rv = &mut running_var.data_mut()[ch];
            *rv = (1.0 - momentum) * *rv + momentum * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let inv = 1.0 / libm::sqrt(var[ch] + epsilon);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (o, &x) in out[off..off + hw].iter_mut().zip(&input.data()[off..off + hw]) {
                *o = g * (x - mean[ch]) * inv + bt;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_backward(
    input: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    epsilon: f64,
    upstream: &Tensor,
) -> Result<BatchNormGrads> {
    let (n, c, hw) = bn_check("batchnorm_backward", input, &[gamma, running_mean, running_var], epsilon)?;
    same_shape("batchnorm_backward", input, upstream)?;
    let (mean, var) = if training {
        channel_stats(input, n, c, hw)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let count = (n * hw) as f64;
    let mut dx = vec![0.0; input.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / libm::sqrt(var[ch] + epsilon);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dy = upstream.data()[i];
                sum_dy += dy;
                sum_dy_xhat += dy * (input.data()[i] - mean[ch]) * inv;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma.data()[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dy = upstream.data()[i];
                dx[i] = if training {
                    let xhat = (input.data()[i] - mean[ch]) * inv;
                    g * inv * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * inv * dy
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(input.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gradient is taken as zero at the kink.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", input, upstream)?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn relu6_forward(input: &Tensor) -> Tensor {
    input.map(|x| x.clamp(0.0, 6.0))
}

pub fn relu6_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("relu6_backward", input, upstream)?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    input.map(sigmoid)
}

/// Takes the forward *output* `s`: `ds = s (1 - s) * upstream`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_backward", output, upstream)?;
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| s * (1.0 - s) * g)
        .collect();
    Tensor::new(output.shape(), data)
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pooling and channel ops
// ---------------------------------------------------------------------------

/// Per-channel spatial mean, `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(mismatch("global_avg_pool", "empty spatial dims".into()));
    }
    let data = input.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(mismatch("global_avg_pool_backward", format!("input shape {:?}", input_shape)));
    };
    if upstream.shape() != [n, c] {
        return Err(mismatch(
            "global_avg_pool_backward",
            format!("upstream {:?}, expected [{}, {}]", upstream.shape(), n, c),
        ));
    }
    let hw = h * w;
    let scale = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(n * c * hw);
    for &g in upstream.data() {
        out.extend(core::iter::repeat(g * scale).take(hw));
    }
    Tensor::new(input_shape, out)
}

/// `x~ = s ⊙ x` broadcast over each channel's spatial plane.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("channel_scale")?;
    if s.shape() != [n, c] {
        return Err(mismatch("channel_scale", format!("scales {:?}, expected [{}, {}]", s.shape(), n, c)));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (plane, &sv) in out.chunks_exact_mut(hw.max(1)).zip(s.data()) {
        for v in plane {
            *v *= sv;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(grad_x, grad_s)`.
pub fn channel_scale_backward(x: &Tensor, s: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape("channel_scale_backward", x, upstream)?;
    let (n, c, h, w) = x.dims4("channel_scale_backward")?;
    if s.shape() != [n, c] {
        return Err(mismatch("channel_scale_backward", format!("scales {:?}", s.shape())));
    }
    let hw = (h * w).max(1);
    let gx = channel_scale(upstream, s)?;
    let gs = x
        .data()
        .chunks_exact(hw)
        .zip(upstream.data().chunks_exact(hw))
        .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
        .collect();
    Ok((gx, Tensor::new(&[n, c], gs)?))
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

fn linear_check(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, cin) = input.dims2("linear")?;
    let (cout, wcin) = weights.dims2("linear")?;
    if wcin != cin {
        return Err(mismatch("linear", format!("input width {} vs weight width {}", cin, wcin)));
    }
    Ok((n, cin, cout))
}

/// `y = x W^T + b`, `W` is `(Cout, Cin)`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, cin, cout) = linear_check(input, weights)?;
    let mut out = vec![0.0; n * cout];
    gemm(n, cin, cout, input.data(), false, weights.data(), true, &mut out, false);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(mismatch("linear", format!("bias {:?}, expected [{}]", b.shape(), cout)));
        }
        for row in out.chunks_exact_mut(cout) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(&[n, cout], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LinearGrads> {
    let (n, cin, cout) = linear_check(input, weights)?;
    if upstream.shape() != [n, cout] {
        return Err(mismatch("linear_backward", format!("upstream {:?}, expected [{}, {}]", upstream.shape(), n, cout)));
    }
    let mut dx = vec![0.0; n * cin];
    gemm(n, cout, cin, upstream.data(), false, weights.data(), false, &mut dx, false);
    let mut dw = vec![0.0; cout * cin];
    gemm(cout, n, cin, upstream.data(), true, input.data(), false, &mut dw, false);
    let mut db = vec![0.0; cout];
    for row in upstream.data().chunks_exact(cout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, cin], dx)?,
        weights: Tensor::new(&[cout, cin], dw)?,
        bias: Tensor::new(&[cout], db)?,
    })
}

// ---------------------------------------------------------------------------
// 1D convolution over the channel descriptor
// ---------------------------------------------------------------------------

struct Conv1dGeometry {
    n: usize,
    c: usize,
    k: usize,
    segment: usize,
    per_group: bool,
}

fn conv1d_check(input: &Tensor, taps: &Tensor, groups: usize) -> Result<Conv1dGeometry> {
    const OP: &str = "grouped_conv1d";
    let (n, c) = input.dims2(OP)?;
    if groups == 0 {
        return Err(invalid(OP, "groups must be at least 1".into()));
    }
    let (k, per_group) = match taps.shape()[..] {
        [k] => (k, false),
        [g, k] if g == groups => (k, true),
        _ => {
            return Err(mismatch(
                OP,
                format!("taps {:?}, expected [k] or [{}, k]", taps.shape(), groups),
            ))
        }
    };
    if k % 2 == 0 {
        return Err(invalid(OP, format!("kernel size must be odd, got {k}")));
    }
    if c % groups != 0 {
        return Err(invalid(OP, format!("{c} channels not divisible by {groups} groups")));
    }
    Ok(Conv1dGeometry {
        n,
        c,
        k,
        segment: c / groups,
        per_group,
    })
}

/// Same-padded (zero) 1D cross-correlation along the channel axis of an
/// `(N, C)` descriptor. The `C` channels are split into `groups` contiguous
/// segments and taps never reach across a segment boundary.
///
/// `taps` is either `[k]` (one filter shared by every segment) or
/// `[groups, k]` (one filter per segment).
pub fn grouped_conv1d(input: &Tensor, taps: &Tensor, groups: usize) -> Result<Tensor> {
    let geo = conv1d_check(input, taps, groups)?;
    let half = (geo.k / 2) as isize;
    let mut out = vec![0.0; geo.n * geo.c];
    for b in 0..geo.n {
        let z = &input.data()[b * geo.c..(b + 1) * geo.c];
        let y = &mut out[b * geo.c..(b + 1) * geo.c];
        for (ch, o) in y.iter_mut().enumerate() {
            let seg = ch / geo.segment;
            let lo = (seg * geo.segment) as isize;
            let hi = lo + geo.segment as isize;
            let w = if geo.per_group {
                &taps.data()[seg * geo.k..(seg + 1) * geo.k]
            } else {
                taps.data()
            };
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let src = ch as isize + j as isize - half;
                if src >= lo && src < hi {
                    acc += wj * z[src as usize];
                }
            }
            *o = acc;
        }
    }
    Tensor::new(&[geo.n, geo.c], out)
}

/// Returns `(grad_input, grad_taps)`.
pub fn grouped_conv1d_backward(input: &Tensor, taps: &Tensor, groups: usize, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let geo = conv1d_check(input, taps, groups)?;
    same_shape("grouped_conv1d_backward", input, upstream)?;
    let half = (geo.k / 2) as isize;
    let mut dx = vec![0.0; input.len()];
    let mut dtaps = vec![0.0; taps.len()];
    for b in 0..geo.n {
        let z = &input.data()[b * geo.c..(b + 1) * geo.c];
        let dy = &upstream.data()[b * geo.c..(b + 1) * geo.c];
        let dz = &mut dx[b * geo.c..(b + 1) * geo.c];
        for ch in 0..geo.c {
            let seg = ch / geo.segment;
            let lo = (seg * geo.segment) as isize;
            let hi = lo + geo.segment as isize;
            let off = if geo.per_group { seg * geo.k } else { 0 };
            for j in 0..geo.k {
                let src = ch as isize + j as isize - half;
                if src >= lo && src < hi {
                    dtaps[off + j] += dy[ch] * z[src as usize];
                    dz[src as usize] += dy[ch] * taps.data()[off + j];
                }
            }
        }
    }
    Ok((Tensor::new(input.shape(), dx)?, Tensor::new(taps.shape(), dtaps)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_conv_center_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, &ConvSpec::square(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn single_element_conv_is_product() {
        let x = Tensor::new(&[1, 1, 1, 1], alloc::vec![3.5]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], alloc::vec![-2.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, &ConvSpec::square(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[-7.0]);
        let g = conv2d_backward(&x, &w, &ConvSpec::square(1, 1, 1, 1, 0), &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.weights.data(), &[3.5]);
        assert_eq!(g.input.data(), &[-2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = ConvSpec::square(2, 3, 3, 2, 1).with_bias(true);
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&spec.weight_shape(), |i| (i as f64 * 0.11).cos());
        let up = Tensor::zeros(&[2, 3, 3, 3]);
        let g = conv2d_backward(&x, &w, &spec, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, &ConvSpec::square(2, 4, 3, 1, 1)),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let spec = ConvSpec::square(3, 4, 3, 1, 1).with_groups(2);
        assert!(matches!(
            conv2d_forward(&x, &w, None, &spec),
            Err(TensorError::InvalidSpec { .. })
        ));
        let up = Tensor::zeros(&[1, 4, 3, 3]);
        assert!(conv2d_backward(&x, &w, &ConvSpec::square(3, 4, 3, 1, 1), &up).is_err());
    }

    #[test]
    fn output_shape_formula() {
        let spec = ConvSpec::square(8, 8, 3, 2, 1);
        assert_eq!(spec.output_hw(32, 32).unwrap(), (16, 16));
        assert_eq!(spec.output_hw(7, 5).unwrap(), (4, 3));
        let one = ConvSpec::square(8, 8, 1, 2, 0);
        assert_eq!(one.output_hw(32, 32).unwrap(), (16, 16));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 10.0);
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::full(&[3], 1.0);
        let y = batchnorm_forward(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            &mut rm,
            &mut rv,
            false,
            BN_MOMENTUM,
            BN_EPSILON,
        )
        .unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-5 + 1e-12);
        }
    }

    #[test]
    fn batchnorm_constant_channel_outputs_beta() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.2);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let beta = Tensor::full(&[1], 0.7);
        let y = batchnorm_forward(&x, &Tensor::full(&[1], 2.0), &beta, &mut rm, &mut rv, true, BN_MOMENTUM, BN_EPSILON)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!((rm.data()[0] - 0.42).abs() < 1e-12);
        assert!((rv.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_nonpositive_epsilon() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let one = Tensor::full(&[1], 1.0);
        assert!(batchnorm_forward(&x, &one, &one, &mut rm, &mut rv, false, 0.1, 0.0).is_err());
        assert!(batchnorm_forward(&x, &one, &one, &mut rm, &mut rv, false, 0.1, -1.0).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let x = Tensor::new(&[3], alloc::vec![7.3, -1.0, 2.5]).unwrap();
        assert_eq!(relu6_forward(&x).data(), &[6.0, 0.0, 2.5]);
        assert_eq!(relu_forward(&x).data(), &[7.3, 0.0, 2.5]);
        let s = sigmoid_forward(&Tensor::zeros(&[1]));
        let g = sigmoid_backward(&s, &Tensor::full(&[1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }

    #[test]
    fn gap_values() {
        let x = Tensor::new(&[1, 1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[2, 3, 4, 5], -1.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -1.25));
        assert!(global_avg_pool(&Tensor::zeros(&[1, 2, 0, 3])).is_err());
    }

    #[test]
    fn linear_identity_and_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 + 0.5);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear_forward(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap().data(), x.data());
        let ones = Tensor::full(&[1, 7], 1.0);
        let y = linear_forward(&Tensor::full(&[1, 7], 1.0), &ones, None).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert!(linear_forward(&x, &Tensor::zeros(&[2, 4]), None).is_err());
    }

    #[test]
    fn conv1d_identity_filters() {
        let x = Tensor::from_fn(&[2, 8], |i| (i as f64).sin());
        for g in [1, 2, 4, 8] {
            let y = grouped_conv1d(&x, &Tensor::full(&[1], 1.0), g).unwrap();
            assert_eq!(y, x);
        }
        let delta = Tensor::new(&[3], alloc::vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(grouped_conv1d(&x, &delta, 1).unwrap(), x);
    }

    #[test]
    fn conv1d_rejects_even_kernel_and_bad_groups() {
        let x = Tensor::zeros(&[1, 6]);
        assert!(grouped_conv1d(&x, &Tensor::zeros(&[2]), 1).is_err());
        assert!(grouped_conv1d(&x, &Tensor::zeros(&[3]), 4).is_err());
        assert!(grouped_conv1d(&x, &Tensor::zeros(&[3]), 0).is_err());
    }

    #[test]
    fn channel_scale_trivial_cases() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        assert_eq!(channel_scale(&x, &Tensor::full(&[2, 3], 1.0)).unwrap(), x);
        assert!(channel_scale(&x, &Tensor::zeros(&[2, 3])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(channel_scale(&x, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(&[2, 3], alloc::vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], alloc::vec![0.0; 6]).is_ok());
    }
}
