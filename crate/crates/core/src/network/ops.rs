//! CPU kernels for channels-last (NHWC) convolution and batch normalisation,
//! exposed to candle as custom ops with hand-written backward passes.

use std::sync::{Arc, Mutex};

use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType,
};

/// Geometry of a square-kernel sliding window over an NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(col_offset, src_offset)` for every in-bounds tap; offsets are
    /// element offsets of a `channels`-long run.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow, row) = (self.out_height(), self.out_width(), self.row_len());
        let (k, c) = (self.kernel, self.channels);
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((b * oh + oy) * ow + ox) * row;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(base + (ky * k + kx) * c, src);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], w: Window) -> Vec<T> {
    let c = w.channels;
    let mut dst = vec![T::zero(); w.batch * w.out_height() * w.out_width() * w.row_len()];
    w.for_each_tap(|d, s| dst[d..d + c].copy_from_slice(&src[s..s + c]));
    dst
}

fn col2im<T: WithDType>(src: &[T], w: Window) -> Vec<T> {
    let c = w.channels;
    let mut dst = vec![T::zero(); w.batch * w.height * w.width * c];
    w.for_each_tap(|d, s| {
        for (o, &i) in dst[s..s + c].iter_mut().zip(&src[d..d + c]) {
            *o += i;
        }
    });
    dst
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("custom op expects a contiguous input"),
    }
}

/// Unfolds sliding windows: `[B, H, W, C]` to `[B * OH * OW, K * K * C]`.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatters window rows back, summing overlaps.
struct Col2Im(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let w = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l)?, w)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l)?, w)),
            _ => bail!("im2col: unsupported dtype"),
        };
        let rows = w.batch * w.out_height() * w.out_width();
        Ok((out, Shape::from((rows, w.row_len()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let w = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l)?, w)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l)?, w)),
            _ => bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((w.batch, w.height, w.width, w.channels))))
    }
}

/// Sliding-window patches of an NHWC tensor, one row per output position.
pub fn unfold(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, Window)> {
    let (batch, height, width, channels) = x.dims4()?;
    if height + 2 * padding < kernel || width + 2 * padding < kernel {
        bail!("input {height}x{width} smaller than kernel {kernel}");
    }
    let w = Window {
        batch,
        height,
        width,
        channels,
        kernel,
        stride,
        padding,
    };
    Ok((x.contiguous()?.apply_op1(Im2Col(w))?, w))
}

/// 2-D convolution of an NHWC input with a `[C_out, C_in, K, K]` weight.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c_out, c_in, k, k2) = weight.dims4()?;
    let (b, h, w, c) = x.dims4()?;
    if k != k2 {
        bail!("non-square kernel {k}x{k2}");
    }
    if c != c_in {
        bail!("conv expects {c_in} input channels, got {c}");
    }
    let wmat = weight
        .permute((0, 2, 3, 1))?
        .reshape((c_out, k * k * c_in))?
        .t()?;
    if k == 1 && stride == 1 && padding == 0 {
        let y = x.reshape((b * h * w, c))?.matmul(&wmat)?;
        return y.reshape((b, h, w, c_out));
    }
    let (cols, win) = unfold(x, k, stride, padding)?;
    cols.matmul(&wmat)?
        .reshape((b, win.out_height(), win.out_width(), c_out))
}

/// Max pooling of a non-negative NHWC input. Zero padding stands in for
/// negative infinity, which is exact when inputs are post-ReLU.
pub fn max_pool_nonneg(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (cols, win) = unfold(x, kernel, stride, padding)?;
    let rows = win.batch * win.out_height() * win.out_width();
    cols.reshape((rows, kernel * kernel, win.channels))?
        .max(1)?
        .reshape((win.batch, win.out_height(), win.out_width(), win.channels))
}

/// Per-channel batch statistics over all leading axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

fn channel_stats<T: WithDType>(x: &[T], c: usize) -> ChannelStats {
    let m = x.len() / c;
    let mut mean = vec![0f64; c];
    for row in x.chunks_exact(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut var = vec![0f64; c];
    for row in x.chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|a| *a /= m as f64);
    ChannelStats { mean, var, count: m }
}

/// Training-mode batch normalisation over the trailing channel axis, fused
/// with the affine transform. The batch statistics of the last forward call
/// are published through `stats`.
struct BatchNormTrain {
    eps: f64,
    stats: Arc<Mutex<Option<ChannelStats>>>,
}

fn bn_forward<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> (Vec<T>, ChannelStats) {
    let c = gamma.len();
    let stats = channel_stats(x, c);
    let scale: Vec<f64> = (0..c)
        .map(|i| gamma[i].to_f64() / (stats.var[i] + eps).sqrt())
        .collect();
    let shift: Vec<f64> = (0..c)
        .map(|i| beta[i].to_f64() - stats.mean[i] * scale[i])
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for i in 0..c {
            out.push(T::from_f64(row[i].to_f64() * scale[i] + shift[i]));
        }
    }
    (out, stats)
}

fn bn_backward<T: WithDType>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let stats = channel_stats(x, c);
    let m = stats.count as f64;
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut dbeta = vec![0f64; c];
    let mut dgamma = vec![0f64; c];
    for (xr, dr) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
        for i in 0..c {
            let xhat = (xr[i].to_f64() - stats.mean[i]) * inv[i];
            let d = dr[i].to_f64();
            dbeta[i] += d;
            dgamma[i] += d * xhat;
        }
    }
    let mut dx = Vec::with_capacity(x.len());
    for (xr, dr) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
        for i in 0..c {
            let xhat = (xr[i].to_f64() - stats.mean[i]) * inv[i];
            let g = gamma[i].to_f64() * inv[i];
            dx.push(T::from_f64(
                g * (dr[i].to_f64() - dbeta[i] / m - xhat * dgamma[i] / m),
            ));
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (out, stats) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                let (o, s) = bn_forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, self.eps);
                (CpuStorage::F32(o), s)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                let (o, s) = bn_forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, self.eps);
                (CpuStorage::F64(o), s)
            }
            _ => bail!("batch norm: unsupported or mixed dtypes"),
        };
        *self.stats.lock().expect("stats lock poisoned") = Some(stats);
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dev = x.device();
        let c = gamma.dim(0)?;
        macro_rules! run {
            ($t:ty) => {{
                let xv = x.flatten_all()?.to_vec1::<$t>()?;
                let gv = gamma.to_vec1::<$t>()?;
                let dyv = dy.flatten_all()?.to_vec1::<$t>()?;
                let (dx, dg, db) = bn_backward(&xv, &gv, &dyv, self.eps);
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, c, dev)?,
                    Tensor::from_vec(db, c, dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            other => bail!("batch norm backward: unsupported dtype {other:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Normalises `x` (channels last) with its own batch statistics, then applies
/// `gamma`/`beta`. Returns the output and the statistics used.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, ChannelStats)> {
    let slot = Arc::new(Mutex::new(None));
    let op = BatchNormTrain {
        eps,
        stats: slot.clone(),
    };
    let y = x.contiguous()?.apply_op3(gamma, beta, op)?;
    let stats = slot
        .lock()
        .expect("stats lock poisoned")
        .take()
        .expect("forward pass publishes statistics");
    Ok((y, stats))
}

/// Inference-mode batch normalisation with fixed statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let scale = gamma.broadcast_div(&(running_var + eps)?.sqrt()?)?;
    let shift = (beta - running_mean.mul(&scale)?)?;
    x.broadcast_mul(&scale)?.broadcast_add(&shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seeding::stream(seed, &[]);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv_matches_reference_nchw() {
        for &(k, stride, pad, h) in &[(3, 1, 1, 7), (3, 2, 1, 8), (1, 2, 0, 6), (1, 1, 0, 5), (7, 2, 3, 11)] {
            let x = randn(&[2, h, h, 3], 1);
            let wt = randn(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &wt, stride, pad).unwrap();
            let reference = x
                .permute((0, 3, 1, 2)).unwrap()
                .contiguous().unwrap()
                .conv2d(&wt, pad, stride, 1, 1).unwrap()
                .permute((0, 2, 3, 1)).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12, "k={k} s={stride}");
        }
    }

    #[test]
    fn conv_gradients_match_reference() {
        let xv = Var::from_tensor(&randn(&[2, 6, 6, 3], 3)).unwrap();
        let wv = Var::from_tensor(&randn(&[5, 3, 3, 3], 4)).unwrap();
        let probe = randn(&[2, 3, 3, 5], 5);
        let ours = conv2d(xv.as_tensor(), wv.as_tensor(), 2, 1).unwrap();
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let reference = xv
            .as_tensor()
            .permute((0, 3, 1, 2)).unwrap()
            .conv2d(wv.as_tensor(), 1, 2, 1, 1).unwrap()
            .permute((0, 2, 3, 1)).unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&xv, &wv] {
            let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
            assert!(max_abs_diff(a, b) < 1e-10);
        }
    }

    #[test]
    fn max_pool_matches_reference() {
        let x = randn(&[1, 7, 7, 2], 6).relu().unwrap();
        let ours = max_pool_nonneg(&x, 3, 2, 1).unwrap();
        let padded = x
            .permute((0, 3, 1, 2)).unwrap()
            .pad_with_zeros(2, 1, 1).unwrap()
            .pad_with_zeros(3, 1, 1).unwrap()
            .max_pool2d_with_stride(3, 2).unwrap()
            .permute((0, 2, 3, 1)).unwrap();
        assert!(max_abs_diff(&ours, &padded) < 1e-15);
    }

    fn bn_composite(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let c = x.dim(3).unwrap();
        let flat = x.reshape(((), c)).unwrap();
        let mean = flat.mean_keepdim(0).unwrap();
        let xc = flat.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim(0).unwrap();
        let y = xc.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        y.broadcast_mul(g).unwrap().broadcast_add(b).unwrap().reshape(x.shape()).unwrap()
    }

    #[test]
    fn batch_norm_matches_composite_ops() {
        let xv = Var::from_tensor(&randn(&[3, 4, 4, 5], 7)).unwrap();
        let gv = Var::from_tensor(&(randn(&[5], 8) + 1.5).unwrap()).unwrap();
        let bv = Var::from_tensor(&randn(&[5], 9)).unwrap();
        let probe = randn(&[3, 4, 4, 5], 10);
        let (ours, stats) = batch_norm_train(xv.as_tensor(), gv.as_tensor(), bv.as_tensor(), 1e-5).unwrap();
        assert_eq!(stats.count, 48);
        let reference = bn_composite(xv.as_tensor(), gv.as_tensor(), bv.as_tensor());
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&xv, &gv, &bv] {
            assert!(max_abs_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn eval_norm_uses_given_statistics() {
        let x = randn(&[1, 2, 2, 2], 11);
        let ones = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let y = batch_norm_eval(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-15);
    }
}
