//! Reference CPU kernels for the supported operator set. Batch-first NCHW.

use rayon::prelude::*;

use super::tensor::Tensor;
use super::RuntimeError;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Window {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    /// top, left, bottom, right
    pub pads: [usize; 4],
    pub dilations: [usize; 2],
}

impl Window {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize), RuntimeError> {
        let span_h = self.dilations[0] * (self.kernel[0] - 1) + 1;
        let span_w = self.dilations[1] * (self.kernel[1] - 1) + 1;
        let ph = h + self.pads[0] + self.pads[2];
        let pw = w + self.pads[1] + self.pads[3];
        if ph < span_h || pw < span_w {
            return Err(RuntimeError::new("window larger than padded input"));
        }
        Ok((
            (ph - span_h) / self.strides[0] + 1,
            (pw - span_w) / self.strides[1] + 1,
        ))
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], RuntimeError> {
    match t.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(RuntimeError::new(format!(
            "{what} expects rank-4 input, got {s:?}"
        ))),
    }
}

pub(crate) fn conv(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    window: &Window,
    group: usize,
) -> Result<Tensor, RuntimeError> {
    let [n, c, h, w] = dims4(x, "Conv")?;
    let [m, cg, kh, kw] = dims4(weight, "Conv weight")?;
    if group == 0 || c != cg * group || m % group != 0 {
        return Err(RuntimeError::new(format!(
            "Conv channel mismatch: input {c}, weight {m}x{cg}, group {group}"
        )));
    }
    if [kh, kw] != window.kernel {
        return Err(RuntimeError::new("Conv kernel_shape disagrees with weight"));
    }
    let bias = match bias {
        Some(b) if b.len() != m => return Err(RuntimeError::new("Conv bias length mismatch")),
        Some(b) => Some(b.floats()?),
        None => None,
    };
    let (oh, ow) = window.out_dims(h, w)?;
    let xs = x.floats()?;
    let ws = weight.floats()?;
    let m_per_group = m / group;
    let mut out = vec![0.0f32; n * m * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, oc) = (idx / m, idx % m);
            let g = oc / m_per_group;
            if let Some(bias) = bias {
                plane.fill(bias[oc]);
            }
            for icg in 0..cg {
                let ic = g * cg + icg;
                let src = &xs[((b * c + ic) * h) * w..((b * c + ic + 1) * h) * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[((oc * cg + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = (ky * window.dilations[0]) as isize - window.pads[0] as isize;
                        let dx = (kx * window.dilations[1]) as isize - window.pads[1] as isize;
                        for oy in 0..oh {
                            let iy = (oy * window.strides[0]) as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * window.strides[1]) as isize + dx;
                                if ix >= 0 && ix < w as isize {
                                    *d += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::float(vec![n, m, oh, ow], out)
}

pub(crate) fn pool(
    x: &Tensor,
    window: &Window,
    max: bool,
    count_include_pad: bool,
) -> Result<Tensor, RuntimeError> {
    let [n, c, h, w] = dims4(x, "Pool")?;
    let (oh, ow) = window.out_dims(h, w)?;
    let xs = x.floats()?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let src = &xs[idx * h * w..(idx + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                    let mut count = 0usize;
                    for ky in 0..window.kernel[0] {
                        let iy = (oy * window.strides[0] + ky * window.dilations[0]) as isize
                            - window.pads[0] as isize;
                        for kx in 0..window.kernel[1] {
                            let ix = (ox * window.strides[1] + kx * window.dilations[1]) as isize
                                - window.pads[1] as isize;
                            let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                            if inside {
                                let v = src[iy as usize * w + ix as usize];
                                if max {
                                    acc = acc.max(v);
                                } else {
                                    acc += v;
                                }
                                count += 1;
                            } else if count_include_pad {
                                count += 1;
                            }
                        }
                    }
                    plane[oy * ow + ox] = if max { acc } else { acc / count.max(1) as f32 };
                }
            }
        });
    Tensor::float(vec![n, c, oh, ow], out)
}

pub(crate) fn global_average_pool(x: &Tensor) -> Result<Tensor, RuntimeError> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(RuntimeError::new("GlobalAveragePool expects rank >= 3"));
    }
    let spatial: usize = shape[2..].iter().product();
    let xs = x.floats()?;
    let data = xs
        .chunks(spatial.max(1))
        .map(|ch| ch.iter().sum::<f32>() / spatial.max(1) as f32)
        .collect();
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend(std::iter::repeat_n(1, shape.len() - 2));
    Tensor::float(out_shape, data)
}

pub(crate) fn batch_norm(
    x: &Tensor,
    scale: &Tensor,
    bias: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) -> Result<Tensor, RuntimeError> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(RuntimeError::new("BatchNormalization expects rank >= 2"));
    }
    let c = shape[1];
    let (s, b, mu, v) = (
        scale.floats()?,
        bias.floats()?,
        mean.floats()?,
        var.floats()?,
    );
    if [s.len(), b.len(), mu.len(), v.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(RuntimeError::new(
            "BatchNormalization parameter length mismatch",
        ));
    }
    let inner: usize = shape[2..].iter().product();
    let mut data = x.floats()?.to_vec();
    for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
        let ch = i % c;
        let k = s[ch] / (v[ch] + epsilon).sqrt();
        let off = b[ch] - mu[ch] * k;
        for val in chunk {
            *val = *val * k + off;
        }
    }
    Tensor::float(shape.to_vec(), data)
}

pub(crate) fn relu(x: &Tensor) -> Result<Tensor, RuntimeError> {
    let data = x.floats()?.iter().map(|v| v.max(0.0)).collect();
    Tensor::float(x.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor, RuntimeError> {
    let data = x
        .floats()?
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    Tensor::float(x.shape().to_vec(), data)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, RuntimeError> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(RuntimeError::new(format!(
                "cannot broadcast {a:?} with {b:?}"
            ))),
        })
        .collect()
}

fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut padded = vec![1; rank - shape.len()];
    padded.extend_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    for _ in 0..total {
        offsets.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out[d] {
                break;
            }
            index[d] = 0;
        }
    }
    offsets
}

pub(crate) fn binary(
    a: &Tensor,
    b: &Tensor,
    f: fn(f32, f32) -> f32,
) -> Result<Tensor, RuntimeError> {
    let (xa, xb) = (a.floats()?, b.floats()?);
    if a.shape() == b.shape() {
        let data = xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::float(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(a.shape(), &out);
    let ob = broadcast_offsets(b.shape(), &out);
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(xa[i], xb[j])).collect();
    Tensor::float(out, data)
}

pub(crate) fn flatten(x: &Tensor, axis: i64) -> Result<Tensor, RuntimeError> {
    let shape = x.shape();
    let rank = shape.len() as i64;
    let axis = if axis < 0 { axis + rank } else { axis };
    if !(0..=rank).contains(&axis) {
        return Err(RuntimeError::new("Flatten axis out of range"));
    }
    let outer: usize = shape[..axis as usize].iter().product();
    let inner: usize = shape[axis as usize..].iter().product();
    x.reshaped(vec![outer, inner])
}

pub(crate) fn reshape(x: &Tensor, target: &[i64]) -> Result<Tensor, RuntimeError> {
    let shape = x.shape();
    let total: usize = shape.iter().product();
    let mut dims = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, &d) in target.iter().enumerate() {
        match d {
            0 => dims.push(
                *shape
                    .get(i)
                    .ok_or_else(|| RuntimeError::new("Reshape 0 past input rank"))?,
            ),
            -1 if infer.is_none() => {
                infer = Some(i);
                dims.push(1);
            }
            d if d > 0 => dims.push(d as usize),
            _ => {
                return Err(RuntimeError::new(format!(
                    "invalid Reshape target {target:?}"
                )))
            }
        }
    }
    if let Some(i) = infer {
        let known: usize = dims.iter().product();
        if known == 0 || !total.is_multiple_of(known) {
            return Err(RuntimeError::new("Reshape cannot infer dimension"));
        }
        dims[i] = total / known;
    }
    x.reshaped(dims)
}

fn matrix(t: &Tensor, transpose: bool) -> Result<(usize, usize, Vec<f32>), RuntimeError> {
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        s => return Err(RuntimeError::new(format!("expected a matrix, got {s:?}"))),
    };
    let data = t.floats()?;
    if !transpose {
        return Ok((r, c, data.to_vec()));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Ok((c, r, out))
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, RuntimeError> {
    let (m, k, xa) = matrix(a, false)?;
    let (k2, n, xb) = matrix(b, false)?;
    if k != k2 {
        return Err(RuntimeError::new(format!("MatMul inner dims {k} vs {k2}")));
    }
    Tensor::float(vec![m, n], matmul_raw(&xa, &xb, m, k, n))
}

pub(crate) struct GemmAttrs {
    pub alpha: f32,
    pub beta: f32,
    pub trans_a: bool,
    pub trans_b: bool,
}

pub(crate) fn gemm(
    a: &Tensor,
    b: &Tensor,
    c: Option<&Tensor>,
    attrs: &GemmAttrs,
) -> Result<Tensor, RuntimeError> {
    let (m, k, xa) = matrix(a, attrs.trans_a)?;
    let (k2, n, xb) = matrix(b, attrs.trans_b)?;
    if k != k2 {
        return Err(RuntimeError::new(format!("Gemm inner dims {k} vs {k2}")));
    }
    let mut y: Vec<f32> = matmul_raw(&xa, &xb, m, k, n)
        .into_iter()
        .map(|v| v * attrs.alpha)
        .collect();
    if let Some(c) = c {
        let offsets = broadcast_offsets(c.shape(), &[m, n]);
        broadcast_shape(c.shape(), &[m, n])?;
        let xc = c.floats()?;
        for (v, &o) in y.iter_mut().zip(&offsets) {
            *v += attrs.beta * xc[o];
        }
    }
    Tensor::float(vec![m, n], y)
}

pub(crate) fn softmax(x: &Tensor, axis: i64) -> Result<Tensor, RuntimeError> {
    let shape = x.shape();
    let rank = shape.len() as i64;
    let axis = if axis < 0 { axis + rank } else { axis };
    if !(0..rank).contains(&axis) {
        return Err(RuntimeError::new("Softmax axis out of range"));
    }
    let axis = axis as usize;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = x.floats()?.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[idx(j)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
    Tensor::float(shape.to_vec(), data)
}
