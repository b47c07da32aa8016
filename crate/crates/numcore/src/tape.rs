//! Wengert tape: records forward ops, replays them in reverse for gradients.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops push a
//! node holding the output buffer plus whatever the backward rule needs
//! (input ids, strides, argmax indices, normalization caches) and return a
//! [`Var`] handle. [`Tape::backward`] seeds the scalar loss with 1 and walks
//! the nodes in reverse creation order, which is already topological because
//! an op can only reference earlier nodes.
//!
//! A tape is single-threaded by design; run independent tapes for parallel
//! work. Named parameters registered through [`Tape::param`] are deduplicated
//! so that weight sharing accumulates gradients into one buffer.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Suffix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: Var, b: Var, bcast: Broadcast },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Matmul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, k: Var, bias: Option<Var>, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, k: Var, bias: Option<Var>, stride: usize, padding: usize },
    /// `argmax` holds, per output element, the flat input index that won.
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AdaptiveMaxPool2d { x: Var, argmax: Vec<usize> },
    UpsampleNearest { x: Var, factor: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    MaskMul { x: Var, mask: Vec<f64> },
    MseVs { x: Var, target: Vec<f64>, weight: Option<Vec<f64>>, denom: f64 },
    BceProbsVs { x: Var, target: Vec<f64>, weight: Option<Vec<f64>>, denom: f64 },
    BceLogitsVs { x: Var, target: Vec<f64>, weight: Option<Vec<f64>>, denom: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    grads: Vec<Option<Vec<f64>>>,
}

const BCE_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.node(v).shape.clone(), self.node(v).data.clone())
            .expect("tape node holds a valid tensor")
    }

    /// Registers a tensor as a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Registers a tensor as a leaf; it participates in gradients when the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Registers a named parameter leaf. Binding the same name twice returns
    /// the first var, so shared weights accumulate into one gradient buffer.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Entry::Occupied(e) = self.params.entry(name.to_string()) {
            return *e.get();
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|n| (n.as_str(), self.params[n]))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn broadcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.node(b).data.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            return Ok(Broadcast::Suffix);
        }
        Err(TensorError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
    }

    fn bin(&mut self, kind: BinKind, op_name: &'static str, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_of(op_name, a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let m = db.len();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<f64> = match bcast {
            Broadcast::Same => da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Suffix => da.iter().enumerate().map(|(i, &x)| f(x, db[i % m])).collect(),
        };
        let shape = self.node(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Bin { kind, a, b, bcast }, needs))
    }

    /// Elementwise sum. The second operand may be a scalar or a suffix shape
    /// of the first, repeated along the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { context: "scale factor".to_string() });
        }
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Scale { x, c }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Relu { x }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Sigmoid { x }, needs))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, got: sa.len() });
        }
        if sb.len() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, got: sb.len() });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, kdim, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.node(a).data;
            let db = &self.node(b).data;
            for i in 0..m {
                let orow = i * n;
                for kk in 0..kdim {
                    let aik = da[i * kdim + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = kk * n;
                    for j in 0..n {
                        out[orow + j] += aik * db[brow + j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, needs))
    }

    /// Numerically stable softmax along `axis`; every lane sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let (outer, m, inner) = lane_dims(&shape, axis)?;
        let mut out = self.node(x).data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * m * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..m {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..m {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, needs))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution over `[C_in, H, W]` with a `[C_out, C_in, K, K]`
    /// kernel, square stride and zero padding. Output height is
    /// `(H + 2P - K) / S + 1` (floor), and likewise for width.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        let sk = self.node(k).shape.clone();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch { op: "conv2d", expected: 3, got: sx.len() });
        }
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                detail: format!("kernel must be [C_out, C_in, K, K], got {:?}", sk),
            });
        }
        if sk[1] != sx[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        if stride == 0 {
            return Err(TensorError::InvalidParam { op: "conv2d", detail: "stride must be >= 1".to_string() });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, ksz) = (sk[0], sk[2]);
        let oh = conv_out(h, ksz, stride, padding).ok_or_else(|| TensorError::InvalidParam {
            op: "conv2d",
            detail: format!("kernel {} does not fit input {} with padding {}", ksz, h, padding),
        })?;
        let ow = conv_out(w, ksz, stride, padding).ok_or_else(|| TensorError::InvalidParam {
            op: "conv2d",
            detail: format!("kernel {} does not fit input {} with padding {}", ksz, w, padding),
        })?;
        if let Some(b) = bias {
            let sb = &self.node(b).shape;
            if sb[..] != [cout] {
                return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: vec![cout], rhs: sb.clone() });
            }
        }
        let mut out = vec![0.0; cout * oh * ow];
        if let Some(b) = bias {
            let db = &self.node(b).data;
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow].fill(db[co]);
            }
        }
        {
            let dx = &self.node(x).data;
            let dk = &self.node(k).data;
            for co in 0..cout {
                for ci in 0..cin {
                    let kbase = (co * cin + ci) * ksz * ksz;
                    let xbase = ci * h * w;
                    for ky in 0..ksz {
                        for kx in 0..ksz {
                            let kv = dk[kbase + ky * ksz + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let orow = (co * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[orow + ox] += kv * dx[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(k) || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, k, bias, stride, padding }, needs))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`]) over
    /// `[C_in, H, W]` with a `[C_in, C_out, K, K]` kernel. Output height is
    /// `(H - 1) * S - 2P + K + output_padding`; `output_padding < S`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        let sk = self.node(k).shape.clone();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch { op: "conv_transpose2d", expected: 3, got: sx.len() });
        }
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(TensorError::InvalidParam {
                op: "conv_transpose2d",
                detail: format!("kernel must be [C_in, C_out, K, K], got {:?}", sk),
            });
        }
        if sk[0] != sx[0] {
            return Err(TensorError::ShapeMismatch { op: "conv_transpose2d", lhs: sx, rhs: sk });
        }
        if stride == 0 {
            return Err(TensorError::InvalidParam { op: "conv_transpose2d", detail: "stride must be >= 1".to_string() });
        }
        if output_padding >= stride {
            return Err(TensorError::InvalidParam {
                op: "conv_transpose2d",
                detail: format!("output_padding {} must be < stride {}", output_padding, stride),
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, ksz) = (sk[1], sk[2]);
        let oh = convt_out(h, ksz, stride, padding, output_padding).ok_or_else(|| TensorError::InvalidParam {
            op: "conv_transpose2d",
            detail: format!("non-positive output extent for input {}", h),
        })?;
        let ow = convt_out(w, ksz, stride, padding, output_padding).ok_or_else(|| TensorError::InvalidParam {
            op: "conv_transpose2d",
            detail: format!("non-positive output extent for input {}", w),
        })?;
        if let Some(b) = bias {
            let sb = &self.node(b).shape;
            if sb[..] != [cout] {
                return Err(TensorError::ShapeMismatch { op: "conv_transpose2d bias", lhs: vec![cout], rhs: sb.clone() });
            }
        }
        let mut out = vec![0.0; cout * oh * ow];
        if let Some(b) = bias {
            let db = &self.node(b).data;
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow].fill(db[co]);
            }
        }
        {
            let dx = &self.node(x).data;
            let dk = &self.node(k).data;
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = dx[(ci * h + iy) * w + ix];
                        if xv == 0.0 {
                            continue;
                        }
                        for ky in 0..ksz {
                            let oy = (iy * stride + ky) as isize - padding as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..ksz {
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let kbase = (ci * cout) * ksz * ksz + ky * ksz + kx;
                                for co in 0..cout {
                                    out[(co * oh + oy as usize) * ow + ox as usize]
                                        += xv * dk[kbase + co * ksz * ksz];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(k) || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(vec![cout, oh, ow], out, Op::ConvTranspose2d { x, k, bias, stride, padding }, needs))
    }

    // ── pooling and resampling ──────────────────────────────────────────

    /// Max pooling over `[C, H, W]` with square kernel and stride, no
    /// padding. Ties go to the lowest flat index so gradient routing is
    /// deterministic.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.maxpool2d_padded(x, kernel, stride, 0)
    }

    /// Max pooling with symmetric implicit padding that never participates
    /// in the max. Requires `2 * padding <= kernel` so every window sees at
    /// least one real element.
    pub fn maxpool2d_padded(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch { op: "maxpool2d", expected: 3, got: sx.len() });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidParam { op: "maxpool2d", detail: "kernel and stride must be >= 1".to_string() });
        }
        if 2 * padding > kernel {
            return Err(TensorError::InvalidParam {
                op: "maxpool2d",
                detail: format!("padding {} exceeds half of kernel {}", padding, kernel),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let oh = conv_out(h, kernel, stride, padding).ok_or_else(|| TensorError::InvalidParam {
            op: "maxpool2d",
            detail: format!("kernel {} does not fit input {} with padding {}", kernel, h, padding),
        })?;
        let ow = conv_out(w, kernel, stride, padding).ok_or_else(|| TensorError::InvalidParam {
            op: "maxpool2d",
            detail: format!("kernel {} does not fit input {} with padding {}", kernel, w, padding),
        })?;
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        {
            let dx = &self.node(x).data;
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let flat = (ci * h + iy as usize) * w + ix as usize;
                                if dx[flat] > best {
                                    best = dx[flat];
                                    best_idx = flat;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Adaptive max pooling to a fixed `[C, target_h, target_w]`. Window for
    /// output cell `i` spans `[floor(i*H/t), ceil((i+1)*H/t))`; on evenly
    /// divisible inputs this reduces to plain kernel/stride pooling. Targets
    /// larger than the input are rejected.
    pub fn adaptive_maxpool2d(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch { op: "adaptive_maxpool2d", expected: 3, got: sx.len() });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
            return Err(TensorError::InvalidParam {
                op: "adaptive_maxpool2d",
                detail: format!("target {}x{} invalid for input {}x{}", target_h, target_w, h, w),
            });
        }
        let mut out = Vec::with_capacity(c * target_h * target_w);
        let mut argmax = Vec::with_capacity(c * target_h * target_w);
        {
            let dx = &self.node(x).data;
            for ci in 0..c {
                for oy in 0..target_h {
                    let y0 = oy * h / target_h;
                    let y1 = ((oy + 1) * h).div_ceil(target_h);
                    for ox in 0..target_w {
                        let x0 = ox * w / target_w;
                        let x1 = ((ox + 1) * w).div_ceil(target_w);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let flat = (ci * h + iy) * w + ix;
                                if dx[flat] > best {
                                    best = dx[flat];
                                    best_idx = flat;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, target_h, target_w], out, Op::AdaptiveMaxPool2d { x, argmax }, needs))
    }

    /// Nearest-neighbor upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch { op: "upsample_nearest", expected: 3, got: sx.len() });
        }
        if factor == 0 {
            return Err(TensorError::InvalidParam { op: "upsample_nearest", detail: "factor must be >= 1".to_string() });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        {
            let dx = &self.node(x).data;
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = oy / factor;
                    let xrow = (ci * h + iy) * w;
                    let orow = (ci * oh + oy) * ow;
                    for ox in 0..ow {
                        out[orow + ox] = dx[xrow + ox / factor];
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, oh, ow], out, Op::UpsampleNearest { x, factor }, needs))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Layer normalization along `axis` with learned per-position scale and
    /// shift, both of shape `[extent(axis)]`.
    pub fn layernorm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let (outer, m, inner) = lane_dims(&shape, axis)?;
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::InvalidParam { op: "layernorm", detail: "eps must be positive".to_string() });
        }
        for (who, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.node(v).shape;
            if s[..] != [m] {
                return Err(TensorError::ShapeMismatch { op: "layernorm", lhs: vec![m], rhs: s.clone() });
            }
            let _ = who;
        }
        let n = self.node(x).data.len();
        let mut out = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        let mut inv_std = vec![0.0; outer * inner];
        {
            let dx = &self.node(x).data;
            let dg = &self.node(gamma).data;
            let db = &self.node(beta).data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * m * inner + i;
                    let mut mean = 0.0;
                    for j in 0..m {
                        mean += dx[base + j * inner];
                    }
                    mean /= m as f64;
                    let mut var = 0.0;
                    for j in 0..m {
                        let d = dx[base + j * inner] - mean;
                        var += d * d;
                    }
                    var /= m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + i] = inv;
                    for j in 0..m {
                        let xh = (dx[base + j * inner] - mean) * inv;
                        xhat[base + j * inner] = xh;
                        out[base + j * inner] = dg[j] * xh + db[j];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, axis, xhat, inv_std }, needs))
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    /// Concatenation along `axis`; inputs must agree on every other extent.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::InvalidParam { op: "concat", detail: "needs at least one input".to_string() });
        }
        let first = self.node(xs[0]).shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = &self.node(v).shape;
            if s.len() != first.len() {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.clone() });
            }
            for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.clone() });
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let node = self.node(v);
                let block = node.shape[axis] * inner;
                out.extend_from_slice(&node.data[o * block..(o + 1) * block]);
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::EmptyShape { shape });
        }
        let n = self.node(x).data.len();
        if shape.iter().product::<usize>() != n {
            return Err(TensorError::ShapeDataMismatch { shape, len: n });
        }
        let data = self.node(x).data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::Reshape { x }, needs))
    }

    /// Dimension permutation; `perm[d]` names the input axis that becomes
    /// output axis `d`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.node(x).shape.clone();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(TensorError::InvalidParam {
                op: "permute",
                detail: format!("{:?} is not a permutation of 0..{}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&d| in_shape[d]).collect();
        let in_strides = strides_of(&in_shape);
        let out = permute_copy(&self.node(x).data, &out_shape, &in_strides, perm);
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    /// Picks elements by flat index into a 1-D output. Gradients scatter-add
    /// back, so repeated indices accumulate.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.node(x).data.len();
        if idx.is_empty() {
            return Err(TensorError::InvalidParam { op: "gather", detail: "empty index list".to_string() });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: n });
        }
        let out: Vec<f64> = idx.iter().map(|&i| self.node(x).data[i]).collect();
        let shape = vec![out.len()];
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Gather { x, idx }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.node(x).data.iter().sum();
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![total], Op::Sum { x }, needs))
    }

    /// Elementwise product with a fixed mask (dropout and similar schemes).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let n = self.node(x).data.len();
        if mask.len() != n {
            return Err(TensorError::ShapeDataMismatch { shape: self.node(x).shape.clone(), len: mask.len() });
        }
        let out: Vec<f64> = self.node(x).data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::MaskMul { x, mask }, needs))
    }

    // ── scalar losses ───────────────────────────────────────────────────

    /// Weighted mean squared error against fixed targets.
    pub fn mse_vs(&mut self, x: Var, target: Vec<f64>, weight: Option<Vec<f64>>) -> Result<Var> {
        let denom = self.loss_denom("mse_vs", x, &target, &weight)?;
        let dx = &self.node(x).data;
        let mut total = 0.0;
        for i in 0..dx.len() {
            let w = weight.as_ref().map_or(1.0, |w| w[i]);
            let d = dx[i] - target[i];
            total += w * d * d;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![total / denom], Op::MseVs { x, target, weight, denom }, needs))
    }

    /// Weighted mean binary cross-entropy taking probabilities in `[0, 1]`.
    /// Probabilities are clamped away from 0 and 1 before the logs.
    pub fn bce_probs_vs(&mut self, x: Var, target: Vec<f64>, weight: Option<Vec<f64>>) -> Result<Var> {
        let denom = self.loss_denom("bce_probs_vs", x, &target, &weight)?;
        let dx = &self.node(x).data;
        let mut total = 0.0;
        for i in 0..dx.len() {
            let w = weight.as_ref().map_or(1.0, |w| w[i]);
            let p = dx[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
            total += w * (-(target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln()));
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![total / denom], Op::BceProbsVs { x, target, weight, denom }, needs))
    }

    /// Weighted mean binary cross-entropy on raw logits, computed in the
    /// stable `max(z,0) - z*t + ln(1 + exp(-|z|))` form.
    pub fn bce_logits_vs(&mut self, x: Var, target: Vec<f64>, weight: Option<Vec<f64>>) -> Result<Var> {
        let denom = self.loss_denom("bce_logits_vs", x, &target, &weight)?;
        let dx = &self.node(x).data;
        let mut total = 0.0;
        for i in 0..dx.len() {
            let w = weight.as_ref().map_or(1.0, |w| w[i]);
            let z = dx[i];
            total += w * (z.max(0.0) - z * target[i] + (-z.abs()).exp().ln_1p());
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![total / denom], Op::BceLogitsVs { x, target, weight, denom }, needs))
    }

    fn loss_denom(&self, op: &'static str, x: Var, target: &[f64], weight: &Option<Vec<f64>>) -> Result<f64> {
        let n = self.node(x).data.len();
        if target.len() != n {
            return Err(TensorError::ShapeDataMismatch { shape: self.node(x).shape.clone(), len: target.len() });
        }
        let denom = match weight {
            Some(w) => {
                if w.len() != n {
                    return Err(TensorError::ShapeDataMismatch { shape: self.node(x).shape.clone(), len: w.len() });
                }
                w.iter().sum()
            }
            None => n as f64,
        };
        if denom <= 0.0 {
            return Err(TensorError::InvalidParam { op, detail: "weights must sum to a positive value".to_string() });
        }
        Ok(denom)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients for every node that needs
    /// them are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss).data.len();
        if n != 1 {
            return Err(TensorError::NonScalarLoss { len: n });
        }
        if !self.node(loss).data[0].is_finite() {
            return Err(TensorError::NonFinite { context: "loss value".to_string() });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.apply_vjp(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer for a var, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of all named parameters, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for name in &self.param_order {
            let v = self.params[name];
            if let Some(g) = self.grad(v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_at(&mut self, v: Var, build: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; n]);
        }
        let mut g = self.grads[v.0].take().unwrap();
        build(&mut g);
        self.grads[v.0] = Some(g);
    }

    fn apply_vjp(&mut self, i: usize, g: &[f64]) {
        // Borrow dance: clone the cheap metadata out of the op, read input
        // buffers immutably, then accumulate into grad slots.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Bin { kind, a, b, bcast } => {
                let (kind, a, b, bcast) = (*kind, *a, *b, *bcast);
                let sign = if kind == BinKind::Sub { -1.0 } else { 1.0 };
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        self.accumulate(a, g);
                        self.accumulate_at(b, |gb| fold_broadcast(g, gb, bcast, sign));
                    }
                    BinKind::Mul => {
                        let da = self.nodes[a.0].data.clone();
                        let db = self.nodes[b.0].data.clone();
                        let m = db.len();
                        self.accumulate_at(a, |ga| {
                            for (idx, gi) in g.iter().enumerate() {
                                let bv = match bcast {
                                    Broadcast::Same => db[idx],
                                    Broadcast::Scalar => db[0],
                                    Broadcast::Suffix => db[idx % m],
                                };
                                ga[idx] += gi * bv;
                            }
                        });
                        let scaled: Vec<f64> = g.iter().zip(&da).map(|(&gi, &av)| gi * av).collect();
                        self.accumulate_at(b, |gb| fold_broadcast(&scaled, gb, bcast, 1.0));
                    }
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accumulate_at(x, |gx| {
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += go * c;
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                let dx = self.nodes[x.0].data.clone();
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        if dx[idx] > 0.0 {
                            gx[idx] += g[idx];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = self.nodes[i].data.clone();
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        gx[idx] += g[idx] * y[idx] * (1.0 - y[idx]);
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, kdim) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                self.accumulate_at(a, |ga| {
                    for ii in 0..m {
                        for kk in 0..kdim {
                            let mut acc = 0.0;
                            let grow = ii * n;
                            let brow = kk * n;
                            for j in 0..n {
                                acc += g[grow + j] * db[brow + j];
                            }
                            ga[ii * kdim + kk] += acc;
                        }
                    }
                });
                self.accumulate_at(b, |gb| {
                    for ii in 0..m {
                        let grow = ii * n;
                        for kk in 0..kdim {
                            let aik = da[ii * kdim + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let brow = kk * n;
                            for j in 0..n {
                                gb[brow + j] += aik * g[grow + j];
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[i].data.clone();
                let shape = self.nodes[i].shape.clone();
                let (outer, m, inner) = lane_dims(&shape, axis).expect("validated at forward");
                self.accumulate_at(x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * m * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..m {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..m {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, k, bias, stride, padding } => {
                let (x, k, bias, stride, padding) = (*x, *k, *bias, *stride, *padding);
                let (cin, h, w) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let (cout, oh, ow) = {
                    let s = &self.nodes[i].shape;
                    (s[0], s[1], s[2])
                };
                let ksz = self.nodes[k.0].shape[2];
                let dx = self.nodes[x.0].data.clone();
                let dk = self.nodes[k.0].data.clone();
                let x_needs = self.nodes[x.0].needs_grad;
                let k_needs = self.nodes[k.0].needs_grad;
                let mut gx = vec![0.0; dx.len()];
                let mut gk = vec![0.0; dk.len()];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(co * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                let kbase = (co * cin + ci) * ksz * ksz;
                                for ky in 0..ksz {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..ksz {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        let ki = kbase + ky * ksz + kx;
                                        if x_needs {
                                            gx[xi] += gv * dk[ki];
                                        }
                                        if k_needs {
                                            gk[ki] += gv * dx[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if x_needs {
                    self.accumulate(x, &gx);
                }
                if k_needs {
                    self.accumulate(k, &gk);
                }
                if let Some(b) = bias {
                    self.accumulate_at(b, |gb| {
                        for co in 0..cout {
                            let mut acc = 0.0;
                            for sp in 0..oh * ow {
                                acc += g[co * oh * ow + sp];
                            }
                            gb[co] += acc;
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, k, bias, stride, padding } => {
                let (x, k, bias, stride, padding) = (*x, *k, *bias, *stride, *padding);
                let (cin, h, w) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let (cout, oh, ow) = {
                    let s = &self.nodes[i].shape;
                    (s[0], s[1], s[2])
                };
                let ksz = self.nodes[k.0].shape[2];
                let dx = self.nodes[x.0].data.clone();
                let dk = self.nodes[k.0].data.clone();
                let x_needs = self.nodes[x.0].needs_grad;
                let k_needs = self.nodes[k.0].needs_grad;
                let mut gx = vec![0.0; dx.len()];
                let mut gk = vec![0.0; dk.len()];
                for ci in 0..cin {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xi = (ci * h + iy) * w + ix;
                            for ky in 0..ksz {
                                let oy = (iy * stride + ky) as isize - padding as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..ksz {
                                    let ox = (ix * stride + kx) as isize - padding as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        let ki = ((ci * cout + co) * ksz + ky) * ksz + kx;
                                        let gv = g[(co * oh + oy as usize) * ow + ox as usize];
                                        if x_needs {
                                            gx[xi] += gv * dk[ki];
                                        }
                                        if k_needs {
                                            gk[ki] += gv * dx[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if x_needs {
                    self.accumulate(x, &gx);
                }
                if k_needs {
                    self.accumulate(k, &gk);
                }
                if let Some(b) = bias {
                    self.accumulate_at(b, |gb| {
                        for co in 0..cout {
                            let mut acc = 0.0;
                            for sp in 0..oh * ow {
                                acc += g[co * oh * ow + sp];
                            }
                            gb[co] += acc;
                        }
                    });
                }
            }
            Op::MaxPool2d { x, argmax } | Op::AdaptiveMaxPool2d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                self.accumulate_at(x, |gx| {
                    for (out_i, &src) in argmax.iter().enumerate() {
                        gx[src] += g[out_i];
                    }
                });
            }
            Op::UpsampleNearest { x, factor } => {
                let (x, factor) = (*x, *factor);
                let (c, h, w) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let (oh, ow) = (h * factor, w * factor);
                self.accumulate_at(x, |gx| {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let in_row = (ci * h + oy / factor) * w;
                            let out_row = (ci * oh + oy) * ow;
                            for ox in 0..ow {
                                gx[in_row + ox / factor] += g[out_row + ox];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, axis, xhat, inv_std } => {
                let (x, gamma, beta, axis) = (*x, *gamma, *beta, *axis);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let shape = self.nodes[i].shape.clone();
                let (outer, m, inner) = lane_dims(&shape, axis).expect("validated at forward");
                let dg = self.nodes[gamma.0].data.clone();
                self.accumulate_at(x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * m * inner + ii;
                            let inv = inv_std[o * inner + ii];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..m {
                                let idx = base + j * inner;
                                let dxh = g[idx] * dg[j];
                                s1 += dxh;
                                s2 += dxh * xhat[idx];
                            }
                            s1 /= m as f64;
                            s2 /= m as f64;
                            for j in 0..m {
                                let idx = base + j * inner;
                                let dxh = g[idx] * dg[j];
                                gx[idx] += inv * (dxh - s1 - xhat[idx] * s2);
                            }
                        }
                    }
                });
                self.accumulate_at(gamma, |gg| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * m * inner + ii;
                            for j in 0..m {
                                gg[j] += g[base + j * inner] * xhat[base + j * inner];
                            }
                        }
                    }
                });
                self.accumulate_at(beta, |gb| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * m * inner + ii;
                            for j in 0..m {
                                gb[j] += g[base + j * inner];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0;
                for &v in &xs {
                    let block = self.nodes[v.0].shape[axis] * inner;
                    let start = offset;
                    self.accumulate_at(v, |gv| {
                        for o in 0..outer {
                            let src = o * out_block + start;
                            for j in 0..block {
                                gv[o * block + j] += g[src + j];
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                let out_shape = self.nodes[i].shape.clone();
                let in_shape = self.nodes[x.0].shape.clone();
                let in_strides = strides_of(&in_shape);
                self.accumulate_at(x, |gx| {
                    // Walk output flat order, mapping each position back to
                    // its input flat index (same mapping as the forward copy).
                    let rank = out_shape.len();
                    let mut idx = vec![0usize; rank];
                    for (flat_out, &gv) in g.iter().enumerate() {
                        let mut flat_in = 0;
                        for d in 0..rank {
                            flat_in += idx[d] * in_strides[perm[d]];
                        }
                        gx[flat_in] += gv;
                        let _ = flat_out;
                        for d in (0..rank).rev() {
                            idx[d] += 1;
                            if idx[d] < out_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                self.accumulate_at(x, |gx| {
                    for (out_i, &src) in idx.iter().enumerate() {
                        gx[src] += g[out_i];
                    }
                });
            }
            Op::Sum { x } => {
                let x = *x;
                let gv = g[0];
                self.accumulate_at(x, |gx| {
                    for gi in gx.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        gx[idx] += g[idx] * mask[idx];
                    }
                });
            }
            Op::MseVs { x, target, weight, denom } => {
                let x = *x;
                let (target, weight, denom) = (target.clone(), weight.clone(), *denom);
                let dx = self.nodes[x.0].data.clone();
                let gv = g[0];
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        let w = weight.as_ref().map_or(1.0, |w| w[idx]);
                        gx[idx] += gv * 2.0 * w * (dx[idx] - target[idx]) / denom;
                    }
                });
            }
            Op::BceProbsVs { x, target, weight, denom } => {
                let x = *x;
                let (target, weight, denom) = (target.clone(), weight.clone(), *denom);
                let dx = self.nodes[x.0].data.clone();
                let gv = g[0];
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        let w = weight.as_ref().map_or(1.0, |w| w[idx]);
                        let p = dx[idx].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gx[idx] += gv * w * (-target[idx] / p + (1.0 - target[idx]) / (1.0 - p)) / denom;
                    }
                });
            }
            Op::BceLogitsVs { x, target, weight, denom } => {
                let x = *x;
                let (target, weight, denom) = (target.clone(), weight.clone(), *denom);
                let dx = self.nodes[x.0].data.clone();
                let gv = g[0];
                self.accumulate_at(x, |gx| {
                    for idx in 0..gx.len() {
                        let w = weight.as_ref().map_or(1.0, |w| w[idx]);
                        gx[idx] += gv * w * (sigmoid(dx[idx]) - target[idx]) / denom;
                    }
                });
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output extent of a strided window op: `(H + 2P - K) / S + 1`, or None
/// when the kernel does not fit even once.
pub fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed conv: `(H - 1) * S - 2P + K + OP`, or None
/// when that is not positive.
pub fn convt_out(input: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize) -> Option<usize> {
    let grown = (input - 1) * stride + kernel + output_padding;
    let shrink = 2 * padding;
    if input == 0 || grown <= shrink {
        return None;
    }
    Some(grown - shrink)
}

fn lane_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn fold_broadcast(g: &[f64], gb: &mut [f64], bcast: Broadcast, sign: f64) {
    match bcast {
        Broadcast::Same => {
            for (bi, gi) in gb.iter_mut().zip(g) {
                *bi += sign * gi;
            }
        }
        Broadcast::Scalar => gb[0] += sign * g.iter().sum::<f64>(),
        Broadcast::Suffix => {
            let m = gb.len();
            for (idx, gi) in g.iter().enumerate() {
                gb[idx % m] += sign * gi;
            }
        }
    }
}

fn permute_copy(data: &[f64], out_shape: &[usize], in_strides: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut flat_in = 0;
        for d in 0..rank {
            flat_in += idx[d] * in_strides[perm[d]];
        }
        out.push(data[flat_in]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
