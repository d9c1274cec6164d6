//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! Every forward pass in the crate — training and inference alike — runs
//! through this tape, so the gradients that the finite-difference checks
//! validate are the gradients training actually uses. Inference simply never
//! calls [`Tape::backward`], and nodes whose inputs carry no gradient skip
//! their backward caches.
//!
//! The op set is deliberately small: exactly what the detector, adaptation
//! heads, and loss terms need.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

use super::params::ParamSet;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

/// Region spec for ROI max pooling: image index within the batch plus the
/// box in input-image coordinates.
#[derive(Debug, Clone)]
pub struct RoiSpec {
    pub image_index: usize,
    /// (x1, y1, x2, y2) in input-image pixels.
    pub rect: [f64; 4],
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
        cols: Option<Array2<f64>>,
    },
    BiasAdd4 {
        x: TensorId,
        b: TensorId,
    },
    BiasAdd2 {
        x: TensorId,
        b: TensorId,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    GlobalAvgPool(TensorId),
    Upsample2x(TensorId),
    /// (N, C, H, W) -> (N, H, W, C), standard layout.
    PermuteNhwc(TensorId),
    /// Keep the top-left (h, w) spatial window of an NCHW tensor.
    Crop4 {
        x: TensorId,
        h: usize,
        w: usize,
    },
    Reshape {
        x: TensorId,
        from: Vec<usize>,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    RoiMaxPool {
        x: TensorId,
        /// Flat index into the input for each output element; -1 = empty bin.
        argmax: Vec<i64>,
    },
    Grl {
        x: TensorId,
        lambda: f64,
    },
    SoftmaxCe {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    BceWithLogits {
        logits: TensorId,
        targets: ArrayD<f64>,
    },
    SmoothL1Mean {
        pred: TensorId,
        target: ArrayD<f64>,
    },
    L1Mean {
        pred: TensorId,
        target: ArrayD<f64>,
    },
    SqNormHalf(TensorId),
    WeightedSum {
        terms: Vec<(TensorId, f64)>,
    },
    /// Decode one box-delta row against a fixed anchor and normalize the
    /// corners by the image size. Input (1, 4) -> output (1, 4).
    DecodeBoxNorm {
        deltas: TensorId,
        anchor: [f64; 4],
        image_w: f64,
        image_h: f64,
        clamp: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: TensorId) -> Option<&ArrayD<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned array, zeros when the tensor was unreachable.
    pub fn take_or_zeros(&mut self, t: TensorId, shape: &[usize]) -> ArrayD<f64> {
        self.grads[t.0]
            .take()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}

/// Tensor ids for one [`ParamSet`] bound onto a tape.
pub struct Binding {
    pub ids: Vec<TensorId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, t: TensorId) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn value(&self, t: TensorId) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub fn scalar(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value[[]]
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> TensorId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> TensorId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Bind every parameter of a set as a leaf. `trainable = false` skips
    /// gradient bookkeeping (teacher inference, evaluation).
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Binding {
        let ids = params
            .entries()
            .iter()
            .map(|e| self.leaf(e.value.clone(), trainable))
            .collect();
        Binding { ids }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = self.value(a) * k;
        let ng = self.needs(a);
        self.push(v, ng, Op::Scale(a, k))
    }

    /// 2-D matrix product: (m, k) x (k, n) -> (m, n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::MatMul { a, b })
    }

    /// 2-D convolution, NCHW input, OIHW kernel.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let ng = self.needs(x) || self.needs(w);
        let (y, cols) = conv2d_forward(self.value(x), self.value(w), stride, pad, ng);
        self.push(
            y,
            ng,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn bias_add4(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(self.value(b).shape(), [xs[1]], "bias length must equal channels");
        let mut v = self.value(x).clone();
        {
            let bv = self.value(b).clone();
            let mut v4 = v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for (c, bias) in bv.iter().enumerate() {
                v4.index_axis_mut(Axis(1), c).mapv_inplace(|t| t + bias);
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(v, ng, Op::BiasAdd4 { x, b })
    }

    /// Add a per-column bias to a 2-D tensor.
    pub fn bias_add2(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(self.value(b).shape(), [xs[1]], "bias length must equal columns");
        let bv = self.value(b).clone();
        let mut v = self.value(x).clone();
        {
            let mut v2 = v.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in v2.rows_mut() {
                row += &b1;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(v, ng, Op::BiasAdd2 { x, b })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(|t| t.max(0.0));
        let ng = self.needs(x);
        self.push(v, ng, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(sigmoid);
        let ng = self.needs(x);
        self.push(v, ng, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(f64::exp);
        let ng = self.needs(x);
        self.push(v, ng, Op::Exp(x))
    }

    /// (N, C, H, W) -> (N, C): mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                out[[i, j]] = xv.index_axis(Axis(0), i).index_axis(Axis(0), j).sum() / (h * w) as f64;
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::GlobalAvgPool(x))
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: TensorId) -> TensorId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        let v = xv[[i, j, y, z]];
                        out[[i, j, 2 * y, 2 * z]] = v;
                        out[[i, j, 2 * y, 2 * z + 1]] = v;
                        out[[i, j, 2 * y + 1, 2 * z]] = v;
                        out[[i, j, 2 * y + 1, 2 * z + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::Upsample2x(x))
    }

    pub fn permute_nhwc(&mut self, x: TensorId) -> TensorId {
        let v = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let ng = self.needs(x);
        self.push(v, ng, Op::PermuteNhwc(x))
    }

    /// Slice an NCHW tensor down to its top-left (h, w) spatial window.
    pub fn crop4(&mut self, x: TensorId, h: usize, w: usize) -> TensorId {
        let xv = as4(self.value(x));
        let (n, c, xh, xw) = xv.dim();
        assert!(h <= xh && w <= xw, "crop window exceeds input");
        let v = xv
            .slice(ndarray::s![0..n, 0..c, 0..h, 0..w])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let ng = self.needs(x);
        self.push(v, ng, Op::Crop4 { x, h, w })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let from = self.value(x).shape().to_vec();
        let v = reshape_owned(self.value(x), shape);
        let ng = self.needs(x);
        self.push(v, ng, Op::Reshape { x, from })
    }

    /// Select rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, idx: Vec<usize>) -> TensorId {
        let xv = as2(self.value(x));
        let cols = xv.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::GatherRows { x, idx })
    }

    /// Max-pool each ROI of an NCHW feature tensor into a (R, C, P, P) block.
    ///
    /// ROI rectangles are given in input-image coordinates and divided by
    /// `stride` to reach feature coordinates. Empty bins produce 0.
    pub fn roi_max_pool(&mut self, x: TensorId, rois: &[RoiSpec], stride: usize, p: usize) -> TensorId {
        let xv = as4(self.value(x));
        let (_, c, hf, wf) = xv.dim();
        let mut out = Array4::<f64>::zeros((rois.len(), c, p, p));
        let mut argmax = vec![-1i64; rois.len() * c * p * p];
        let xflat = self.value(x).as_slice().expect("conv outputs are standard layout");
        let xs = self.value(x).shape().to_vec();
        let (sn, sc, sh) = (xs[1] * xs[2] * xs[3], xs[2] * xs[3], xs[3]);
        for (r, roi) in rois.iter().enumerate() {
            let bins = roi_bins(roi.rect, stride, p, hf, wf);
            for (bi, (y0, y1, x0, x1)) in bins.iter().enumerate() {
                let (py, px) = (bi / p, bi % p);
                if y0 >= y1 || x0 >= x1 {
                    continue; // empty bin stays 0 with no gradient
                }
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = -1i64;
                    for fy in *y0..*y1 {
                        for fx in *x0..*x1 {
                            let flat = roi.image_index * sn + ch * sc + fy * sh + fx;
                            let v = xflat[flat];
                            if v > best {
                                best = v;
                                best_idx = flat as i64;
                            }
                        }
                    }
                    out[[r, ch, py, px]] = best;
                    argmax[((r * c + ch) * p + py) * p + px] = best_idx;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::RoiMaxPool { x, argmax })
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// on the way back.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> TensorId {
        let v = self.value(x).clone();
        let ng = self.needs(x);
        self.push(v, ng, Op::Grl { x, lambda })
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_ce(&mut self, logits: TensorId, targets: Vec<usize>) -> TensorId {
        let lv = as2(self.value(logits));
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        let mut probs = Array2::<f64>::zeros(lv.dim());
        let mut loss = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                probs[[r, c]] = e / z;
            }
            loss += -(probs[[r, targets[r]]].ln());
        }
        loss /= targets.len().max(1) as f64;
        let ng = self.needs(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            ng,
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Mean binary cross-entropy on logits, numerically stable.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: ArrayD<f64>) -> TensorId {
        assert_eq!(self.value(logits).shape(), targets.shape());
        let n = targets.len().max(1) as f64;
        let mut loss = 0.0;
        for (z, t) in self.value(logits).iter().zip(targets.iter()) {
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        loss /= n;
        let ng = self.needs(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            ng,
            Op::BceWithLogits { logits, targets },
        )
    }

    /// Mean smooth-L1 of `pred - target` over all elements.
    pub fn smooth_l1_mean(&mut self, pred: TensorId, target: ArrayD<f64>) -> TensorId {
        assert_eq!(self.value(pred).shape(), target.shape());
        let n = target.len().max(1) as f64;
        let mut loss = 0.0;
        for (p, t) in self.value(pred).iter().zip(target.iter()) {
            loss += smooth_l1_scalar(p - t);
        }
        loss /= n;
        let ng = self.needs(pred);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            ng,
            Op::SmoothL1Mean { pred, target },
        )
    }

    /// Mean absolute error of `pred - target` over all elements.
    pub fn l1_mean(&mut self, pred: TensorId, target: ArrayD<f64>) -> TensorId {
        assert_eq!(self.value(pred).shape(), target.shape());
        let n = target.len().max(1) as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), ng, Op::L1Mean { pred, target })
    }

    /// Half the squared Frobenius norm.
    pub fn sq_norm_half(&mut self, x: TensorId) -> TensorId {
        let v = 0.5 * self.value(x).iter().map(|t| t * t).sum::<f64>();
        let ng = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), ng, Op::SqNormHalf(x))
    }

    /// Weighted sum of scalar nodes, evaluated in term order.
    pub fn weighted_sum(&mut self, terms: Vec<(TensorId, f64)>) -> TensorId {
        let mut total = 0.0;
        for (t, w) in &terms {
            debug_assert_eq!(self.value(*t).len(), 1, "weighted_sum expects scalars");
            total += w * self.scalar(*t);
        }
        let ng = terms.iter().any(|(t, _)| self.needs(*t));
        self.push(ArrayD::from_elem(IxDyn(&[]), total), ng, Op::WeightedSum { terms })
    }

    /// Decode a (1, 4) delta row against `anchor` and divide the corners by
    /// the image size. Size deltas are clamped to `[-clamp, clamp]` before
    /// exponentiation, matching the plain-value decoder.
    pub fn decode_box_norm(
        &mut self,
        deltas: TensorId,
        anchor: [f64; 4],
        image_w: f64,
        image_h: f64,
        clamp: f64,
    ) -> TensorId {
        assert_eq!(self.value(deltas).shape(), [1, 4]);
        let d = self.value(deltas);
        let (tx, ty, tw, th) = (d[[0, 0]], d[[0, 1]], d[[0, 2]], d[[0, 3]]);
        let [ax1, ay1, ax2, ay2] = anchor;
        let (aw, ah) = (ax2 - ax1, ay2 - ay1);
        let (acx, acy) = (0.5 * (ax1 + ax2), 0.5 * (ay1 + ay2));
        let cx = acx + tx * aw;
        let cy = acy + ty * ah;
        let w = tw.clamp(-clamp, clamp).exp() * aw;
        let h = th.clamp(-clamp, clamp).exp() * ah;
        let out = ndarray::arr2(&[[
            (cx - 0.5 * w) / image_w,
            (cy - 0.5 * h) / image_h,
            (cx + 0.5 * w) / image_w,
            (cy + 0.5 * h) / image_h,
        ]])
        .into_dyn();
        let ng = self.needs(deltas);
        self.push(
            out,
            ng,
            Op::DecodeBoxNorm {
                deltas,
                anchor,
                image_w,
                image_h,
                clamp,
            },
        )
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // leaves keep their gradient for extraction
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.accum(grads, *a, g * *k),
            Op::MatMul { a, b } => {
                let g2 = as2(g);
                if self.needs(*a) {
                    let da = g2.dot(&as2(self.value(*b)).t()).into_dyn();
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = as2(self.value(*a)).t().dot(&g2).into_dyn();
                    self.accum(grads, *b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let cols = cols.as_ref().expect("grad-enabled conv caches im2col");
                let (dx, dw) = conv2d_backward(
                    g,
                    self.value(*x).shape(),
                    self.value(*w).shape(),
                    cols,
                    self.value(*w),
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
            }
            Op::BiasAdd4 { x, b } => {
                if self.needs(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let g4 = as4(g);
                    let c = g4.dim().1;
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        db[ch] = g4.index_axis(Axis(1), ch).sum();
                    }
                    self.accum(grads, *b, db.into_dyn());
                }
            }
            Op::BiasAdd2 { x, b } => {
                if self.needs(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let db = as2(g).sum_axis(Axis(0)).into_dyn();
                    self.accum(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let mask = self.nodes[i].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *x, g * &mask);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *x, g * &(y * &(1.0 - y)));
            }
            Op::Exp(x) => {
                self.accum(grads, *x, g * &self.nodes[i].value);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let g2 = as2(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for i2 in 0..n {
                    for j in 0..c {
                        let v = g2[[i2, j]] * inv;
                        dx.index_axis_mut(Axis(0), i2)
                            .index_axis_mut(Axis(0), j)
                            .fill(v);
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::Upsample2x(x) => {
                let g4 = as4(g);
                let (n, c, h2, w2) = g4.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for i2 in 0..n {
                    for j in 0..c {
                        for y in 0..h {
                            for z in 0..w {
                                dx[[i2, j, y, z]] = g4[[i2, j, 2 * y, 2 * z]]
                                    + g4[[i2, j, 2 * y, 2 * z + 1]]
                                    + g4[[i2, j, 2 * y + 1, 2 * z]]
                                    + g4[[i2, j, 2 * y + 1, 2 * z + 1]];
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::PermuteNhwc(x) => {
                let dx = g
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn();
                self.accum(grads, *x, dx);
            }
            Op::Crop4 { x, h, w } => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                dx.slice_mut(ndarray::s![.., .., 0..*h, 0..*w])
                    .assign(&as4(g));
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::Reshape { x, from } => {
                self.accum(grads, *x, reshape_owned(g, from));
            }
            Op::GatherRows { x, idx } => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = Array2::<f64>::zeros((xs[0], xs[1]));
                let g2 = as2(g);
                for (r, &orig) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(orig);
                    row += &g2.row(r);
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::RoiMaxPool { x, argmax } => {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(self.value(*x).shape()));
                {
                    let dxf = dx.as_slice_mut().unwrap();
                    let gf = g.as_slice().expect("pool grad contiguous");
                    for (o, &a) in argmax.iter().enumerate() {
                        if a >= 0 {
                            dxf[a as usize] += gf[o];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Grl { x, lambda } => {
                self.accum(grads, *x, g * (-lambda));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let gs = g[[]];
                let n = targets.len().max(1) as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[[r, t]] -= 1.0;
                }
                dl *= gs / n;
                self.accum(grads, *logits, dl.into_dyn());
            }
            Op::BceWithLogits { logits, targets } => {
                let gs = g[[]];
                let n = targets.len().max(1) as f64;
                let mut dl = self.value(*logits).mapv(sigmoid);
                dl -= targets;
                dl *= gs / n;
                self.accum(grads, *logits, dl);
            }
            Op::SmoothL1Mean { pred, target } => {
                let gs = g[[]];
                let n = target.len().max(1) as f64;
                let mut dp = self.value(*pred) - target;
                dp.mapv_inplace(|x| x.clamp(-1.0, 1.0));
                dp *= gs / n;
                self.accum(grads, *pred, dp);
            }
            Op::L1Mean { pred, target } => {
                let gs = g[[]];
                let n = target.len().max(1) as f64;
                let mut dp = self.value(*pred) - target;
                dp.mapv_inplace(f64::signum);
                dp.mapv_inplace(|x| if x.is_nan() { 0.0 } else { x });
                dp *= gs / n;
                self.accum(grads, *pred, dp);
            }
            Op::SqNormHalf(x) => {
                let gs = g[[]];
                self.accum(grads, *x, self.value(*x) * gs);
            }
            Op::WeightedSum { terms } => {
                let gs = g[[]];
                for (t, w) in terms {
                    if self.needs(*t) {
                        self.accum(grads, *t, ArrayD::from_elem(IxDyn(&[]), gs * w));
                    }
                }
            }
            Op::DecodeBoxNorm {
                deltas,
                anchor,
                image_w,
                image_h,
                clamp,
            } => {
                let d = self.value(*deltas);
                let (tw, th) = (d[[0, 2]], d[[0, 3]]);
                let [ax1, ay1, ax2, ay2] = *anchor;
                let (aw, ah) = (ax2 - ax1, ay2 - ay1);
                let g2 = as2(g);
                let (g_x1, g_y1, g_x2, g_y2) = (g2[[0, 0]], g2[[0, 1]], g2[[0, 2]], g2[[0, 3]]);
                // out = [(cx - w/2)/W, (cy - h/2)/H, (cx + w/2)/W, (cy + h/2)/H]
                let d_cx = (g_x1 + g_x2) / image_w;
                let d_cy = (g_y1 + g_y2) / image_h;
                let d_w = 0.5 * (g_x2 - g_x1) / image_w;
                let d_h = 0.5 * (g_y2 - g_y1) / image_h;
                let dw_dtw = if tw.abs() < *clamp {
                    tw.clamp(-*clamp, *clamp).exp() * aw
                } else {
                    0.0
                };
                let dh_dth = if th.abs() < *clamp {
                    th.clamp(-*clamp, *clamp).exp() * ah
                } else {
                    0.0
                };
                let dd = ndarray::arr2(&[[d_cx * aw, d_cy * ah, d_w * dw_dtw, d_h * dh_dth]]).into_dyn();
                self.accum(grads, *deltas, dd);
            }
        }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], t: TensorId, delta: ArrayD<f64>) {
        if !self.needs(t) {
            return;
        }
        match &mut grads[t.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
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

/// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub(crate) fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("expected 2-D tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix4>().expect("expected 4-D tensor")
}

fn reshape_owned(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let owned = a.as_standard_layout().to_owned();
    owned
        .to_shape(IxDyn(shape))
        .expect("element count must match in reshape")
        .to_owned()
}

/// Cell ranges `(y0, y1, x0, x1)` of each of the `p*p` bins of an ROI, after
/// dividing the rectangle by `stride` and clamping to the feature extent.
/// Shared by the tape op and the plain-value pooling in the detector.
pub fn roi_bins(rect: [f64; 4], stride: usize, p: usize, hf: usize, wf: usize) -> Vec<(usize, usize, usize, usize)> {
    let s = stride as f64;
    let fx1 = (rect[0] / s).clamp(0.0, wf as f64);
    let fy1 = (rect[1] / s).clamp(0.0, hf as f64);
    let fx2 = (rect[2] / s).clamp(0.0, wf as f64);
    let fy2 = (rect[3] / s).clamp(0.0, hf as f64);
    let mut bins = Vec::with_capacity(p * p);
    for by in 0..p {
        let y0 = fy1 + (fy2 - fy1) * by as f64 / p as f64;
        let y1 = fy1 + (fy2 - fy1) * (by + 1) as f64 / p as f64;
        let (cy0, cy1) = (
            (y0.floor().max(0.0) as usize).min(hf),
            (y1.ceil().max(0.0) as usize).min(hf),
        );
        for bx in 0..p {
            let x0 = fx1 + (fx2 - fx1) * bx as f64 / p as f64;
            let x1 = fx1 + (fx2 - fx1) * (bx + 1) as f64 / p as f64;
            let (cx0, cx1) = (
                (x0.floor().max(0.0) as usize).min(wf),
                (x1.ceil().max(0.0) as usize).min(wf),
            );
            bins.push((cy0, cy1, cx0, cx1));
        }
    }
    bins
}

fn conv_out_side(i: usize, k: usize, stride: usize, pad: usize) -> usize {
    (i + 2 * pad - k) / stride + 1
}

fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (ArrayD<f64>, Option<Array2<f64>>) {
    let xv = as4(x);
    let wv = as4(w);
    let (n, cin, h, wd) = xv.dim();
    let (cout, cin_w, kh, kw) = wv.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let ho = conv_out_side(h, kh, stride, pad);
    let wo = conv_out_side(wd, kw, stride, pad);

    let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
    let w_mat = wv
        .to_shape((cout, cin * kh * kw))
        .expect("kernel is standard layout")
        .to_owned();
    let y_mat = w_mat.dot(&cols); // (cout, n*ho*wo)
    let y = y_mat
        .to_shape((cout, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_dyn();
    (y, keep_cols.then_some(cols))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &ArrayD<f64>,
    x_shape: &[usize],
    w_shape: &[usize],
    cols: &Array2<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (n, cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let g4 = as4(g);
    let (_, _, ho, wo) = g4.dim();
    let g_mat = g4
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .to_shape((cout, n * ho * wo))
        .unwrap()
        .to_owned();

    let dw = need_dw.then(|| {
        g_mat
            .dot(&cols.t())
            .to_shape((cout, cin, kh, kw))
            .unwrap()
            .to_owned()
            .into_dyn()
    });

    let dx = need_dx.then(|| {
        let w_mat = as4(w)
            .to_shape((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let dcols = w_mat.t().dot(&g_mat); // (cin*kh*kw, n*ho*wo)
        col2im(&dcols, n, cin, h, wd, kh, kw, stride, pad, ho, wo)
    });

    (dx, dw)
}

fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, n * ho * wo));
    let xs = x.as_slice().expect("input assumed standard layout");
    let (sn, sc, sh) = (cin * h * w, h * w, w);
    let cs = cols.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let base = row * row_len;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let col_base = base + ni * ho * wo + oy * wo;
                        if iy < 0 || iy >= h as isize {
                            continue; // padding rows stay zero
                        }
                        let x_base = ni * sn + c * sc + iy as usize * sh;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[col_base + ox] = xs[x_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let mut dx = Array4::<f64>::zeros((n, cin, h, w));
    let ds = dcols.as_slice().unwrap();
    let row_len = n * ho * wo;
    {
        let dxs = dx.as_slice_mut().unwrap();
        let (sn, sc, sh) = (cin * h * w, h * w, w);
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let base = row * row_len;
                    for ni in 0..n {
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let col_base = base + ni * ho * wo + oy * wo;
                            let x_base = ni * sn + c * sc + iy as usize * sh;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dxs[x_base + ix as usize] += ds[col_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        a
    }

    /// Central finite differences on every coordinate of `x0` for a scalar
    /// function, compared against the tape gradient it produces.
    fn check_grad<F>(x0: ArrayD<f64>, f: F, tol: f64)
    where
        F: Fn(&mut Tape, TensorId) -> TensorId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = f(&mut tape, x);
        assert_eq!(tape.value(y).len(), 1, "check_grad needs a scalar output");
        let mut grads = tape.backward(y);
        let analytic = grads.take_or_zeros(x, x0.shape());

        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let eval = |arr: ArrayD<f64>| {
                let mut t = Tape::new();
                let xi = t.leaf(arr, false);
                let yi = f(&mut t, xi);
                t.scalar(yi)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(a.abs()).max(1.0);
            assert!(
                (fd - a).abs() / denom < tol,
                "coord {i}: fd={fd} analytic={a}"
            );
        }
    }

    fn sum_all(t: &mut Tape, x: TensorId) -> TensorId {
        // sum(x) = x . ones via matmul-free route: reshape to (1, n) and
        // smooth_l1 would bend values, so use a weighted_sum over sq_norm
        // tricks instead. Simplest exact linear reduction: mean L1 against a
        // large negative constant is affine for positive shifts; instead use
        // matmul with a ones vector.
        let n = t.value(x).len();
        let flat = t.reshape(x, &[1, n]);
        let ones = t.constant(ArrayD::from_elem(IxDyn(&[n, 1]), 1.0));
        let s = t.matmul(flat, ones);
        t.reshape(s, &[])
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = rand_arr(&mut rng, &[3, 4]);
        let b0 = rand_arr(&mut rng, &[3, 4]);
        check_grad(a0.clone(), |t, x| {
            let b = t.constant(b0.clone());
            let s = t.add(x, b);
            let d = t.sub(s, x);
            let m = t.mul(d, x);
            let k = t.scale(m, 1.7);
            sum_all(t, k)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = rand_arr(&mut rng, &[3, 5]);
        let b0 = rand_arr(&mut rng, &[5, 2]);
        check_grad(a0, |t, x| {
            let b = t.constant(b0.clone());
            let y = t.matmul(x, b);
            sum_all(t, y)
        }, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = rand_arr(&mut rng, &[3, 5]);
        let b0 = rand_arr(&mut rng, &[5, 2]);
        check_grad(b0, |t, x| {
            let a = t.constant(a0.clone());
            let y = t.matmul(a, x);
            let sq = t.sq_norm_half(y);
            sq
        }, 1e-6);
    }

    #[test]
    fn grad_conv2d_input_and_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_arr(&mut rng, &[2, 3, 5, 6]);
        let w0 = rand_arr(&mut rng, &[4, 3, 3, 3]);
        check_grad(x0.clone(), |t, x| {
            let w = t.constant(w0.clone());
            let y = t.conv2d(x, w, 1, 1);
            t.sq_norm_half(y)
        }, 1e-5);
        check_grad(w0, |t, w| {
            let x = t.constant(x0.clone());
            let y = t.conv2d(x, w, 2, 1);
            t.sq_norm_half(y)
        }, 1e-5);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let x = ndarray::arr3(&[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]])
            .insert_axis(Axis(0))
            .into_dyn();
        let w = ndarray::arr3(&[[[1.0, 0.0], [0.0, -1.0]]])
            .insert_axis(Axis(0))
            .into_dyn();
        let mut t = Tape::new();
        let xi = t.leaf(x, false);
        let wi = t.leaf(w, false);
        let y = t.conv2d(xi, wi, 1, 0);
        let yv = t.value(y);
        assert_eq!(yv.shape(), [1, 1, 2, 2]);
        // each output = top-left - bottom-right of the window
        assert_eq!(yv[[0, 0, 0, 0]], 1.0 - 5.0);
        assert_eq!(yv[[0, 0, 0, 1]], 2.0 - 6.0);
        assert_eq!(yv[[0, 0, 1, 0]], 4.0 - 8.0);
        assert_eq!(yv[[0, 0, 1, 1]], 5.0 - 9.0);
    }

    #[test]
    fn grad_bias_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_arr(&mut rng, &[2, 3, 4, 4]);
        let b0 = rand_arr(&mut rng, &[3]);
        check_grad(b0.clone(), |t, b| {
            let x = t.constant(x0.clone());
            let y = t.bias_add4(x, b);
            t.sq_norm_half(y)
        }, 1e-6);
        let x2 = rand_arr(&mut rng, &[4, 3]);
        check_grad(x2.clone(), |t, x| {
            let b = t.constant(b0.clone());
            let y = t.bias_add2(x, b);
            t.sq_norm_half(y)
        }, 1e-6);
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_arr(&mut rng, &[3, 7]) * 2.0;
        check_grad(x0.clone(), |t, x| {
            let y = t.sigmoid(x);
            t.sq_norm_half(y)
        }, 1e-6);
        check_grad(x0.clone(), |t, x| {
            let y = t.exp(x);
            t.sq_norm_half(y)
        }, 1e-6);
        // keep values away from the relu kink
        let x_off = x0.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_grad(x_off, |t, x| {
            let y = t.relu(x);
            t.sq_norm_half(y)
        }, 1e-6);
    }

    #[test]
    fn grad_pool_upsample_permute_reshape_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_arr(&mut rng, &[2, 3, 4, 4]);
        check_grad(x0.clone(), |t, x| {
            let y = t.global_avg_pool(x);
            t.sq_norm_half(y)
        }, 1e-6);
        check_grad(x0.clone(), |t, x| {
            let y = t.upsample2x(x);
            t.sq_norm_half(y)
        }, 1e-6);
        check_grad(x0.clone(), |t, x| {
            let y = t.crop4(x, 3, 2);
            t.sq_norm_half(y)
        }, 1e-6);
        check_grad(x0.clone(), |t, x| {
            let y = t.permute_nhwc(x);
            let f = t.reshape(y, &[2 * 4 * 4, 3]);
            let g = t.gather_rows(f, vec![0, 5, 5, 31]);
            t.sq_norm_half(g)
        }, 1e-6);
    }

    #[test]
    fn permute_nhwc_layout() {
        let mut t = Tape::new();
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        // value = c*100 + h*10 + w
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    x[[0, c, h, w]] = (c * 100 + h * 10 + w) as f64;
                }
            }
        }
        let xi = t.leaf(x.into_dyn(), false);
        let y = t.permute_nhwc(xi);
        let yv = t.value(y);
        assert_eq!(yv.shape(), [1, 2, 2, 2]);
        assert_eq!(yv[[0, 1, 0, 1]], 110.0); // h=1, w=0, c=1
        assert_eq!(yv[[0, 0, 1, 0]], 1.0); // h=0, w=1, c=0
    }

    #[test]
    fn grad_roi_max_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_arr(&mut rng, &[1, 2, 6, 6]);
        let rois = vec![
            RoiSpec { image_index: 0, rect: [0.0, 0.0, 48.0, 48.0] },
            RoiSpec { image_index: 0, rect: [16.0, 8.0, 80.0, 72.0] },
        ];
        check_grad(x0, move |t, x| {
            let y = t.roi_max_pool(x, &rois, 16, 2);
            t.sq_norm_half(y)
        }, 1e-5);
    }

    #[test]
    fn roi_pool_empty_bin_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 5.0), false);
        // roi entirely left of the image clamps to zero width: every bin empty
        let rois = vec![RoiSpec { image_index: 0, rect: [-64.0, 0.0, -32.0, 32.0] }];
        let y = t.roi_max_pool(x, &rois, 16, 2);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grl_forward_identity_backward_reversal() {
        for lambda in [0.0, 0.5, 1.0] {
            let mut t = Tape::new();
            let x0 = ndarray::arr1(&[1.5, -2.0, 0.25]).into_dyn();
            let x = t.leaf(x0.clone(), true);
            let y = t.grl(x, lambda);
            assert_eq!(t.value(y), &x0, "forward must be the identity");
            let s = t.sq_norm_half(y);
            let mut g = t.backward(s);
            let gx = g.take_or_zeros(x, &[3]);
            // d(sq_norm_half)/dy = y, reversed: -lambda * y, exactly.
            for (gi, xi) in gx.iter().zip(x0.iter()) {
                assert_eq!(*gi, -lambda * xi);
            }
        }
    }

    #[test]
    fn grad_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits0 = rand_arr(&mut rng, &[5, 4]);
        check_grad(logits0, |t, x| t.softmax_ce(x, vec![0, 3, 1, 1, 2]), 1e-6);

        let z0 = rand_arr(&mut rng, &[6]) * 3.0;
        let targets = ArrayD::from_shape_vec(IxDyn(&[6]), vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        check_grad(z0, |t, x| t.bce_with_logits(x, targets.clone()), 1e-6);

        let p0 = rand_arr(&mut rng, &[8]) * 2.0;
        let tgt = rand_arr(&mut rng, &[8]);
        // keep |p - t| away from the smooth-l1 kink at 1
        let p_adj = {
            let mut p = p0.clone();
            for (pv, tv) in p.iter_mut().zip(tgt.iter()) {
                if ((*pv - tv).abs() - 1.0).abs() < 0.05 {
                    *pv += 0.1;
                }
                if (*pv - tv).abs() < 0.02 {
                    *pv += 0.05; // and away from the l1 kink at 0
                }
            }
            p
        };
        check_grad(p_adj.clone(), |t, x| t.smooth_l1_mean(x, tgt.clone()), 1e-6);
        check_grad(p_adj, |t, x| t.l1_mean(x, tgt.clone()), 1e-6);
        let x0 = rand_arr(&mut rng, &[3, 3]);
        check_grad(x0, |t, x| t.sq_norm_half(x), 1e-6);
    }

    #[test]
    fn softmax_ce_hand_value() {
        // logits [0, ln 3]: p = [0.25, 0.75]; target 1 -> loss = -ln 0.75
        let mut t = Tape::new();
        let l = t.leaf(ndarray::arr2(&[[0.0, 3f64.ln()]]).into_dyn(), false);
        let y = t.softmax_ce(l, vec![1]);
        assert!((t.scalar(y) - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_value() {
        // z = 0, target 1: loss = ln 2
        let mut t = Tape::new();
        let z = t.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0), false);
        let y = t.bce_with_logits(z, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        assert!((t.scalar(y) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_hand_values() {
        // diffs [0.5, 2.0]: 0.5*0.25 = 0.125 and 2 - 0.5 = 1.5, mean = 0.8125
        let mut t = Tape::new();
        let p = t.leaf(ndarray::arr1(&[0.5, 2.0]).into_dyn(), false);
        let y = t.smooth_l1_mean(p, ArrayD::zeros(IxDyn(&[2])));
        assert!((t.scalar(y) - (0.125 + 1.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_weighted_sum_composite() {
        // No GRL here: finite differences cannot observe a reversed
        // gradient, by construction. The GRL has its own exactness test.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = rand_arr(&mut rng, &[4]);
        check_grad(x0, |t, x| {
            let a = t.sq_norm_half(x);
            let e = t.exp(x);
            let b = t.sq_norm_half(e);
            let s = t.sigmoid(x);
            let c = t.l1_mean(s, ArrayD::zeros(IxDyn(&[4])));
            t.weighted_sum(vec![(a, 1.0), (b, 0.25), (c, 0.1)])
        }, 1e-5);
    }

    #[test]
    fn grad_decode_box_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d0 = rand_arr(&mut rng, &[1, 4]);
        let anchor = [10.0, 20.0, 42.0, 52.0];
        check_grad(d0, move |t, d| {
            let y = t.decode_box_norm(d, anchor, 64.0, 64.0, 4.0);
            t.sq_norm_half(y)
        }, 1e-5);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut t = Tape::new();
        let x = t.leaf(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let y = t.gather_rows(x, vec![0, 0, 1]);
        let s = sum_all(&mut t, y);
        let mut g = t.backward(s);
        let gx = g.take_or_zeros(x, &[2, 2]);
        assert_eq!(gx[[0, 0]], 2.0); // row 0 gathered twice
        assert_eq!(gx[[1, 0]], 1.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let b = t.constant(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let m = t.mul(a, b);
        let s = t.sq_norm_half(m);
        let g = t.backward(s);
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }
}
