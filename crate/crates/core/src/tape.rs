//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every differentiable operation the pipeline needs lives here: 2D/3D
//! convolution with zero padding, 2x2 max pooling, bilinear sampling,
//! elementwise ops, concatenation, reductions and the soft voxel-mask
//! back-projection. Nodes are appended in execution order and `backward`
//! walks them in exact reverse order, accumulating gradients (a tensor
//! feeding two ops receives the sum of both contributions).
//!
//! All arithmetic is `f64` and single-threaded, so forward and backward
//! passes are bit-deterministic for fixed inputs.

use crate::tensor::{check_same_dims, Tensor, TensorError};
use std::sync::Arc;

/// Reference to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Per-pixel, per-height-plane flat voxel indices for 3D->2D lookups.
/// `-1` marks a ray that misses the grid (or is degenerate) at that plane.
#[derive(Debug, Clone)]
pub struct VoxelLookup {
    pub out_h: usize,
    pub out_w: usize,
    pub planes: usize,
    pub volume_len: usize,
    pub idx: Vec<i32>,
}

impl VoxelLookup {
    pub fn pixel_count(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    BilinearSample {
        input: NodeId,
        coords: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Affine {
        input: NodeId,
        mul: f64,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Arc<Vec<f64>>,
    },
    Reshape {
        input: NodeId,
    },
    SoftBackproject {
        volume: NodeId,
        lut: Arc<VoxelLookup>,
        tau: f64,
        // sigmoid activations saved at forward, (pixel, plane) row-major
        svals: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += w * *s;
    }
}

/// Deterministic 4-lane dot product; fixed association order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Leaf holding `t`; tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Untracked leaf (inputs, targets, cached grids).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    // ---- forward ops -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.rank() != 3 || k.rank() != 4 || b.rank() != 1 {
            return Err(TensorError::Invalid(format!(
                "conv2d expects input rank 3, kernel rank 4, bias rank 1; got {}/{}/{}",
                x.rank(),
                k.rank(),
                b.rank()
            )));
        }
        let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (c_out, kc, kh, kw) = (k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]);
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_out, c_in, kh, kw],
                got: k.dims().to_vec(),
                context: "conv2d kernel channels".into(),
            });
        }
        if b.dims()[0] != c_out {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_out],
                got: b.dims().to_vec(),
                context: "conv2d bias".into(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let out = conv2d_forward(x, k, b, c_in, h, w, c_out, kh, kw);
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.rank() != 4 || k.rank() != 5 || b.rank() != 1 {
            return Err(TensorError::Invalid(format!(
                "conv3d expects input rank 4, kernel rank 5, bias rank 1; got {}/{}/{}",
                x.rank(),
                k.rank(),
                b.rank()
            )));
        }
        let (c_in, d, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (c_out, kc, kd, kh, kw) = (
            k.dims()[0],
            k.dims()[1],
            k.dims()[2],
            k.dims()[3],
            k.dims()[4],
        );
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_out, c_in, kd, kh, kw],
                got: k.dims().to_vec(),
                context: "conv3d kernel channels".into(),
            });
        }
        if b.dims()[0] != c_out {
            return Err(TensorError::ShapeMismatch {
                expected: vec![c_out],
                got: b.dims().to_vec(),
                context: "conv3d bias".into(),
            });
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv3d kernel extents must be odd, got {kd}x{kh}x{kw}"
            )));
        }
        let out = conv3d_forward(x, k, b, c_in, d, h, w, c_out, kd, kh, kw);
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(TensorError::Invalid(format!(
                "maxpool2 expects rank 3, got {}",
                x.rank()
            )));
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "maxpool2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        let data = x.data();
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    // ties go to the first element in scan order
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let idx = (ci * h + iy) * w + ix;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Sample `input[C,H,W]` at continuous pixel coordinates `coords[2,M]`
    /// (row 0 = x along width, row 1 = y along height). Coordinates outside
    /// `[0,W-1] x [0,H-1]` read as zero.
    pub fn bilinear_sample(
        &mut self,
        input: NodeId,
        coords: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (x, cds) = (self.value(input), self.value(coords));
        if x.rank() != 3 || cds.rank() != 2 || cds.dims()[0] != 2 {
            return Err(TensorError::Invalid(format!(
                "bilinear_sample expects input [C,H,W] and coords [2,M]; got {:?} and {:?}",
                x.dims(),
                cds.dims()
            )));
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let m = cds.dims()[1];
        let mut out = vec![0.0; c * m];
        let data = x.data();
        let cd = cds.data();
        for j in 0..m {
            let px = cd[j];
            let py = cd[m + j];
            if !in_sample_bounds(px, py, w, h) {
                continue;
            }
            let (x0, x1, dx) = lattice(px, w);
            let (y0, y1, dy) = lattice(py, h);
            let w00 = (1.0 - dx) * (1.0 - dy);
            let w01 = dx * (1.0 - dy);
            let w10 = (1.0 - dx) * dy;
            let w11 = dx * dy;
            for ci in 0..c {
                let base = ci * h * w;
                out[ci * m + j] = w00 * data[base + y0 * w + x0]
                    + w01 * data[base + y0 * w + x1]
                    + w10 * data[base + y1 * w + x0]
                    + w11 * data[base + y1 * w + x1];
            }
        }
        let rg = self.requires(input) || self.requires(coords);
        Ok(self.push(
            Tensor::new(vec![c, m], out)?,
            Op::BilinearSample { input, coords },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.requires(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).dims().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let d = self.value(id).dims();
            if d.len() != first.len()
                || d.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    expected: first.clone(),
                    got: d.to_vec(),
                    context: format!("concat along axis {axis}"),
                });
            }
            axis_total += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_block = axis_total * inner;
        let mut out = vec![0.0; outer * out_block];
        let mut offset = 0usize;
        for &id in inputs {
            let t = self.value(id);
            let block = t.dims()[axis] * inner;
            let data = t.data();
            for o in 0..outer {
                out[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&data[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let rg = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(
            Tensor::new(out_dims, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        check_same_dims(a.dims(), b.dims(), "add")?;
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let dims = a.dims().to_vec();
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(Tensor::new(dims, data)?, Op::Add { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.affine(input, factor, 0.0)
    }

    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> NodeId {
        let out = self.value(input).map(|v| mul * v + add);
        let rg = self.requires(input);
        self.push(out, Op::Affine { input, mul }, rg)
    }

    /// Mean-square error over all elements: `sum((pred-target)^2) / numel`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        check_same_dims(p.dims(), t.dims(), "mse")?;
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (a, b) in p.data().iter().zip(t.data().iter()) {
            let d = a - b;
            acc += d * d;
        }
        let rg = self.requires(pred) || self.requires(target);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        let rg = self.requires(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Fixed-weight linear functional `sum_i w_i * x_i` (weights untracked).
    pub fn weighted_sum(
        &mut self,
        input: NodeId,
        weights: Arc<Vec<f64>>,
    ) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(TensorError::Invalid(format!(
                "weighted_sum: {} elements vs {} weights",
                x.len(),
                weights.len()
            )));
        }
        let s = dot(x.data(), &weights);
        let rg = self.requires(input);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, dims: Vec<usize>) -> Result<NodeId, TensorError> {
        let out = self.value(input).clone().reshaped(dims)?;
        let rg = self.requires(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Differentiable surrogate for the hard back-projection mask:
    /// `1 - prod_l (1 - sigmoid((G[vox] - threshold)/tau))` per pixel, with
    /// missed lookups contributing nothing.
    pub fn soft_backproject(
        &mut self,
        volume: NodeId,
        lut: Arc<VoxelLookup>,
        threshold: f64,
        tau: f64,
    ) -> Result<NodeId, TensorError> {
        let g = self.value(volume);
        if g.len() != lut.volume_len {
            return Err(TensorError::Invalid(format!(
                "soft_backproject: volume has {} voxels, lookup expects {}",
                g.len(),
                lut.volume_len
            )));
        }
        if tau <= 0.0 {
            return Err(TensorError::Invalid(format!(
                "soft_backproject: tau must be positive, got {tau}"
            )));
        }
        let pixels = lut.pixel_count();
        let planes = lut.planes;
        let data = g.data();
        let mut out = vec![0.0; pixels];
        let mut svals = vec![0.0; pixels * planes];
        for p in 0..pixels {
            let mut prod = 1.0;
            for l in 0..planes {
                let i = lut.idx[p * planes + l];
                if i >= 0 {
                    let s = sigmoid((data[i as usize] - threshold) / tau);
                    svals[p * planes + l] = s;
                    prod *= 1.0 - s;
                }
            }
            out[p] = 1.0 - prod;
        }
        let rg = self.requires(volume);
        let value = Tensor::new(vec![1, lut.out_h, lut.out_w], out)?;
        Ok(self.push(
            value,
            Op::SoftBackproject {
                volume,
                lut,
                tau,
                svals,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Pull a node's grad buffer out of the tape (zero-allocated if absent)
    /// so the caller can write it while reading other nodes' values.
    fn take_grad(&mut self, id: NodeId) -> Vec<f64> {
        let n = self.nodes[id.0].value.len();
        self.grads[id.0].take().unwrap_or_else(|| vec![0.0; n])
    }

    fn put_grad(&mut self, id: NodeId, buf: Vec<f64>) {
        self.grads[id.0] = Some(buf);
    }

    /// Backpropagate from `root`, accumulating gradients into every node
    /// with `requires_grad`. The root is seeded with ones. Intermediate
    /// node grads are consumed during the sweep; leaf grads remain
    /// queryable through `grad`.
    pub fn backward(&mut self, root: NodeId) {
        let mut seed = self.take_grad(root);
        seed.iter_mut().for_each(|v| *v = 1.0);
        self.put_grad(root, seed);
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none()
                || !self.nodes[i].requires_grad
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            self.backward_node(i);
        }
    }

    fn backward_node(&mut self, i: usize) {
        // Take the output grad; intermediate grads are not needed afterwards.
        let gout = self.grads[i].take().expect("grad present");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    conv2d_backward_input(
                        &gout,
                        &self.nodes[kernel.0].value,
                        &mut gin,
                        self.nodes[input.0].value.dims(),
                    );
                    self.put_grad(input, gin);
                }
                if self.requires(kernel) {
                    let mut gk = self.take_grad(kernel);
                    let k_dims = self.nodes[kernel.0].value.dims().to_vec();
                    conv2d_backward_kernel(&gout, &self.nodes[input.0].value, &mut gk, &k_dims);
                    self.put_grad(kernel, gk);
                }
                if self.requires(bias) {
                    let c_out = self.nodes[bias.0].value.len();
                    let plane = gout.len() / c_out;
                    let mut gb = self.take_grad(bias);
                    for (co, g) in gb.iter_mut().enumerate() {
                        *g += gout[co * plane..(co + 1) * plane].iter().sum::<f64>();
                    }
                    self.put_grad(bias, gb);
                }
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    conv3d_backward_input(
                        &gout,
                        &self.nodes[kernel.0].value,
                        &mut gin,
                        self.nodes[input.0].value.dims(),
                    );
                    self.put_grad(input, gin);
                }
                if self.requires(kernel) {
                    let mut gk = self.take_grad(kernel);
                    let k_dims = self.nodes[kernel.0].value.dims().to_vec();
                    conv3d_backward_kernel(&gout, &self.nodes[input.0].value, &mut gk, &k_dims);
                    self.put_grad(kernel, gk);
                }
                if self.requires(bias) {
                    let c_out = self.nodes[bias.0].value.len();
                    let plane = gout.len() / c_out;
                    let mut gb = self.take_grad(bias);
                    for (co, g) in gb.iter_mut().enumerate() {
                        *g += gout[co * plane..(co + 1) * plane].iter().sum::<f64>();
                    }
                    self.put_grad(bias, gb);
                }
            }
            Op::MaxPool2 { input, .. } => {
                let input = *input;
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    if let Op::MaxPool2 { argmax, .. } = &self.nodes[i].op {
                        for (o, &src) in argmax.iter().enumerate() {
                            gin[src as usize] += gout[o];
                        }
                    }
                    self.put_grad(input, gin);
                }
            }
            Op::BilinearSample { input, coords } => {
                let (input, coords) = (*input, *coords);
                let (c, h, w) = {
                    let d = self.nodes[input.0].value.dims();
                    (d[0], d[1], d[2])
                };
                let m = self.nodes[coords.0].value.dims()[1];
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    let cd = self.nodes[coords.0].value.data();
                    for j in 0..m {
                        let px = cd[j];
                        let py = cd[m + j];
                        if !in_sample_bounds(px, py, w, h) {
                            continue;
                        }
                        let (x0, x1, dx) = lattice(px, w);
                        let (y0, y1, dy) = lattice(py, h);
                        let w00 = (1.0 - dx) * (1.0 - dy);
                        let w01 = dx * (1.0 - dy);
                        let w10 = (1.0 - dx) * dy;
                        let w11 = dx * dy;
                        for ci in 0..c {
                            let g = gout[ci * m + j];
                            let base = ci * h * w;
                            gin[base + y0 * w + x0] += w00 * g;
                            gin[base + y0 * w + x1] += w01 * g;
                            gin[base + y1 * w + x0] += w10 * g;
                            gin[base + y1 * w + x1] += w11 * g;
                        }
                    }
                    self.put_grad(input, gin);
                }
                if self.requires(coords) {
                    let mut gc = self.take_grad(coords);
                    let cd = self.nodes[coords.0].value.data();
                    let data = self.nodes[input.0].value.data();
                    for j in 0..m {
                        let px = cd[j];
                        let py = cd[m + j];
                        if !in_sample_bounds(px, py, w, h) {
                            continue;
                        }
                        let (x0, x1, dx) = lattice(px, w);
                        let (y0, y1, dy) = lattice(py, h);
                        for ci in 0..c {
                            let g = gout[ci * m + j];
                            let base = ci * h * w;
                            let v00 = data[base + y0 * w + x0];
                            let v01 = data[base + y0 * w + x1];
                            let v10 = data[base + y1 * w + x0];
                            let v11 = data[base + y1 * w + x1];
                            gc[j] += g * ((1.0 - dy) * (v01 - v00) + dy * (v11 - v10));
                            gc[m + j] += g * ((1.0 - dx) * (v10 - v00) + dx * (v11 - v01));
                        }
                    }
                    self.put_grad(coords, gc);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    let x = self.nodes[input.0].value.data();
                    for (g, (&xv, go)) in gin.iter_mut().zip(x.iter().zip(gout.iter())) {
                        if xv > 0.0 {
                            *g += *go;
                        }
                    }
                    self.put_grad(input, gin);
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_dims = self.nodes[i].value.dims().to_vec();
                let outer: usize = out_dims[..axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let out_block = out_dims[axis] * inner;
                let mut offset = 0usize;
                for id in inputs {
                    let block = self.nodes[id.0].value.dims()[axis] * inner;
                    if self.requires(id) {
                        let mut gin = self.take_grad(id);
                        for o in 0..outer {
                            axpy(
                                &mut gin[o * block..(o + 1) * block],
                                &gout[o * out_block + offset..o * out_block + offset + block],
                                1.0,
                            );
                        }
                        self.put_grad(id, gin);
                    }
                    offset += block;
                }
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                for id in [lhs, rhs] {
                    if self.requires(id) {
                        let mut g = self.take_grad(id);
                        axpy(&mut g, &gout, 1.0);
                        self.put_grad(id, g);
                    }
                }
            }
            Op::Affine { input, mul } => {
                let (input, mul) = (*input, *mul);
                if self.requires(input) {
                    let mut g = self.take_grad(input);
                    axpy(&mut g, &gout, mul);
                    self.put_grad(input, g);
                }
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = self.nodes[pred.0].value.len() as f64;
                let g = gout[0] * 2.0 / n;
                if self.requires(pred) {
                    let mut gp = self.take_grad(pred);
                    let p = self.nodes[pred.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    for (dst, (a, b)) in gp.iter_mut().zip(p.iter().zip(t.iter())) {
                        *dst += g * (a - b);
                    }
                    self.put_grad(pred, gp);
                }
                if self.requires(target) {
                    let mut gt = self.take_grad(target);
                    let p = self.nodes[pred.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    for (dst, (a, b)) in gt.iter_mut().zip(p.iter().zip(t.iter())) {
                        *dst -= g * (a - b);
                    }
                    self.put_grad(target, gt);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    let g = gout[0];
                    gin.iter_mut().for_each(|v| *v += g);
                    self.put_grad(input, gin);
                }
            }
            Op::WeightedSum { input, weights } => {
                let input = *input;
                let weights = weights.clone();
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    axpy(&mut gin, &weights, gout[0]);
                    self.put_grad(input, gin);
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if self.requires(input) {
                    let mut gin = self.take_grad(input);
                    axpy(&mut gin, &gout, 1.0);
                    self.put_grad(input, gin);
                }
            }
            Op::SoftBackproject {
                volume, lut, tau, ..
            } => {
                let volume = *volume;
                let lut = lut.clone();
                let tau = *tau;
                if self.requires(volume) {
                    let mut gv = self.take_grad(volume);
                    let planes = lut.planes;
                    let svals = match &self.nodes[i].op {
                        Op::SoftBackproject { svals, .. } => svals,
                        _ => unreachable!(),
                    };
                    let mut pre = vec![1.0; planes + 1];
                    let mut suf = vec![1.0; planes + 1];
                    for p in 0..lut.pixel_count() {
                        let g = gout[p];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &svals[p * planes..(p + 1) * planes];
                        pre[0] = 1.0;
                        for l in 0..planes {
                            pre[l + 1] = pre[l] * (1.0 - row[l]);
                        }
                        suf[planes] = 1.0;
                        for l in (0..planes).rev() {
                            suf[l] = suf[l + 1] * (1.0 - row[l]);
                        }
                        for l in 0..planes {
                            let idx = lut.idx[p * planes + l];
                            if idx < 0 {
                                continue;
                            }
                            let s = row[l];
                            let others = pre[l] * suf[l + 1];
                            gv[idx as usize] += g * others * s * (1.0 - s) / tau;
                        }
                    }
                    self.put_grad(volume, gv);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn in_sample_bounds(px: f64, py: f64, w: usize, h: usize) -> bool {
    px >= 0.0 && px <= (w - 1) as f64 && py >= 0.0 && py <= (h - 1) as f64
}

/// Floor/ceil lattice neighbors with the fractional offset, clamped so that
/// a coordinate exactly on the far edge stays in bounds (its weight is 0).
#[inline]
fn lattice(p: f64, extent: usize) -> (usize, usize, f64) {
    let p0 = p.floor();
    let i0 = p0 as usize;
    let frac = p - p0;
    let i1 = if i0 + 1 < extent { i0 + 1 } else { i0 };
    (i0, i1, frac)
}

// ---- convolution kernels ---------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; c_out * h * w];
    let xd = x.data();
    let kd = k.data();
    let bd = b.data();
    for co in 0..c_out {
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        oplane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..c_in {
            let iplane = &xd[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * c_in + ci) * kh * kw;
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wk = kd[kbase + ky * kw + kx];
                    for y in y_lo..y_hi {
                        let iy = (y as isize + sy) as usize;
                        let irow = &iplane[iy * w + ((x_lo as isize + sx) as usize)
                            ..iy * w + ((x_hi as isize + sx) as usize)];
                        axpy(&mut oplane[y * w + x_lo..y * w + x_hi], irow, wk);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out).expect("conv2d output shape")
}

fn conv2d_backward_input(gout: &[f64], k: &Tensor, gin: &mut [f64], x_dims: &[usize]) {
    let (c_in, h, w) = (x_dims[0], x_dims[1], x_dims[2]);
    let (c_out, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let kd = k.data();
    for co in 0..c_out {
        let gplane = &gout[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let iplane = &mut gin[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * c_in + ci) * kh * kw;
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wk = kd[kbase + ky * kw + kx];
                    for y in y_lo..y_hi {
                        let iy = (y as isize + sy) as usize;
                        let irow = &mut iplane[iy * w + ((x_lo as isize + sx) as usize)
                            ..iy * w + ((x_hi as isize + sx) as usize)];
                        axpy(irow, &gplane[y * w + x_lo..y * w + x_hi], wk);
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(gout: &[f64], x: &Tensor, gk: &mut [f64], k_dims: &[usize]) {
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (c_out, kh, kw) = (k_dims[0], k_dims[2], k_dims[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    for co in 0..c_out {
        let gplane = &gout[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let iplane = &xd[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * c_in + ci) * kh * kw;
            for ky in 0..kh {
                let sy = ky as isize - ph as isize;
                let y_lo = (-sy).max(0) as usize;
                let y_hi = ((h as isize - sy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let sx = kx as isize - pw as isize;
                    let x_lo = (-sx).max(0) as usize;
                    let x_hi = ((w as isize - sx).min(w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + sy) as usize;
                        acc += dot(
                            &gplane[y * w + x_lo..y * w + x_hi],
                            &iplane[iy * w + ((x_lo as isize + sx) as usize)
                                ..iy * w + ((x_hi as isize + sx) as usize)],
                        );
                    }
                    gk[kbase + ky * kw + kx] += acc;
                }
            }
        }
    }
}

// 3D convolutions are the hot path. Inputs are copied into zero-padded
// planes whose rows carry extra tail slack, so the inner kernels never
// branch on boundaries: they sweep 8-wide output chunks and apply the whole
// in-plane (kh x kw) stencil to each chunk while it sits in registers.
// Depth taps that would read an all-zero padding plane are skipped.
const CHUNK: usize = 8;

struct Pad3 {
    pd: usize,
    ph: usize,
    pw: usize,
    /// Padded row width, chunk-aligned with kw slack at the tail.
    xw: usize,
    rows: usize,
    planes: usize,
}

impl Pad3 {
    fn plane(&self) -> usize {
        self.rows * self.xw
    }
}

fn pad3_layout(d: usize, h: usize, w: usize, kd: usize, kh: usize, kw: usize) -> Pad3 {
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let xw = (w + 2 * pw).div_ceil(CHUNK) * CHUNK + kw;
    Pad3 {
        pd,
        ph,
        pw,
        xw,
        rows: h + 2 * ph,
        planes: d + 2 * pd,
    }
}

fn pad3_fill(src: &[f64], c: usize, d: usize, h: usize, w: usize, p: &Pad3) -> Vec<f64> {
    let mut buf = vec![0.0; c * p.planes * p.plane()];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ci * d + z) * h + y) * w;
                let t = (ci * p.planes + z + p.pd) * p.plane() + (y + p.ph) * p.xw + p.pw;
                buf[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    buf
}

/// Output-z range for tap `kz` where the padded input plane is non-zero.
#[inline]
fn z_range(kz: usize, d: usize, pd: usize) -> (usize, usize) {
    let lo = pd.saturating_sub(kz);
    let hi = (pd + d).saturating_sub(kz).min(d);
    (lo, hi)
}

/// `out[y][0..ow] += sum_{ky,kx} wts[ky*kw+kx] * xplane[y+ky][cstart+kx..]`,
/// accumulated chunk-by-chunk in registers. `out` rows are `ow` wide
/// (chunk-aligned); `xplane` rows are `xw` wide with enough tail slack for
/// the widest shift.
#[inline]
fn stencil2d_accum(
    out: &mut [f64],
    xplane: &[f64],
    wts: &[f64],
    h: usize,
    ow: usize,
    xw: usize,
    kh: usize,
    kw: usize,
) {
    for y in 0..h {
        let orow = &mut out[y * ow..(y + 1) * ow];
        let xrows = &xplane[y * xw..];
        let mut cstart = 0;
        while cstart < ow {
            let mut acc = [0.0f64; CHUNK];
            acc.copy_from_slice(&orow[cstart..cstart + CHUNK]);
            for ky in 0..kh {
                let xrow = &xrows[ky * xw + cstart..ky * xw + cstart + kw - 1 + CHUNK];
                for kx in 0..kw {
                    let wk = wts[ky * kw + kx];
                    let src = &xrow[kx..kx + CHUNK];
                    for i in 0..CHUNK {
                        acc[i] = wk.mul_add(src[i], acc[i]);
                    }
                }
            }
            orow[cstart..cstart + CHUNK].copy_from_slice(&acc);
            cstart += CHUNK;
        }
    }
}

/// Fully unrolled 5x5 variant of `stencil2d_accum`; the tap loops fold to
/// straight-line FMA over register-resident chunks.
#[inline]
fn stencil2d_accum_5x5(
    out: &mut [f64],
    xplane: &[f64],
    wts: &[f64; 25],
    h: usize,
    ow: usize,
    xw: usize,
) {
    for y in 0..h {
        let orow = &mut out[y * ow..(y + 1) * ow];
        let xrows = &xplane[y * xw..];
        let mut cstart = 0;
        while cstart < ow {
            let mut acc = [0.0f64; CHUNK];
            acc.copy_from_slice(&orow[cstart..cstart + CHUNK]);
            for ky in 0..5 {
                let base = ky * xw + cstart;
                let xrow = &xrows[base..base + 4 + CHUNK];
                for kx in 0..5 {
                    let wk = wts[ky * 5 + kx];
                    let src = &xrow[kx..kx + CHUNK];
                    for i in 0..CHUNK {
                        acc[i] = wk.mul_add(src[i], acc[i]);
                    }
                }
            }
            orow[cstart..cstart + CHUNK].copy_from_slice(&acc);
            cstart += CHUNK;
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn stencil2d_dispatch(
    out: &mut [f64],
    xplane: &[f64],
    wts: &[f64],
    h: usize,
    ow: usize,
    xw: usize,
    kh: usize,
    kw: usize,
) {
    if kh == 5 && kw == 5 {
        stencil2d_accum_5x5(out, xplane, wts.try_into().expect("25 taps"), h, ow, xw);
    } else {
        stencil2d_accum(out, xplane, wts, h, ow, xw, kh, kw);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    c_in: usize,
    d: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kd: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let p = pad3_layout(d, h, w, kd, kh, kw);
    let xp = pad3_fill(x.data(), c_in, d, h, w, &p);
    let kdata = k.data();
    let bd = b.data();
    let ow = w.div_ceil(CHUNK) * CHUNK;
    let mut out = vec![0.0; c_out * d * h * w];
    let mut out_pad = vec![0.0; d * h * ow];
    for co in 0..c_out {
        out_pad.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * kd * kh * kw;
            for kz in 0..kd {
                let (z_lo, z_hi) = z_range(kz, d, p.pd);
                let wts = &kdata[kbase + kz * kh * kw..kbase + (kz + 1) * kh * kw];
                for z in z_lo..z_hi {
                    let xplane = &xp[(ci * p.planes + z + kz) * p.plane()..];
                    stencil2d_dispatch(
                        &mut out_pad[z * h * ow..(z + 1) * h * ow],
                        xplane,
                        wts,
                        h,
                        ow,
                        p.xw,
                        kh,
                        kw,
                    );
                }
            }
        }
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * ow;
                let t = ((co * d + z) * h + y) * w;
                out[t..t + w].copy_from_slice(&out_pad[s..s + w]);
            }
        }
    }
    Tensor::new(vec![c_out, d, h, w], out).expect("conv3d output shape")
}

fn conv3d_backward_input(gout: &[f64], k: &Tensor, gin: &mut [f64], x_dims: &[usize]) {
    let (c_in, d, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (c_out, kd, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3], k.dims()[4]);
    let p = pad3_layout(d, h, w, kd, kh, kw);
    let gp = pad3_fill(gout, c_out, d, h, w, &p);
    let kdata = k.data();
    let ow = w.div_ceil(CHUNK) * CHUNK;
    let mut acc = vec![0.0; d * h * ow];
    let mut flipped = [0.0f64; 49]; // kh * kw <= 7 * 7
    for ci in 0..c_in {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..c_out {
            let kbase = (co * c_in + ci) * kd * kh * kw;
            for kz in 0..kd {
                let (z_lo, z_hi) = z_range(kz, d, p.pd);
                // input grad correlates with the flipped kernel
                for ky in 0..kh {
                    for kx in 0..kw {
                        flipped[ky * kw + kx] = kdata[kbase
                            + ((kd - 1 - kz) * kh + (kh - 1 - ky)) * kw
                            + (kw - 1 - kx)];
                    }
                }
                for z in z_lo..z_hi {
                    let gplane = &gp[(co * p.planes + z + kz) * p.plane()..];
                    stencil2d_dispatch(
                        &mut acc[z * h * ow..(z + 1) * h * ow],
                        gplane,
                        &flipped[..kh * kw],
                        h,
                        ow,
                        p.xw,
                        kh,
                        kw,
                    );
                }
            }
        }
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * ow;
                let t = ((ci * d + z) * h + y) * w;
                axpy(&mut gin[t..t + w], &acc[s..s + w], 1.0);
            }
        }
    }
}

fn conv3d_backward_kernel(gout: &[f64], x: &Tensor, gk: &mut [f64], k_dims: &[usize]) {
    let (c_in, d, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (c_out, kd, kh, kw) = (k_dims[0], k_dims[2], k_dims[3], k_dims[4]);
    let p = pad3_layout(d, h, w, kd, kh, kw);
    let xp = pad3_fill(x.data(), c_in, d, h, w, &p);
    let ow = w.div_ceil(CHUNK) * CHUNK;
    // output grads with zero tail columns so full chunks are safe
    let mut gcols = vec![0.0; c_out * d * h * ow];
    for co in 0..c_out {
        for z in 0..d {
            for y in 0..h {
                let s = ((co * d + z) * h + y) * w;
                let t = ((co * d + z) * h + y) * ow;
                gcols[t..t + w].copy_from_slice(&gout[s..s + w]);
            }
        }
    }
    let taps = kh * kw;
    let mut acc = vec![0.0f64; taps * CHUNK];
    for co in 0..c_out {
        for ci in 0..c_in {
            let xbase = ci * p.planes * p.plane();
            let kbase = (co * c_in + ci) * kd * taps;
            for kz in 0..kd {
                let (z_lo, z_hi) = z_range(kz, d, p.pd);
                acc.iter_mut().for_each(|v| *v = 0.0);
                for z in z_lo..z_hi {
                    let xplane = xbase + (z + kz) * p.plane();
                    for y in 0..h {
                        let grow =
                            &gcols[((co * d + z) * h + y) * ow..((co * d + z) * h + y + 1) * ow];
                        let mut cstart = 0;
                        while cstart < ow {
                            let mut gvec = [0.0f64; CHUNK];
                            gvec.copy_from_slice(&grow[cstart..cstart + CHUNK]);
                            if gvec.iter().all(|v| *v == 0.0) {
                                cstart += CHUNK;
                                continue;
                            }
                            if kh == 5 && kw == 5 {
                                let a200: &mut [f64; 200] =
                                    (&mut acc[..200]).try_into().expect("25 taps");
                                for ky in 0..5 {
                                    let base = xplane + (y + ky) * p.xw + cstart;
                                    let xrow = &xp[base..base + 4 + CHUNK];
                                    for kx in 0..5 {
                                        let src = &xrow[kx..kx + CHUNK];
                                        let off = (ky * 5 + kx) * CHUNK;
                                        for i in 0..CHUNK {
                                            a200[off + i] =
                                                gvec[i].mul_add(src[i], a200[off + i]);
                                        }
                                    }
                                }
                            } else {
                                for ky in 0..kh {
                                    let base = xplane + (y + ky) * p.xw + cstart;
                                    let xrow = &xp[base..base + kw - 1 + CHUNK];
                                    let arow =
                                        &mut acc[ky * kw * CHUNK..(ky + 1) * kw * CHUNK];
                                    for kx in 0..kw {
                                        let src = &xrow[kx..kx + CHUNK];
                                        let dst = &mut arow[kx * CHUNK..(kx + 1) * CHUNK];
                                        for i in 0..CHUNK {
                                            dst[i] = gvec[i].mul_add(src[i], dst[i]);
                                        }
                                    }
                                }
                            }
                            cstart += CHUNK;
                        }
                    }
                }
                for t in 0..taps {
                    gk[kbase + kz * taps + t] += acc[t * CHUNK..(t + 1) * CHUNK].iter().sum::<f64>();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(dims.to_vec(), data).unwrap()
    }

    fn tracked(dims: &[usize], data: Vec<f64>) -> Tensor {
        let mut t = tensor(dims, data);
        t.requires_grad = true;
        t
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        let k = tape.leaf(tensor(&[1, 1, 1, 1], vec![1.0]));
        let b = tape.leaf(tensor(&[1], vec![0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_zero_input_yields_bias_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = tape.leaf(tensor(&[3, 2, 3, 3], vec![0.7; 3 * 2 * 9]));
        let b = tape.leaf(tensor(&[3], vec![1.0, -2.0, 0.5]));
        let y = tape.conv2d(x, k, b).unwrap();
        let out = tape.value(y);
        assert_eq!(out.dims(), &[3, 4, 4]);
        for co in 0..3 {
            for i in 0..16 {
                assert_eq!(out.data()[co * 16 + i], [1.0, -2.0, 0.5][co]);
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.conv2d(x, k, b).is_err());
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()));
        let k = tape.leaf(tensor(&[1, 1, 1, 1, 1], vec![1.0]));
        let b = tape.leaf(tensor(&[1], vec![0.0]));
        let y = tape.conv3d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv3d_ones_kernel_box_impulse_response() {
        let mut tape = Tape::new();
        let mut delta = Tensor::zeros(&[1, 7, 7, 7]);
        delta.set4(0, 3, 3, 3, 1.0);
        let x = tape.leaf(delta);
        let k = tape.leaf(tensor(&[1, 1, 3, 3, 5], vec![1.0; 45]));
        let b = tape.leaf(tensor(&[1], vec![0.0]));
        let y = tape.conv3d(x, k, b).unwrap();
        let out = tape.value(y);
        let support: usize = out.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(support, 3 * 3 * 5);
        assert_eq!(out.sum(), 45.0);
    }

    #[test]
    fn maxpool_single_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(&[1, 2, 2], vec![5.0; 4]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn bilinear_at_lattice_points_and_patch_center() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.leaf(tensor(&[2, 5], vec![
            0.0, 1.0, 0.0, 1.0, 0.5, // x
            0.0, 0.0, 1.0, 1.0, 0.5, // y
        ]));
        let y = tape.bilinear_sample(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 2.5]);
    }

    #[test]
    fn bilinear_out_of_bounds_reads_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 3], 7.0));
        let c = tape.leaf(tensor(&[2, 4], vec![
            -0.5, 2.5, 1.0, -1e6, // x
            1.0, 1.0, 3.0, -1e6, // y
        ]));
        let y = tape.bilinear_sample(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let same = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let p = tape.leaf(tensor(&[1], vec![2.0]));
        let t = tape.leaf(tensor(&[1], vec![0.0]));
        let m = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
    }

    #[test]
    fn concat_axis0_preserves_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2, 3], (0..6).map(|v| v as f64).collect()));
        let b = tape.leaf(tensor(&[2, 3], (6..12).map(|v| v as f64).collect()));
        let y = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(y).dims(), &[4, 3]);
        assert_eq!(
            tape.value(y).data(),
            (0..12).map(|v| v as f64).collect::<Vec<_>>().as_slice()
        );
        let bad = tape.leaf(tensor(&[2, 2], vec![0.0; 4]));
        assert!(tape.concat(&[a, bad], 0).is_err());
    }

    #[test]
    fn concat_middle_axis_interleaves_blocks() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2, 1, 2], vec![0.0, 1.0, 2.0, 3.0]));
        let b = tape.leaf(tensor(&[2, 2, 2], (4..12).map(|v| v as f64).collect()));
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).dims(), &[2, 3, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]
        );
    }

    #[test]
    fn dag_fanout_accumulates_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(&[2], vec![1.0, -2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, 2.0);
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn conv2d_is_linear_in_input() {
        let mut rng = 1234u64;
        let mut next = move || {
            // xorshift, deterministic test data
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng as f64 / u64::MAX as f64) - 0.5
        };
        let xa: Vec<f64> = (0..2 * 5 * 5).map(|_| next()).collect();
        let xb: Vec<f64> = (0..2 * 5 * 5).map(|_| next()).collect();
        let kd: Vec<f64> = (0..3 * 2 * 9).map(|_| next()).collect();
        let (alpha, beta) = (1.7, -0.6);

        let run = |input: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(tensor(&[2, 5, 5], input));
            let k = tape.leaf(tensor(&[3, 2, 3, 3], kd.clone()));
            let b = tape.leaf(Tensor::zeros(&[3]));
            let y = tape.conv2d(x, k, b).unwrap();
            tape.value(y).data().to_vec()
        };
        let mixed: Vec<f64> = xa
            .iter()
            .zip(xb.iter())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let ya = run(xa);
        let yb = run(xb);
        let ym = run(mixed);
        for i in 0..ya.len() {
            assert!((ym[i] - (alpha * ya[i] + beta * yb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_backproject_monotone_and_bounded() {
        let lut = Arc::new(VoxelLookup {
            out_h: 2,
            out_w: 2,
            planes: 2,
            volume_len: 8,
            idx: vec![0, 1, 2, 3, 4, 5, 6, -1],
        });
        let t = 1e-4;
        let tau = t / 10.0;
        let run = |vals: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let g = tape.leaf(tensor(&[1, 2, 2, 2], vals));
            let y = tape.soft_backproject(g, lut.clone(), t, tau).unwrap();
            tape.value(y).data().to_vec()
        };
        let lo = run(vec![0.0; 8]);
        for v in &lo {
            assert!(*v >= 0.0 && *v < 0.01, "zero volume gives near-zero mask, got {v}");
        }
        let hi = run(vec![1.0; 8]);
        for (a, b) in lo.iter().zip(hi.iter()) {
            assert!(b >= a);
            assert!(*b <= 1.0);
        }
        // raising one voxel never lowers any pixel
        let mut bumped = vec![0.0; 8];
        bumped[3] = 0.5;
        let mid = run(bumped);
        for (a, b) in lo.iter().zip(mid.iter()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn backward_populates_every_tracked_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(tracked(&[1, 4, 4], vec![0.3; 16]));
        let k = tape.leaf(tracked(&[2, 1, 3, 3], vec![0.1; 18]));
        let b = tape.leaf(tracked(&[2], vec![0.0, 0.0]));
        let c = tape.conv2d(x, k, b).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2(r).unwrap();
        let s = tape.sum(p);
        tape.backward(s);
        for id in [x, k, b] {
            assert!(tape.grad(id).is_some());
        }
        assert!(tape.grad(b).unwrap().iter().any(|v| *v != 0.0));
    }
}
