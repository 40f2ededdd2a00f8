//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations executed through a [`Tape`] record their inputs and enough
//! local state to replay the chain rule backward. The op set is exactly what
//! the mixture-of-experts forward pass and its transport loss need; there is
//! no general broadcasting and no graph mutation after the fact.
//!
//! Learnable parameters live outside the tape in a [`ParamSet`] and are
//! referenced by id, so many tapes (e.g. one per image in a batch) can share
//! one parameter store without copying it.

use crate::error::AdError;

use super::tensor::Tensor;

/// Floor applied to probabilities before a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Smoothing constant in the soft-IoU cost.
pub const IOU_EPS: f64 = 1e-6;

/// Handle to a named parameter tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter storage shared by tapes.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters across all tensors.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Reference to a value visible to tape operations: either a node produced
/// on this tape or a parameter from the shared [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRef {
    Node(usize),
    Param(ParamId),
}

/// A recorded operation. Input references plus whatever constants the
/// backward pass needs.
#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf. No gradient flows into it.
    Input,
    /// `y[b,j] = sum_i x[b,i] w[i,j] + b[j]`; rank-1 input means B = 1.
    Linear { x: ValueRef, w: ValueRef, b: ValueRef },
    /// Pixelwise channel projection of a `[C_in, H, W]` map.
    Conv1x1 { x: ValueRef, w: ValueRef, b: ValueRef },
    Relu { x: ValueRef },
    Softplus { x: ValueRef },
    /// Elementwise product of same-shape tensors.
    Mul { a: ValueRef, b: ValueRef },
    /// Stable softmax along one axis.
    Softmax { x: ValueRef, axis: usize },
    /// `[F, H, W] -> [F]` spatial mean.
    AvgPoolGlobal { x: ValueRef },
    /// `y[f,p] = map[f,p] + vec[f]`.
    AddChannelBias { map: ValueRef, vec: ValueRef },
    /// `y[f,p] = map[f,p] * vec[f]`.
    MulChannelScale { map: ValueRef, vec: ValueRef },
    /// `z = mean + scale * noise` with fixed noise; reparameterized draw.
    GaussianReparam { mean: ValueRef, scale: ValueRef, noise: Vec<f64> },
    /// `u[k*s + t] = pi[k] / s` for `t in 0..s`.
    ExpandWeights { pi: ValueRef, s: usize },
    /// `sum_i weights[i] * x[i]` -> scalar.
    DotConst { x: ValueRef, weights: Vec<f64> },
    /// `sum_i weights[i] * scalar_i` -> scalar.
    WeightedSumScalars { xs: Vec<ValueRef>, weights: Vec<f64> },
    /// Soft-IoU cost of probabilities against a hard label map.
    CostIou { probs: ValueRef, label: Vec<u8>, eval_class: Vec<bool> },
    /// Mean pixelwise cross-entropy against a hard label map.
    CostCe { probs: ValueRef, label: Vec<u8>, ignore: Option<u8> },
    /// `KL(p || u)` with constant `p`; gradient w.r.t. `u` only.
    /// `grad_override`, when set, replaces the analytic d/du coefficients.
    KlDiv { p: Vec<f64>, u: ValueRef, grad_override: Option<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed like the tape/params.
pub struct Gradients {
    node: Vec<Option<Vec<f64>>>,
    param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param[id.0].as_deref()
    }

    pub fn node_grad(&self, r: ValueRef) -> Option<&[f64]> {
        match r {
            ValueRef::Node(i) => self.node[i].as_deref(),
            ValueRef::Param(id) => self.param_grad(id),
        }
    }

    /// Gradient for `r`, materializing zeros when nothing flowed there.
    pub fn grad_or_zeros(&self, r: ValueRef, numel: usize) -> Vec<f64> {
        self.node_grad(r).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel])
    }
}

/// Records ops during a forward pass, then replays them in reverse.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, r: ValueRef) -> &Tensor {
        match r {
            ValueRef::Node(i) => &self.nodes[i].value,
            ValueRef::Param(id) => self.params.tensor(id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueRef {
        self.nodes.push(Node { value, op });
        ValueRef::Node(self.nodes.len() - 1)
    }

    /// Introduce a constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor) -> ValueRef {
        self.push(t, Op::Input)
    }

    /// Dense affine map. Accepts `[B, D_in]` or rank-1 `[D_in]` input.
    pub fn linear(&mut self, x: ValueRef, w: ValueRef, b: ValueRef) -> Result<ValueRef, AdError> {
        let (bsz, din) = match self.value(x).shape() {
            [d] => (1usize, *d),
            [bsz, d] => (*bsz, *d),
            s => {
                return Err(AdError::Shape {
                    op: "linear",
                    detail: format!("input must be rank 1 or 2, got {s:?}"),
                })
            }
        };
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 || wshape[0] != din {
            return Err(AdError::Shape {
                op: "linear",
                detail: format!(
                    "weight axis 0 ({:?}) must match input feature axis ({din})",
                    wshape
                ),
            });
        }
        let dout = wshape[1];
        let bshape = self.value(b).shape().to_vec();
        if bshape != [dout] {
            return Err(AdError::Shape {
                op: "linear",
                detail: format!("bias shape {bshape:?} must be [{dout}] to match weight axis 1"),
            });
        }

        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; bsz * dout];
        for bi in 0..bsz {
            let xrow = &xv[bi * din..(bi + 1) * din];
            let orow = &mut out[bi * dout..(bi + 1) * dout];
            orow.copy_from_slice(bv);
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv[i * dout..(i + 1) * dout];
                for (o, wj) in orow.iter_mut().zip(wrow) {
                    *o += xi * wj;
                }
            }
        }
        let shape = if self.value(x).shape().len() == 1 { vec![dout] } else { vec![bsz, dout] };
        Ok(self.push(Tensor::new(shape, out), Op::Linear { x, w, b }))
    }

    /// Pixelwise projection of a `[C_in, H, W]` map to `[C_out, H, W]`.
    pub fn conv1x1(&mut self, x: ValueRef, w: ValueRef, b: ValueRef) -> Result<ValueRef, AdError> {
        let xshape = self.value(x).shape().to_vec();
        if xshape.len() != 3 {
            return Err(AdError::Shape {
                op: "conv1x1",
                detail: format!("input must be [C,H,W], got {xshape:?}"),
            });
        }
        let (cin, h, wd) = (xshape[0], xshape[1], xshape[2]);
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 || wshape[0] != cin {
            return Err(AdError::Shape {
                op: "conv1x1",
                detail: format!("weight {wshape:?} must be [{cin}, C_out]"),
            });
        }
        let cout = wshape[1];
        if self.value(b).shape() != [cout] {
            return Err(AdError::Shape {
                op: "conv1x1",
                detail: format!(
                    "bias shape {:?} must be [{cout}]",
                    self.value(b).shape()
                ),
            });
        }
        let px = h * wd;
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; cout * px];
        for (o, &bo) in bv.iter().enumerate() {
            out[o * px..(o + 1) * px].fill(bo);
        }
        for c in 0..cin {
            let xrow = &xv[c * px..(c + 1) * px];
            for o in 0..cout {
                let wco = wv[c * cout + o];
                if wco == 0.0 {
                    continue;
                }
                let orow = &mut out[o * px..(o + 1) * px];
                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                    *ov += wco * xv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![cout, h, wd], out), Op::Conv1x1 { x, w, b }))
    }

    /// Elementwise `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&mut self, x: ValueRef) -> ValueRef {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Relu { x })
    }

    /// Elementwise `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: ValueRef) -> ValueRef {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| softplus(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softplus { x })
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, AdError> {
        let (ashape, bshape) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ashape != bshape {
            return Err(AdError::Shape {
                op: "mul",
                detail: format!("shapes {ashape:?} and {bshape:?} differ"),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(ashape, out), Op::Mul { a, b }))
    }

    /// Softmax along `axis`, with max subtraction for stability.
    pub fn softmax(&mut self, x: ValueRef, axis: usize) -> ValueRef {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let out = softmax_values(t.values(), &shape, axis);
        self.push(Tensor::new(shape, out), Op::Softmax { x, axis })
    }

    /// Global average pool: `[F, H, W] -> [F]`.
    pub fn avg_pool_global(&mut self, x: ValueRef) -> ValueRef {
        let t = self.value(x);
        let shape = t.shape();
        assert_eq!(shape.len(), 3, "avg_pool_global expects [F,H,W], got {shape:?}");
        let (f, px) = (shape[0], shape[1] * shape[2]);
        assert!(px >= 1, "avg_pool_global needs at least one spatial position");
        let v = t.values();
        let out: Vec<f64> = (0..f)
            .map(|c| v[c * px..(c + 1) * px].iter().sum::<f64>() / px as f64)
            .collect();
        self.push(Tensor::from_vec(out), Op::AvgPoolGlobal { x })
    }

    /// Broadcast-add a `[F]` vector over the spatial positions of `[F,H,W]`.
    pub fn add_channel_bias(&mut self, map: ValueRef, vec: ValueRef) -> Result<ValueRef, AdError> {
        let mshape = self.value(map).shape().to_vec();
        let vshape = self.value(vec).shape().to_vec();
        if mshape.len() != 3 || vshape != [mshape[0]] {
            return Err(AdError::Shape {
                op: "add_channel_bias",
                detail: format!("map {mshape:?} and vector {vshape:?} disagree on channel axis"),
            });
        }
        let px = mshape[1] * mshape[2];
        let mv = self.value(map).values();
        let vv = self.value(vec).values();
        let mut out = mv.to_vec();
        for (f, &b) in vv.iter().enumerate() {
            for o in &mut out[f * px..(f + 1) * px] {
                *o += b;
            }
        }
        Ok(self.push(Tensor::new(mshape, out), Op::AddChannelBias { map, vec }))
    }

    /// Broadcast-multiply a `[F]` vector over the spatial positions of `[F,H,W]`.
    pub fn mul_channel_scale(&mut self, map: ValueRef, vec: ValueRef) -> Result<ValueRef, AdError> {
        let mshape = self.value(map).shape().to_vec();
        let vshape = self.value(vec).shape().to_vec();
        if mshape.len() != 3 || vshape != [mshape[0]] {
            return Err(AdError::Shape {
                op: "mul_channel_scale",
                detail: format!("map {mshape:?} and vector {vshape:?} disagree on channel axis"),
            });
        }
        let px = mshape[1] * mshape[2];
        let mv = self.value(map).values();
        let vv = self.value(vec).values();
        let mut out = mv.to_vec();
        for (f, &s) in vv.iter().enumerate() {
            for o in &mut out[f * px..(f + 1) * px] {
                *o *= s;
            }
        }
        Ok(self.push(Tensor::new(mshape, out), Op::MulChannelScale { map, vec }))
    }

    /// `z = mean + scale * noise` with `noise` a fixed standard-normal draw.
    /// `scale` must hold a single value; gradients flow to mean and scale.
    pub fn gaussian_reparam(
        &mut self,
        mean: ValueRef,
        scale: ValueRef,
        noise: Vec<f64>,
    ) -> ValueRef {
        let m = self.value(mean);
        assert_eq!(m.numel(), noise.len(), "noise length must match mean");
        assert_eq!(self.value(scale).numel(), 1, "scale must be a single value");
        let s = self.value(scale).values()[0];
        let out: Vec<f64> = m
            .values()
            .iter()
            .zip(&noise)
            .map(|(&mu, &e)| mu + s * e)
            .collect();
        let shape = m.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::GaussianReparam { mean, scale, noise })
    }

    /// Expand gating probabilities `[K]` into per-sample weights `[K*s]`
    /// where sample `t` of expert `k` carries weight `pi[k] / s`.
    pub fn expand_weights(&mut self, pi: ValueRef, s: usize) -> ValueRef {
        let p = self.value(pi);
        assert_eq!(p.shape().len(), 1, "expand_weights expects a vector");
        assert!(s >= 1);
        let mut out = Vec::with_capacity(p.numel() * s);
        for &pk in p.values() {
            for _ in 0..s {
                out.push(pk / s as f64);
            }
        }
        self.push(Tensor::from_vec(out), Op::ExpandWeights { pi, s })
    }

    /// Weighted sum against constant weights, reducing to a scalar.
    pub fn dot_const(&mut self, x: ValueRef, weights: Vec<f64>) -> ValueRef {
        let t = self.value(x);
        assert_eq!(t.numel(), weights.len(), "weight length must match input");
        let v: f64 = t.values().iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(v), Op::DotConst { x, weights })
    }

    /// Sum of scalars, reducing to a scalar.
    pub fn sum_scalars(&mut self, xs: Vec<ValueRef>) -> ValueRef {
        let n = xs.len();
        self.weighted_sum_scalars(xs, vec![1.0; n])
    }

    /// `sum_i weights[i] * xs[i]` over scalar nodes.
    pub fn weighted_sum_scalars(&mut self, xs: Vec<ValueRef>, weights: Vec<f64>) -> ValueRef {
        assert_eq!(xs.len(), weights.len());
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(&weights) {
            let t = self.value(*x);
            assert_eq!(t.numel(), 1, "weighted_sum_scalars inputs must be scalars");
            acc += w * t.values()[0];
        }
        self.push(Tensor::scalar(acc), Op::WeightedSumScalars { xs, weights })
    }

    /// Soft-IoU cost `1 - (Σ s·y + ε) / (Σ s + Σ y - Σ s·y + ε)` with sums
    /// restricted to the evaluated classes. `label` holds 1-based class ids;
    /// `probs` is `[C, H, W]` per-pixel probabilities.
    pub fn cost_iou(
        &mut self,
        probs: ValueRef,
        label: &[u8],
        eval_classes: &[u8],
    ) -> Result<ValueRef, AdError> {
        let t = self.value(probs);
        let shape = t.shape().to_vec();
        if shape.len() != 3 || shape[1] * shape[2] != label.len() {
            return Err(AdError::Shape {
                op: "cost_iou",
                detail: format!(
                    "probs {shape:?} incompatible with label of {} pixels",
                    label.len()
                ),
            });
        }
        let c = shape[0];
        let mut eval_class = vec![false; c];
        for &cls in eval_classes {
            assert!(cls >= 1 && (cls as usize) <= c, "evaluated class {cls} out of range 1..={c}");
            eval_class[cls as usize - 1] = true;
        }
        let (cost, _) = soft_iou_cost(t.values(), &shape, label, &eval_class);
        Ok(self.push(
            Tensor::scalar(cost),
            Op::CostIou { probs, label: label.to_vec(), eval_class },
        ))
    }

    /// Mean cross-entropy `−log s[y_p, p]` over non-ignored pixels, with the
    /// probability clamped below at `LOG_CLAMP`.
    pub fn cost_ce(
        &mut self,
        probs: ValueRef,
        label: &[u8],
        ignore: Option<u8>,
    ) -> Result<ValueRef, AdError> {
        let t = self.value(probs);
        let shape = t.shape().to_vec();
        if shape.len() != 3 || shape[1] * shape[2] != label.len() {
            return Err(AdError::Shape {
                op: "cost_ce",
                detail: format!(
                    "probs {shape:?} incompatible with label of {} pixels",
                    label.len()
                ),
            });
        }
        let (cost, _) = ce_cost(t.values(), &shape, label, ignore);
        Ok(self.push(Tensor::scalar(cost), Op::CostCe { probs, label: label.to_vec(), ignore }))
    }

    /// `KL(p || u)` with constant target `p`. Gradient flows to `u` only;
    /// when `grad_override` is set its coefficients replace the analytic
    /// `−p_i/u_i` in the backward pass (the forward value is unchanged).
    pub fn kl_div(
        &mut self,
        p: Vec<f64>,
        u: ValueRef,
        grad_override: Option<Vec<f64>>,
    ) -> ValueRef {
        let t = self.value(u);
        assert_eq!(t.numel(), p.len(), "kl_div length mismatch");
        if let Some(g) = &grad_override {
            assert_eq!(g.len(), p.len(), "grad_override length mismatch");
        }
        let v = kl_divergence(&p, t.values());
        self.push(Tensor::scalar(v), Op::KlDiv { p, u, grad_override })
    }

    /// Reverse pass from a scalar root. Gradient accumulation is additive
    /// over fan-out and nodes are visited in reverse recording order.
    pub fn backward(&self, root: ValueRef) -> Gradients {
        let root_idx = match root {
            ValueRef::Node(i) => i,
            ValueRef::Param(_) => panic!("backward root must be a tape node"),
        };
        assert_eq!(self.nodes[root_idx].value.numel(), 1, "backward root must be scalar");

        let mut grads = Gradients {
            node: vec![None; self.nodes.len()],
            param: vec![None; self.params.len()],
        };
        grads.node[root_idx] = Some(vec![1.0]);

        for idx in (0..=root_idx).rev() {
            let g = match grads.node[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_step(idx, &g, &mut grads);
            grads.node[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut Gradients, r: ValueRef, update: impl FnOnce(&mut [f64])) {
        let slot = match r {
            ValueRef::Node(i) => {
                let n = self.nodes[i].value.numel();
                grads.node[i].get_or_insert_with(|| vec![0.0; n])
            }
            ValueRef::Param(id) => {
                let n = self.params.tensor(id).numel();
                grads.param[id.0].get_or_insert_with(|| vec![0.0; n])
            }
        };
        update(slot);
    }

    fn backward_step(&self, idx: usize, g: &[f64], grads: &mut Gradients) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Linear { x, w, b } => {
                let (bsz, din) = match self.value(*x).shape() {
                    [d] => (1, *d),
                    [bsz, d] => (*bsz, *d),
                    _ => unreachable!(),
                };
                let dout = self.value(*w).shape()[1];
                let xv = self.value(*x).values().to_vec();
                let wv = self.value(*w).values().to_vec();
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bsz {
                        let grow = &g[bi * dout..(bi + 1) * dout];
                        let dxrow = &mut dx[bi * din..(bi + 1) * din];
                        for (i, dxi) in dxrow.iter_mut().enumerate() {
                            let wrow = &wv[i * dout..(i + 1) * dout];
                            *dxi += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for bi in 0..bsz {
                        let grow = &g[bi * dout..(bi + 1) * dout];
                        let xrow = &xv[bi * din..(bi + 1) * din];
                        for (i, &xi) in xrow.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let dwrow = &mut dw[i * dout..(i + 1) * dout];
                            for (d, gj) in dwrow.iter_mut().zip(grow) {
                                *d += xi * gj;
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for bi in 0..bsz {
                        for (d, gj) in db.iter_mut().zip(&g[bi * dout..(bi + 1) * dout]) {
                            *d += gj;
                        }
                    }
                });
            }
            Op::Conv1x1 { x, w, b } => {
                let xshape = self.value(*x).shape().to_vec();
                let (cin, px) = (xshape[0], xshape[1] * xshape[2]);
                let cout = self.value(*w).shape()[1];
                let xv = self.value(*x).values().to_vec();
                let wv = self.value(*w).values().to_vec();
                self.accumulate(grads, *x, |dx| {
                    for c in 0..cin {
                        let dxrow = &mut dx[c * px..(c + 1) * px];
                        for o in 0..cout {
                            let wco = wv[c * cout + o];
                            if wco == 0.0 {
                                continue;
                            }
                            let grow = &g[o * px..(o + 1) * px];
                            for (d, gv) in dxrow.iter_mut().zip(grow) {
                                *d += wco * gv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for c in 0..cin {
                        let xrow = &xv[c * px..(c + 1) * px];
                        for o in 0..cout {
                            let grow = &g[o * px..(o + 1) * px];
                            dw[c * cout + o] +=
                                xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * px..(o + 1) * px].iter().sum::<f64>();
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).values().to_vec();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &xi), gi) in dx.iter_mut().zip(&xv).zip(g) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).values().to_vec();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &xi), gi) in dx.iter_mut().zip(&xv).zip(g) {
                        *d += gi * sigmoid(xi);
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).values().to_vec();
                let bv = self.value(*b).values().to_vec();
                self.accumulate(grads, *a, |da| {
                    for ((d, gv), bi) in da.iter_mut().zip(g).zip(&bv) {
                        *d += gv * bi;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, gv), ai) in db.iter_mut().zip(g).zip(&av) {
                        *d += gv * ai;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let yv = self.nodes[idx].value.values().to_vec();
                let (outer, lanes, inner) = axis_strides(&shape, *axis);
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lanes {
                                let k = base + l * inner;
                                dot += g[k] * yv[k];
                            }
                            for l in 0..lanes {
                                let k = base + l * inner;
                                dx[k] += yv[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::AvgPoolGlobal { x } => {
                let shape = self.value(*x).shape().to_vec();
                let px = shape[1] * shape[2];
                let inv = 1.0 / px as f64;
                self.accumulate(grads, *x, |dx| {
                    for (f, gf) in g.iter().enumerate() {
                        for d in &mut dx[f * px..(f + 1) * px] {
                            *d += gf * inv;
                        }
                    }
                });
            }
            Op::AddChannelBias { map, vec } => {
                let mshape = self.value(*map).shape().to_vec();
                let px = mshape[1] * mshape[2];
                self.accumulate(grads, *map, |dm| {
                    for (d, gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *vec, |dv| {
                    for (f, d) in dv.iter_mut().enumerate() {
                        *d += g[f * px..(f + 1) * px].iter().sum::<f64>();
                    }
                });
            }
            Op::MulChannelScale { map, vec } => {
                let mv = self.value(*map).values().to_vec();
                let vv = self.value(*vec).values().to_vec();
                let px = mv.len() / vv.len();
                self.accumulate(grads, *map, |dm| {
                    for (f, &s) in vv.iter().enumerate() {
                        for (d, gv) in dm[f * px..(f + 1) * px].iter_mut().zip(&g[f * px..(f + 1) * px]) {
                            *d += gv * s;
                        }
                    }
                });
                self.accumulate(grads, *vec, |dv| {
                    for (f, d) in dv.iter_mut().enumerate() {
                        *d += g[f * px..(f + 1) * px]
                            .iter()
                            .zip(&mv[f * px..(f + 1) * px])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::GaussianReparam { mean, scale, noise } => {
                self.accumulate(grads, *mean, |dm| {
                    for (d, gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *scale, |ds| {
                    ds[0] += g.iter().zip(noise).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::ExpandWeights { pi, s } => {
                let s = *s;
                let inv = 1.0 / s as f64;
                self.accumulate(grads, *pi, |dp| {
                    for (k, d) in dp.iter_mut().enumerate() {
                        *d += g[k * s..(k + 1) * s].iter().sum::<f64>() * inv;
                    }
                });
            }
            Op::DotConst { x, weights } => {
                self.accumulate(grads, *x, |dx| {
                    for (d, w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                });
            }
            Op::WeightedSumScalars { xs, weights } => {
                for (x, w) in xs.iter().zip(weights) {
                    self.accumulate(grads, *x, |dx| dx[0] += g[0] * w);
                }
            }
            Op::CostIou { probs, label, eval_class } => {
                let t = self.value(*probs);
                let shape = t.shape().to_vec();
                let (_, grad) = soft_iou_cost(t.values(), &shape, label, eval_class);
                self.accumulate(grads, *probs, |dp| {
                    for (d, gv) in dp.iter_mut().zip(&grad) {
                        *d += g[0] * gv;
                    }
                });
            }
            Op::CostCe { probs, label, ignore } => {
                let t = self.value(*probs);
                let shape = t.shape().to_vec();
                let (_, grad) = ce_cost(t.values(), &shape, label, *ignore);
                self.accumulate(grads, *probs, |dp| {
                    for (d, gv) in dp.iter_mut().zip(&grad) {
                        *d += g[0] * gv;
                    }
                });
            }
            Op::KlDiv { p, u, grad_override } => {
                let uv = self.value(*u).values().to_vec();
                let coef: Vec<f64> = match grad_override {
                    Some(c) => c.clone(),
                    None => kl_divergence_grad_u(p, &uv),
                };
                self.accumulate(grads, *u, |du| {
                    for (d, c) in du.iter_mut().zip(&coef) {
                        *d += g[0] * c;
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Decompose a shape around `axis` into (outer, lanes, inner) extents.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

/// Softmax of `values` along `axis`, max-subtracted per lane.
pub fn softmax_values(values: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, lanes, inner) = axis_strides(shape, axis);
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let mut m = f64::NEG_INFINITY;
            for l in 0..lanes {
                m = m.max(values[base + l * inner]);
            }
            let mut z = 0.0;
            for l in 0..lanes {
                let e = (values[base + l * inner] - m).exp();
                out[base + l * inner] = e;
                z += e;
            }
            for l in 0..lanes {
                out[base + l * inner] /= z;
            }
        }
    }
    out
}

/// `KL(p || u) = Σ p_i ln(p_i / u_i)` with `0·ln 0 := 0` and `u` clamped
/// below at [`LOG_CLAMP`] before the log.
pub fn kl_divergence(p: &[f64], u: &[f64]) -> f64 {
    assert_eq!(p.len(), u.len());
    p.iter()
        .zip(u)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &ui)| pi * (pi / ui.max(LOG_CLAMP)).ln())
        .sum()
}

/// d/du of [`kl_divergence`]: `−p_i/u_i` where `u_i` is above the clamp,
/// 0 where the clamp is active (the clamped forward is flat there).
pub fn kl_divergence_grad_u(p: &[f64], u: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(u)
        .map(|(&pi, &ui)| if pi > 0.0 && ui > LOG_CLAMP { -pi / ui } else { 0.0 })
        .collect()
}

/// Soft-IoU cost and its gradient w.r.t. the probabilities.
///
/// Sums run over pixels and the evaluated classes only:
/// `cost = 1 − (Σ s·y + ε) / (Σ s + Σ y − Σ s·y + ε)`.
pub fn soft_iou_cost(
    probs: &[f64],
    shape: &[usize],
    label: &[u8],
    eval_class: &[bool],
) -> (f64, Vec<f64>) {
    let (c, px) = (shape[0], shape[1] * shape[2]);
    debug_assert_eq!(label.len(), px);
    let mut sum_sy = 0.0;
    let mut sum_s = 0.0;
    let mut sum_y = 0.0;
    for (p, &lab) in label.iter().enumerate() {
        let cls = lab as usize - 1;
        if eval_class[cls] {
            sum_sy += probs[cls * px + p];
            sum_y += 1.0;
        }
    }
    for (ch, &on) in eval_class.iter().enumerate() {
        if on {
            sum_s += probs[ch * px..(ch + 1) * px].iter().sum::<f64>();
        }
    }
    let num = sum_sy + IOU_EPS;
    let den = sum_s + sum_y - sum_sy + IOU_EPS;
    let cost = 1.0 - num / den;

    // d cost / d s[ch,p] = −(y·den − num·(1−y)) / den²  for evaluated ch.
    let den2 = den * den;
    let mut grad = vec![0.0; c * px];
    for (ch, &on) in eval_class.iter().enumerate() {
        if !on {
            continue;
        }
        for p in 0..px {
            let y = (label[p] as usize - 1 == ch) as u8 as f64;
            grad[ch * px + p] = -(y * den - num * (1.0 - y)) / den2;
        }
    }
    (cost, grad)
}

/// Mean pixelwise cross-entropy and its gradient w.r.t. the probabilities.
pub fn ce_cost(
    probs: &[f64],
    shape: &[usize],
    label: &[u8],
    ignore: Option<u8>,
) -> (f64, Vec<f64>) {
    let (c, px) = (shape[0], shape[1] * shape[2]);
    debug_assert_eq!(label.len(), px);
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &lab) in label.iter().enumerate() {
        if ignore == Some(lab) {
            continue;
        }
        let cls = lab as usize - 1;
        debug_assert!(cls < c, "label {lab} out of range for {c} classes");
        total -= probs[cls * px + p].max(LOG_CLAMP).ln();
        count += 1;
    }
    let count = count.max(1);
    let cost = total / count as f64;
    let mut grad = vec![0.0; c * px];
    let inv = 1.0 / count as f64;
    for (p, &lab) in label.iter().enumerate() {
        if ignore == Some(lab) {
            continue;
        }
        let cls = lab as usize - 1;
        let s = probs[cls * px + p];
        if s > LOG_CLAMP {
            grad[cls * px + p] = -inv / s;
        }
    }
    (cost, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params() -> ParamSet {
        ParamSet::new()
    }

    #[test]
    fn linear_identity_weight_passes_input() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.input(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let w = tape.input(Tensor::new(vec![2, 2], vec![5.0, -2.0, 7.0, 0.5]));
        let b = tape.input(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        // Independent triple-loop matmul oracle on a random 2x3 · 3x2 case.
        let xv = [0.3, -1.2, 0.75, 2.0, 0.01, -0.4];
        let wv = [1.5, -0.2, 0.7, 0.9, -1.1, 0.25];
        let bv = [0.05, -0.6];
        let mut expect = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = bv[j];
                for k in 0..3 {
                    acc += xv[i * 3 + k] * wv[k * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![2, 3], xv.to_vec()));
        let w = tape.input(Tensor::new(vec![3, 2], wv.to_vec()));
        let b = tape.input(Tensor::from_vec(bv.to_vec()));
        let y = tape.linear(x, w, b).unwrap();
        for (got, want) in tape.value(y).values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_shape_error_names_axes() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![1, 3], vec![0.0; 3]));
        let w = tape.input(Tensor::new(vec![2, 2], vec![0.0; 4]));
        let b = tape.input(Tensor::from_vec(vec![0.0; 2]));
        let err = tape.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 0") && msg.contains('3'), "got: {msg}");
    }

    #[test]
    fn relu_values_and_gradient() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);

        // gradient of sum(relu(x)) at [-1, 2] is the positive indicator.
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.dot_const(y, vec![1.0, 1.0]);
        let grads = tape.backward(s);
        assert_eq!(grads.node_grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_all_positive_is_identity() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![0.5, 3.0, 1e-9]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), tape.value(x).values());
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0);
        for &v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0);
        let v = tape.value(y).values();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_matches_compensated_direct_oracle() {
        // Direct formula with compensated summation as the reference on
        // bounded inputs, where it is accurate to well below 1e-12.
        let xs = [0.31, -0.77, 0.12, 0.55];
        let exps: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        let mut z = 0.0f64;
        let mut comp = 0.0f64;
        for &e in &exps {
            let y = e - comp;
            let t = z + y;
            comp = (t - z) - y;
            z = t;
        }
        let oracle: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(xs.to_vec()));
        let y = tape.softmax(x, 0);
        for (got, want) in tape.value(y).values().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_constant_and_single_pixel() {
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![2, 2, 2], vec![7.0; 8]));
        let y = tape.avg_pool_global(x);
        assert_eq!(tape.value(y).values(), &[7.0, 7.0]);

        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![3, 1, 1], vec![1.0, -2.0, 0.5]));
        let y = tape.avg_pool_global(x);
        assert_eq!(tape.value(y).values(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn avg_pool_matches_loop_oracle() {
        let vals: Vec<f64> = vec![0.4, -1.0, 2.5, 0.0, 1.25, 3.5, -0.5, 0.75];
        let mut expect = [0.0f64; 2];
        for f in 0..2 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += vals[f * 4 + p];
            }
            expect[f] = acc / 4.0;
        }
        let params = scalar_params();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::new(vec![2, 2, 2], vals));
        let y = tape.avg_pool_global(x);
        for (got, want) in tape.value(y).values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_zero_when_equal_and_log2_closed_form() {
        assert_eq!(kl_divergence(&[0.25, 0.75], &[0.25, 0.75]), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((v - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(vec![3, 2], vec![0.1, -0.4, 0.9, 0.2, -1.1, 0.7]));
        let b = params.add("b", Tensor::from_vec(vec![0.05, -0.3]));
        let run = || {
            let mut tape = Tape::new(&params);
            let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, -0.5, 0.3, 0.0, 1.5]));
            let y = tape.linear(x, ValueRef::Param(w), ValueRef::Param(b)).unwrap();
            let r = tape.relu(y);
            let s = tape.dot_const(r, vec![1.0; 4]);
            let g = tape.backward(s);
            (
                g.param_grad(w).unwrap().to_vec(),
                g.param_grad(b).unwrap().to_vec(),
            )
        };
        let (gw1, gb1) = run();
        let (gw2, gb2) = run();
        assert_eq!(gw1, gw2);
        assert_eq!(gb1, gb2);
    }
}
