use super::conv;
use super::tensor::{debug_check_finite, Tensor, TensorError};

/// Batch-norm variance guard.
pub const BN_EPSILON: f64 = 1e-5;
/// Exponential-moving-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Train mode normalizes with batch statistics and updates the running
/// stats in place; eval mode reads the running stats only.
pub enum BnMode<'a> {
    Train(&'a mut BnState),
    Eval(&'a BnState),
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // statistics actually used for normalization (batch or running)
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    SoftmaxChannel {
        input: NodeId,
    },
    BilinearUpsample {
        input: NodeId,
        factor: usize,
    },
    AddScaled {
        a: NodeId,
        b: NodeId,
        ca: f64,
        cb: f64,
    },
    /// -(1/count) * sum of w[class] * ln(p[class]) over non-ignored locations.
    MaskedNll {
        probs: NodeId,
        targets: Vec<u8>,
        weights: Vec<f64>,
        count: usize,
    },
    /// Mean over locations of (1/C) * sum over channels of squared error.
    PointwiseMse {
        pred: NodeId,
        targets: Vec<f64>,
    },
}

/// Reverse-mode tape: ops append value nodes, `backward` walks them in
/// reverse. One tape per forward pass; parameters enter as leaves.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Scalar value of a rank-1 singleton node (loss values).
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].values()[0]
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        debug_check_finite(tensor.values(), "tape op");
        self.values.push(tensor);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    fn push_derived(&mut self, tensor: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let mut t = tensor;
        t.set_requires_grad(parents.iter().any(|p| self.values[p.0].requires_grad()));
        self.push(t, op)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let d = conv::conv_dims(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let out = conv::forward(
            self.value(input).values(),
            self.value(kernel).values(),
            self.value(bias).values(),
            &d,
            stride,
            padding,
        );
        let t = Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)?;
        Ok(self.push_derived(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
    ) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: format!("batch_norm {name}"),
                    lhs: vec![c],
                    rhs: self.value(id).shape().to_vec(),
                });
            }
        }
        let m = n * h * w;
        let (mean, var, train) = match &mode {
            BnMode::Train(_) => {
                if m < 2 {
                    return Err(TensorError::Invalid(format!(
                        "batch_norm train mode needs at least 2 values per channel, got {m}"
                    )));
                }
                let x = self.value(input).values();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let plane = &x[(b * c + ch) * h * w..][..h * w];
                        sum += plane.iter().sum::<f64>();
                    }
                    let mu = sum / m as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let plane = &x[(b * c + ch) * h * w..][..h * w];
                        sq += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval(state) => {
                if state.running_mean.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        context: "batch_norm running stats".into(),
                        lhs: vec![c],
                        rhs: vec![state.running_mean.len()],
                    });
                }
                (state.running_mean.clone(), state.running_var.clone(), false)
            }
        };
        if let BnMode::Train(state) = mode {
            if state.running_mean.len() != c {
                return Err(TensorError::ShapeMismatch {
                    context: "batch_norm running stats".into(),
                    lhs: vec![c],
                    rhs: vec![state.running_mean.len()],
                });
            }
            for ch in 0..c {
                state.running_mean[ch] =
                    (1.0 - BN_MOMENTUM) * state.running_mean[ch] + BN_MOMENTUM * mean[ch];
                state.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * state.running_var[ch] + BN_MOMENTUM * var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let x = self.value(input).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut out = vec![0.0; x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                for i in 0..h * w {
                    out[base + i] = x[base + i] * scale + shift;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_derived(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).values().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        self.push_derived(t, Op::Relu { input }, &[input])
    }

    /// 2x2 max pooling with stride 2. Gradient goes to the first maximal
    /// element of each window in row-major order.
    pub fn max_pool_2x2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("max_pool_2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "max_pool_2x2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let x = self.value(input).values();
        assert!(x.len() <= u32::MAX as usize);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push_derived(t, Op::MaxPool2x2 { input, argmax }, &[input]))
    }

    /// Softmax across the channel dimension at every spatial location,
    /// stabilized by max subtraction.
    pub fn softmax_channel(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4("softmax_channel")?;
        let x = self.value(input).values();
        let mut out = vec![0.0; x.len()];
        let plane = h * w;
        for b in 0..n {
            for i in 0..plane {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(x[(b * c + ch) * plane + i]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (x[(b * c + ch) * plane + i] - mx).exp();
                    out[(b * c + ch) * plane + i] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[(b * c + ch) * plane + i] /= sum;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_derived(t, Op::SoftmaxChannel { input }, &[input]))
    }

    /// Bilinear upsampling by an integer factor, align-corners-false:
    /// output pixel centers map to input coordinate (i + 0.5)/factor - 0.5,
    /// clamped to border cells at the edges.
    pub fn bilinear_upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        if factor == 0 {
            return Err(TensorError::Invalid("bilinear_upsample: factor must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(input).dims4("bilinear_upsample")?;
        let x = self.value(input).values();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..][..h * w];
            let dst = &mut out[nc * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let sy = src_coord(oy, factor);
                for ox in 0..ow {
                    let sx = src_coord(ox, factor);
                    dst[oy * ow + ox] = sample_plane(plane, h, w, sy, sx);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push_derived(t, Op::BilinearUpsample { input, factor }, &[input]))
    }

    /// ca * a + cb * b, elementwise on same-shape tensors.
    pub fn add_scaled(&mut self, a: NodeId, ca: f64, b: NodeId, cb: f64) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                context: "add_scaled".into(),
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push_derived(t, Op::AddScaled { a, b, ca, cb }, &[a, b]))
    }

    /// Weighted negative log-likelihood over probabilities [N, C, H, W].
    /// `targets` holds one class index per location in row-major [N, H, W]
    /// order, with 255 marking ignored locations. The sum is divided by the
    /// number of counted locations.
    pub fn masked_nll(
        &mut self,
        probs: NodeId,
        targets: Vec<u8>,
        weights: Vec<f64>,
    ) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(probs).dims4("masked_nll")?;
        if weights.len() != c {
            return Err(TensorError::ShapeMismatch {
                context: "masked_nll weights".into(),
                lhs: vec![c],
                rhs: vec![weights.len()],
            });
        }
        if targets.len() != n * h * w {
            return Err(TensorError::ShapeMismatch {
                context: "masked_nll targets".into(),
                lhs: vec![n, h, w],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t != IGNORE_CLASS && t as usize >= c) {
            return Err(TensorError::Invalid(format!(
                "masked_nll: class index {bad} out of range for {c} classes"
            )));
        }
        let p = self.value(probs).values();
        let plane = h * w;
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for i in 0..plane {
                let t = targets[b * plane + i];
                if t == IGNORE_CLASS {
                    continue;
                }
                let pv = p[(b * c + t as usize) * plane + i].max(PROB_FLOOR);
                sum -= weights[t as usize] * pv.ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid(
                "masked_nll: every location is ignored".into(),
            ));
        }
        let t = Tensor::scalar(sum / count as f64);
        Ok(self.push_derived(
            t,
            Op::MaskedNll {
                probs,
                targets,
                weights,
                count,
            },
            &[probs],
        ))
    }

    /// Mean over locations of the per-location mean squared channel error:
    /// (1/(N*H*W)) * sum over locations of (1/C) * sum_c (pred - target)^2.
    pub fn pointwise_mse(&mut self, pred: NodeId, targets: &Tensor) -> Result<NodeId, TensorError> {
        if self.value(pred).shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "pointwise_mse".into(),
                lhs: self.value(pred).shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (n, c, h, w) = self.value(pred).dims4("pointwise_mse")?;
        let x = self.value(pred).values();
        let t = targets.values();
        let mut sum = 0.0;
        for i in 0..x.len() {
            let d = x[i] - t[i];
            sum += d * d;
        }
        let points = (n * h * w) as f64;
        let value = sum / (c as f64 * points);
        let out = Tensor::scalar(value);
        Ok(self.push_derived(
            out,
            Op::PointwiseMse {
                pred,
                targets: t.to_vec(),
            },
            &[pred],
        ))
    }

    /// Gradient of `loss` (a scalar node) w.r.t. every recorded node that
    /// requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.values[i].requires_grad() {
                    debug_check_finite(&g, "backward");
                    self.values[i].set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.values[id.0].grad()
    }

    /// Ids of leaf nodes in insertion order.
    pub fn leaf_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| matches!(op, Op::Leaf).then_some(NodeId(i)))
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        update: impl FnOnce(&mut [f64]),
    ) {
        if !self.values[target.0].requires_grad() {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.values[target.0].len()]);
        update(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let d = conv::conv_dims(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *stride,
                    *padding,
                )
                .expect("validated at forward time");
                let need_dinput = self.values[input.0].requires_grad();
                let (di, dk, db) = conv::backward(
                    self.value(*input).values(),
                    self.value(*kernel).values(),
                    g,
                    &d,
                    *stride,
                    *padding,
                    need_dinput,
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, |s| add_into(s, &di));
                }
                self.accumulate(grads, *kernel, |s| add_into(s, &dk));
                self.accumulate(grads, *bias, |s| add_into(s, &db));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batch_norm").unwrap();
                let x = self.value(*input).values();
                let gam = self.value(*gamma).values();
                let plane = h * w;
                let m = (n * plane) as f64;

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let xh = (x[base + i] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += g[base + i] * xh;
                            dbeta[ch] += g[base + i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |s| add_into(s, &dgamma));
                self.accumulate(grads, *beta, |s| add_into(s, &dbeta));

                if self.values[input.0].requires_grad() {
                    let mut dx = vec![0.0; x.len()];
                    if *train {
                        // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
                        for ch in 0..c {
                            let g_mean = dbeta[ch] / m;
                            let gx_mean = dgamma[ch] / m;
                            let scale = gam[ch] * inv_std[ch];
                            for b in 0..n {
                                let base = (b * c + ch) * plane;
                                for i in 0..plane {
                                    let xh = (x[base + i] - mean[ch]) * inv_std[ch];
                                    dx[base + i] = scale * (g[base + i] - g_mean - xh * gx_mean);
                                }
                            }
                        }
                    } else {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for b in 0..n {
                                let base = (b * c + ch) * plane;
                                for i in 0..plane {
                                    dx[base + i] = scale * g[base + i];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, |s| add_into(s, &dx));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).values();
                self.accumulate(grads, *input, |s| {
                    for i in 0..x.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxPool2x2 { input, argmax } => {
                self.accumulate(grads, *input, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        s[src as usize] += g[o];
                    }
                });
            }
            Op::SoftmaxChannel { input } => {
                let (n, c, h, w) = self.values[i].dims4("softmax_channel").unwrap();
                let p = self.values[i].values();
                let plane = h * w;
                self.accumulate(grads, *input, |s| {
                    for b in 0..n {
                        for sp in 0..plane {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let idx = (b * c + ch) * plane + sp;
                                dot += g[idx] * p[idx];
                            }
                            for ch in 0..c {
                                let idx = (b * c + ch) * plane + sp;
                                s[idx] += p[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::BilinearUpsample { input, factor } => {
                let (n, c, h, w) = self.value(*input).dims4("bilinear_upsample").unwrap();
                let (oh, ow) = (h * factor, w * factor);
                self.accumulate(grads, *input, |s| {
                    for nc in 0..n * c {
                        let src = &mut s[nc * h * w..][..h * w];
                        let go = &g[nc * oh * ow..][..oh * ow];
                        for oy in 0..oh {
                            let (y0, y1, ty) = axis_coeffs(src_coord(oy, *factor), h);
                            for ox in 0..ow {
                                let (x0, x1, tx) = axis_coeffs(src_coord(ox, *factor), w);
                                let gv = go[oy * ow + ox];
                                src[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                                src[y0 * w + x1] += gv * (1.0 - ty) * tx;
                                src[y1 * w + x0] += gv * ty * (1.0 - tx);
                                src[y1 * w + x1] += gv * ty * tx;
                            }
                        }
                    }
                });
            }
            Op::AddScaled { a, b, ca, cb } => {
                self.accumulate(grads, *a, |s| {
                    for i in 0..g.len() {
                        s[i] += ca * g[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..g.len() {
                        s[i] += cb * g[i];
                    }
                });
            }
            Op::MaskedNll {
                probs,
                targets,
                weights,
                count,
            } => {
                let (n, c, h, w) = self.value(*probs).dims4("masked_nll").unwrap();
                let p = self.value(*probs).values();
                let plane = h * w;
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *probs, |s| {
                    for b in 0..n {
                        for sp in 0..plane {
                            let t = targets[b * plane + sp];
                            if t == IGNORE_CLASS {
                                continue;
                            }
                            let idx = (b * c + t as usize) * plane + sp;
                            let pv = p[idx].max(PROB_FLOOR);
                            s[idx] -= scale * weights[t as usize] / pv;
                        }
                    }
                });
            }
            Op::PointwiseMse { pred, targets } => {
                let (n, c, h, w) = self.value(*pred).dims4("pointwise_mse").unwrap();
                let x = self.value(*pred).values();
                let scale = 2.0 * g[0] / (c as f64 * (n * h * w) as f64);
                self.accumulate(grads, *pred, |s| {
                    for i in 0..x.len() {
                        s[i] += scale * (x[i] - targets[i]);
                    }
                });
            }
        }
    }
}

const IGNORE_CLASS: u8 = 255;
const PROB_FLOOR: f64 = 1e-300;

#[inline]
pub(crate) fn src_coord(out_idx: usize, factor: usize) -> f64 {
    (out_idx as f64 + 0.5) / factor as f64 - 0.5
}

/// Clamped interpolation coefficients along one axis: cell indices and the
/// fractional weight of the second cell.
#[inline]
fn axis_coeffs(s: f64, len: usize) -> (usize, usize, f64) {
    let f = s.floor();
    let t = s - f;
    let i0 = (f as isize).clamp(0, len as isize - 1) as usize;
    let i1 = (f as isize + 1).clamp(0, len as isize - 1) as usize;
    (i0, i1, t)
}

/// Bilinear lookup at fractional cell coordinates with border clamping.
/// Both the dense upsampler and the sparse keypoint samplers go through
/// this function, so the two paths agree exactly.
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let (y0, y1, ty) = axis_coeffs(sy, h);
    let (x0, x1, tx) = axis_coeffs(sx, w);
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx) + v11 * ty * tx
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
