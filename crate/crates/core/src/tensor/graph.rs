use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Gap(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GroupLinear {
        input: Var,
        weight: Var,
        groups: usize,
    },
    Stack(Vec<Var>),
    Rsl {
        scores: Var,
        weight: Var,
    },
    SigmoidBce {
        logits: Var,
        labels: Vec<T>,
    },
    Hint {
        teacher: Var,
        student: Var,
        squared: bool,
    },
    WeightedSum(Vec<(T, Var)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its producers.
///
/// All activations are batched along the leading dimension.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Cross-correlation over `[B, C_in, H, W]` with `[C_out, C_in, k, k]`
    /// weights and `[C_out]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        let bd = self.dims(bias).to_vec();
        if xd.len() != 4 || wd.len() != 4 || wd[2] != wd[3] {
            return Err(Error::shape(format!(
                "conv2d expects input [B,C,H,W] and weights [C_out,C_in,k,k], got {xd:?} and {wd:?}"
            )));
        }
        if xd[1] != wd[1] {
            return Err(Error::shape(format!(
                "conv2d input channels {} (input {xd:?}) do not match weight C_in {} (weights {wd:?})",
                xd[1], wd[1]
            )));
        }
        if bd != [wd[0]] {
            return Err(Error::shape(format!("conv2d bias {bd:?} for {} outputs", wd[0])));
        }
        let geom = ConvGeom::new(xd[1], xd[2], xd[3], wd[0], wd[2], stride, pad)?;
        let batch = xd[0];
        let mut out = vec![T::zero(); batch * geom.c_out * geom.oh * geom.ow];
        kernels::conv2d_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::new(vec![batch, geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.needs(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape(format!("maxpool2d expects [B,C,H,W], got {xd:?}")));
        }
        let geom = PoolGeom::new(xd[1], xd[2], xd[3], k, stride)?;
        let n = xd[0] * geom.c * geom.oh * geom.ow;
        let mut out = vec![T::zero(); n];
        let mut argmax = vec![0; n];
        kernels::maxpool_forward(&geom, xd[0], self.value(input).data(), &mut out, &mut argmax);
        let value = Tensor::new(vec![xd[0], geom.c, geom.oh, geom.ow], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape(format!("gap expects [B,C,H,W], got {xd:?}")));
        }
        let mut out = vec![T::zero(); xd[0] * xd[1]];
        kernels::gap_forward(self.value(input).data(), xd[2] * xd[3], &mut out);
        let value = Tensor::new(vec![xd[0], xd[1]], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Gap(input), rg))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xd = self.dims(input);
        let batch = xd[0];
        let rest = xd[1..].iter().product();
        self.reshape(input, &[batch, rest])
    }

    /// `[B, D] x [O, D]^T + [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::shape(format!(
                "linear expects input [B,D] and weights [O,D], got {xd:?} and {wd:?}"
            )));
        }
        if let Some(b) = bias {
            if self.dims(b) != [wd[0]] {
                return Err(Error::shape(format!(
                    "linear bias {:?} for {} outputs",
                    self.dims(b),
                    wd[0]
                )));
            }
        }
        let mut out = vec![T::zero(); xd[0] * wd[0]];
        kernels::linear_forward(
            xd[0],
            wd[1],
            wd[0],
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(vec![xd[0], wd[0]], out)?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// `[B, G*D]` with `[G, D]` weights -> `[B, G]`; output `g` only sees
    /// block `g`.
    pub fn group_linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] * wd[1] {
            return Err(Error::shape(format!(
                "group_linear cannot partition input {xd:?} into blocks of weights {wd:?}"
            )));
        }
        let (groups, block) = (wd[0], wd[1]);
        let mut out = vec![T::zero(); xd[0] * groups];
        kernels::group_linear_forward(
            xd[0],
            groups,
            block,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let value = Tensor::new(vec![xd[0], groups], out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(value, Op::GroupLinear { input, weight, groups }, rg))
    }

    /// Stacks `n` tensors of dims `[B, M]` into `[B, n, M]`.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let d = self.dims(*first).to_vec();
        if d.len() != 2 || inputs.iter().any(|v| self.dims(*v) != d.as_slice()) {
            return Err(Error::shape(format!("stack expects equal [B,M] inputs, first is {d:?}")));
        }
        let (batch, m, n) = (d[0], d[1], inputs.len());
        let mut out = vec![T::zero(); batch * n * m];
        for (i, v) in inputs.iter().enumerate() {
            let src = self.value(*v).data();
            for b in 0..batch {
                out[(b * n + i) * m..(b * n + i + 1) * m].copy_from_slice(&src[b * m..(b + 1) * m]);
            }
        }
        let value = Tensor::new(vec![batch, n, m], out)?;
        let rg = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(value, Op::Stack(inputs.to_vec()), rg))
    }

    /// Region switch: `[B, M+1, M]` scores with `[M+1, M]` weights ->
    /// `r[b, j] = sum_i W[i, j] * s[b, i, j]`.
    pub fn rsl(&mut self, scores: Var, weight: Var) -> Result<Var> {
        let sd = self.dims(scores).to_vec();
        let wd = self.dims(weight).to_vec();
        if sd.len() != 3 || wd.len() != 2 || sd[1..] != wd[..] {
            return Err(Error::shape(format!(
                "rsl expects scores [B,M+1,M] matching weights [M+1,M], got {sd:?} and {wd:?}"
            )));
        }
        let (batch, rows, m) = (sd[0], sd[1], sd[2]);
        let s = self.value(scores).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); batch * m];
        for b in 0..batch {
            for j in 0..m {
                let mut acc = T::zero();
                for i in 0..rows {
                    acc = acc + w[i * m + j] * s[(b * rows + i) * m + j];
                }
                out[b * m + j] = acc;
            }
        }
        let value = Tensor::new(vec![batch, m], out)?;
        let rg = self.needs(scores) || self.needs(weight);
        Ok(self.push(value, Op::Rsl { scores, weight }, rg))
    }

    /// Sigmoid cross-entropy averaged over batch and attributes. `labels`
    /// must be 0/1 and shaped like the logits.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let ld = self.dims(logits).to_vec();
        if ld.len() != 2 || labels.len() != ld[0] * ld[1] {
            return Err(Error::shape(format!(
                "sigmoid_bce logits {ld:?} with {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::Data("attribute labels must be 0 or 1".into()));
        }
        let z = self.value(logits).data();
        let total: T = z
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| kernels::bce_with_logit(zi, yi))
            .sum();
        let value = Tensor::scalar(total / T::from_usize(labels.len()).unwrap());
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::SigmoidBce {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Batch mean of the per-sample Euclidean norm (or squared norm) of
    /// `student - teacher`. Gradients flow to the student only.
    pub fn hint_loss(&mut self, teacher: Var, student: Var, squared: bool) -> Result<Var> {
        let td = self.dims(teacher).to_vec();
        let sd = self.dims(student).to_vec();
        if td != sd {
            return Err(Error::shape(format!(
                "hint features differ: teacher {td:?} vs student {sd:?}"
            )));
        }
        let batch = td[0];
        let per = self.value(student).len() / batch;
        let t = self.value(teacher).data();
        let s = self.value(student).data();
        let mut total = T::zero();
        for b in 0..batch {
            let sq: T = s[b * per..(b + 1) * per]
                .iter()
                .zip(&t[b * per..(b + 1) * per])
                .map(|(&a, &c)| (a - c) * (a - c))
                .sum();
            total = total + if squared { sq } else { sq.sqrt() };
        }
        let value = Tensor::scalar(total / T::from_usize(batch).unwrap());
        let rg = self.needs(student);
        Ok(self.push(value, Op::Hint { teacher, student, squared }, rg))
    }

    /// `sum_k c_k * x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let mut total = T::zero();
        for &(c, v) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape(format!(
                    "weighted_sum term has dims {:?}, expected a scalar",
                    self.dims(v)
                )));
            }
            total = total + c * self.value(v).data()[0];
        }
        let rg = terms.iter().any(|(_, v)| self.needs(*v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Fingerprint of every non-smooth decision taken in the forward pass
    /// (ReLU gates and max-pool winners). Two evaluations with equal
    /// fingerprints lie in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn zeros_for(&self, v: Var) -> Option<Vec<T>> {
        self.needs(v).then(|| vec![T::zero(); self.nodes[v.0].value.len()])
    }

    /// Backpropagates from a scalar node. Gradients accumulate on every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        self.value(loss).ensure_finite("loss")?;
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gout: &[T]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let batch = self.dims(*input)[0];
                let mut dw = self.zeros_for(*weight);
                let mut db = self.zeros_for(*bias);
                let mut dx = self.zeros_for(*input);
                kernels::conv2d_backward(
                    geom,
                    batch,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gout,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
                if let Some(d) = db {
                    self.accumulate(*bias, &d);
                }
                if let Some(d) = dx {
                    self.accumulate(*input, &d);
                }
            }
            Op::Relu(input) => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<T> = x
                        .iter()
                        .zip(gout)
                        .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(*input, &d);
                }
            }
            Op::MaxPool { input, argmax, .. } => {
                if let Some(mut d) = self.zeros_for(*input) {
                    kernels::maxpool_backward(gout, argmax, &mut d);
                    self.accumulate(*input, &d);
                }
            }
            Op::Gap(input) => {
                if let Some(mut d) = self.zeros_for(*input) {
                    let xd = self.dims(*input);
                    let plane = xd[2] * xd[3];
                    kernels::gap_backward(gout, plane, &mut d);
                    self.accumulate(*input, &d);
                }
            }
            Op::Reshape(input) => self.accumulate(*input, gout),
            Op::Linear { input, weight, bias } => {
                let xd = self.dims(*input).to_vec();
                let d_out = self.dims(*weight)[0];
                let mut dw = self.zeros_for(*weight);
                let mut db = bias.and_then(|b| self.zeros_for(b));
                let mut dx = self.zeros_for(*input);
                kernels::linear_backward(
                    xd[0],
                    xd[1],
                    d_out,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gout,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
                if let (Some(d), Some(b)) = (db, bias) {
                    self.accumulate(*b, &d);
                }
                if let Some(d) = dx {
                    self.accumulate(*input, &d);
                }
            }
            Op::GroupLinear { input, weight, groups } => {
                let xd = self.dims(*input).to_vec();
                let block = xd[1] / groups;
                let mut dw = self.zeros_for(*weight);
                let mut dx = self.zeros_for(*input);
                kernels::group_linear_backward(
                    xd[0],
                    *groups,
                    block,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gout,
                    dw.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
                if let Some(d) = dx {
                    self.accumulate(*input, &d);
                }
            }
            Op::Stack(inputs) => {
                let n = inputs.len();
                let d = self.dims(inputs[0]).to_vec();
                let (batch, m) = (d[0], d[1]);
                for (i, v) in inputs.iter().enumerate() {
                    if !self.needs(*v) {
                        continue;
                    }
                    let mut part = vec![T::zero(); batch * m];
                    for b in 0..batch {
                        part[b * m..(b + 1) * m]
                            .copy_from_slice(&gout[(b * n + i) * m..(b * n + i + 1) * m]);
                    }
                    self.accumulate(*v, &part);
                }
            }
            Op::Rsl { scores, weight } => {
                let sd = self.dims(*scores).to_vec();
                let (batch, rows, m) = (sd[0], sd[1], sd[2]);
                let s = self.value(*scores).data();
                let w = self.value(*weight).data();
                let dw = self.needs(*weight).then(|| {
                    let mut dw = vec![T::zero(); rows * m];
                    for b in 0..batch {
                        for i in 0..rows {
                            for j in 0..m {
                                dw[i * m + j] = dw[i * m + j] + gout[b * m + j] * s[(b * rows + i) * m + j];
                            }
                        }
                    }
                    dw
                });
                let ds = self.needs(*scores).then(|| {
                    let mut ds = vec![T::zero(); batch * rows * m];
                    for b in 0..batch {
                        for i in 0..rows {
                            for j in 0..m {
                                ds[(b * rows + i) * m + j] = gout[b * m + j] * w[i * m + j];
                            }
                        }
                    }
                    ds
                });
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
                if let Some(d) = ds {
                    self.accumulate(*scores, &d);
                }
            }
            Op::SigmoidBce { logits, labels } => {
                if self.needs(*logits) {
                    let scale = gout[0] / T::from_usize(labels.len()).unwrap();
                    let d: Vec<T> = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| (kernels::sigmoid(z) - y) * scale)
                        .collect();
                    self.accumulate(*logits, &d);
                }
            }
            Op::Hint { teacher, student, squared } => {
                if self.needs(*student) {
                    let batch = self.dims(*student)[0];
                    let per = self.value(*student).len() / batch;
                    let t = self.value(*teacher).data();
                    let s = self.value(*student).data();
                    let scale = gout[0] / T::from_usize(batch).unwrap();
                    let two = T::one() + T::one();
                    let mut d = vec![T::zero(); s.len()];
                    for b in 0..batch {
                        let range = b * per..(b + 1) * per;
                        let coef = if *squared {
                            two * scale
                        } else {
                            let norm: T = s[range.clone()]
                                .iter()
                                .zip(&t[range.clone()])
                                .map(|(&a, &c)| (a - c) * (a - c))
                                .sum::<T>()
                                .sqrt();
                            // Removable singularity at zero difference.
                            if norm == T::zero() {
                                T::zero()
                            } else {
                                scale / norm
                            }
                        };
                        for i in range {
                            d[i] = coef * (s[i] - t[i]);
                        }
                    }
                    self.accumulate(*student, &d);
                }
            }
            Op::WeightedSum(terms) => {
                for &(c, v) in terms {
                    self.accumulate(v, &[c * gout[0]]);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_reports_both_shapes_on_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");
    }

    #[test]
    fn group_linear_rejects_bad_partition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 5]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.group_linear(x, w).is_err());
    }

    #[test]
    fn hint_gradient_is_zero_at_zero_difference() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let s = g.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let l = g.hint_loss(a, s, false).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, -2.0]));
        let w = g.leaf(t(&[1, 2], &[0.5, 0.25]), true);
        let y = g.linear(x, w, None).unwrap();
        let l = g.sigmoid_bce(y, &[1.0]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn gradients_accumulate_over_shared_consumers() {
        // loss = x + x through two weighted terms
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0f64), true);
        let l = g.weighted_sum(&[(2.0, x), (0.5, x)]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.5]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(f64::NAN), true);
        let l = g.weighted_sum(&[(1.0, x)]).unwrap();
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
    }
}
