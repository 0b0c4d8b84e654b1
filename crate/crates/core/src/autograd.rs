//! Tape-based reverse-mode differentiation over volumes.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node whose
//! parents were appended earlier, so the node list is already in
//! topological order and [`Graph::backward`] walks it in reverse.
//!
//! Parameters enter as leaf nodes holding flat `[n, 1, 1, 1]` volumes; the
//! kernel geometry lives in the operation record.

use crate::error::{Error, Result};
use crate::ops::conv::{
    bias_grad, conv_backward_input_raw, conv_backward_weight_raw, conv_forward_raw, pack_weights,
    output_spacing, unpack_weights, ConvGeom, ConvKernel,
};
use crate::ops::norm::{instance_norm_backward, instance_norm_raw, NormStats};
use crate::ops::shuffle::{pixel_shuffle, pixel_unshuffle, ShuffleFactors};
use crate::scalar::Scalar;
use crate::volume::{concat_channels, Shape3, Volume4};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel geometry for graph convolutions; weights and bias are nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: Shape3,
    pub stride: Shape3,
    pub padding: Shape3,
}

impl ConvSpec {
    /// Stride-1 convolution with shape-preserving padding for odd sizes.
    pub fn same(out_channels: usize, in_channels: usize, size: Shape3) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            size,
            stride: [1; 3],
            padding: size.map(|s| s / 2),
        }
    }

    pub fn strided(mut self, stride: Shape3) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.size.iter().product::<usize>()
    }

    pub fn of_kernel<T>(k: &ConvKernel<T>) -> Self {
        ConvSpec {
            out_channels: k.out_channels,
            in_channels: k.in_channels,
            size: k.size,
            stride: k.stride,
            padding: k.padding,
        }
    }

    fn kernel_stub<T: Scalar>(&self) -> ConvKernel<T> {
        ConvKernel {
            weights: Vec::new(),
            bias: Vec::new(),
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            size: self.size,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Backward rule of a node.
#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// parents: input, weight, bias
    Conv { geom: ConvGeom, packed: Vec<T> },
    /// parents: input, weight
    ConvTransposed { geom: ConvGeom, packed: Vec<T> },
    Shuffle(ShuffleFactors),
    /// parents: input, gamma, beta
    InstanceNorm { stats: NormStats<T> },
    LeakyRelu(T),
    Tanh,
    Concat { widths: Vec<usize> },
    Softmax,
    Add,
    Scale(T),
    Sum,
    HalfSumSquares,
    Dice { target: Volume4<T>, smooth: T },
    CrossEntropy { target: Volume4<T>, eps: T },
    WeightedSum(Vec<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::ConvTransposed { .. } => "transposed_conv3d",
            Op::Shuffle(_) => "pixel_shuffle",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Concat { .. } => "concat",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::HalfSumSquares => "half_sum_squares",
            Op::Dice { .. } => "dice_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Volume4<T>,
    parents: Vec<Var>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node; `None` where no gradient flows.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Volume4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Volume4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Volume4<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn scalar<T: Scalar>(v: T) -> Volume4<T> {
    Volume4::filled([1, 1, 1, 1], v)
}

fn flat<T: Scalar>(data: Vec<T>) -> Volume4<T> {
    let n = data.len();
    Volume4::new(data, [n.max(1), 1, 1, 1], [1.0; 3]).expect("flat parameter volume")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Volume4<T> {
        &self.nodes[v.0].value
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Volume4<T>, parents: Vec<Var>, op: Op<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Volume4<T>) -> Var {
        self.push(value, Vec::new(), Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Volume4<T>) -> Var {
        let v = self.push(value, Vec::new(), Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A differentiable flat parameter vector.
    pub fn parameter(&mut self, values: &[T]) -> Var {
        self.variable(flat(values.to_vec()))
    }

    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.channels() != spec.in_channels {
            return Err(Error::dim(format!(
                "conv input has {} channels, kernel expects {}",
                xv.channels(),
                spec.in_channels
            )));
        }
        self.check_param(weight, spec.weight_len(), "conv weight")?;
        self.check_param(bias, spec.out_channels, "conv bias")?;
        let geom = ConvGeom::forward(xv.spatial(), &spec.kernel_stub::<T>())?;
        let packed = pack_weights(
            self.nodes[weight.0].value.data(),
            spec.out_channels,
            spec.in_channels,
            geom.taps(),
        );
        let y = conv_forward_raw(&geom, xv.data(), &packed, Some(self.nodes[bias.0].value.data()));
        let o = geom.output;
        let value = Volume4::new(y, [o[0], o[1], o[2], spec.out_channels], output_spacing(xv.spacing(), spec.stride, false))?;
        Ok(self.push(value, vec![x, weight, bias], Op::Conv { geom, packed }))
    }

    /// Adjoint of [`Graph::conv3d`]'s linear part; `x` has `spec.out_channels`.
    pub fn transposed_conv3d(&mut self, x: Var, weight: Var, spec: ConvSpec) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.channels() != spec.out_channels {
            return Err(Error::dim(format!(
                "transposed conv input has {} channels, kernel expects {}",
                xv.channels(),
                spec.out_channels
            )));
        }
        self.check_param(weight, spec.weight_len(), "transposed conv weight")?;
        let geom = ConvGeom::transposed(xv.spatial(), &spec.kernel_stub::<T>())?;
        let packed = pack_weights(
            self.nodes[weight.0].value.data(),
            spec.out_channels,
            spec.in_channels,
            geom.taps(),
        );
        let y = conv_backward_input_raw(&geom, xv.data(), &packed);
        let s = geom.input;
        let value = Volume4::new(y, [s[0], s[1], s[2], spec.in_channels], output_spacing(xv.spacing(), spec.stride, true))?;
        Ok(self.push(value, vec![x, weight], Op::ConvTransposed { geom, packed }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, f: ShuffleFactors) -> Result<Var> {
        let y = pixel_shuffle(&self.nodes[x.0].value, f)?;
        Ok(self.push(y, vec![x], Op::Shuffle(f)))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let c = self.nodes[x.0].value.channels();
        self.check_param(gamma, c, "norm gamma")?;
        self.check_param(beta, c, "norm beta")?;
        let xv = &self.nodes[x.0].value;
        let (y, stats) = instance_norm_raw(
            xv.data(),
            c,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        let value = Volume4::new(y, xv.shape(), xv.spacing())?;
        Ok(self.push(value, vec![x, gamma, beta], Op::InstanceNorm { stats }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.nodes[x.0]
            .value
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(y, vec![x], Op::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(T::tanh);
        self.push(y, vec![x], Op::Tanh)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Volume4<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let y = concat_channels(&values)?;
        let widths = values.iter().map(|v| v.channels()).collect();
        Ok(self.push(y, parts.to_vec(), Op::Concat { widths }))
    }

    /// Softmax across channels at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.channels();
        let mut y = xv.clone();
        for voxel in y.data_mut().chunks_exact_mut(c) {
            let max = voxel.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in voxel.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            voxel.iter_mut().for_each(|v| *v = *v / total);
        }
        self.push(y, vec![x], Op::Softmax)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "cannot add {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let y = Volume4::new(data, av.shape(), av.spacing())?;
        Ok(self.push(y, vec![a, b], Op::Add))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.nodes[x.0].value.map(|v| v * factor);
        self.push(y, vec![x], Op::Scale(factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(scalar(s), vec![x], Op::Sum)
    }

    /// `sum(x^2) / 2`.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.dot(&self.nodes[x.0].value) / T::lit(2.0);
        self.push(scalar(s), vec![x], Op::HalfSumSquares)
    }

    /// `1 - (2 sum(g s) + smooth) / (sum(g) + sum(s) + smooth)` over all
    /// voxels and classes jointly.
    pub fn dice_loss(&mut self, probs: Var, target: &Volume4<T>, smooth: T) -> Result<Var> {
        let s = &self.nodes[probs.0].value;
        if s.shape() != target.shape() {
            return Err(Error::dim(format!(
                "prediction {:?} and target {:?} differ",
                s.shape(),
                target.shape()
            )));
        }
        let loss = crate::loss::dice_loss_value(s.data(), target.data(), smooth);
        Ok(self.push(
            scalar(loss),
            vec![probs],
            Op::Dice {
                target: target.clone(),
                smooth,
            },
        ))
    }

    /// `-(1/N) sum g log(max(s, eps))`, `N` the voxel count.
    pub fn cross_entropy(&mut self, probs: Var, target: &Volume4<T>, eps: T) -> Result<Var> {
        let s = &self.nodes[probs.0].value;
        if s.shape() != target.shape() {
            return Err(Error::dim(format!(
                "prediction {:?} and target {:?} differ",
                s.shape(),
                target.shape()
            )));
        }
        let loss = crate::loss::cross_entropy_value(s.data(), target.data(), s.voxels(), eps);
        Ok(self.push(
            scalar(loss),
            vec![probs],
            Op::CrossEntropy {
                target: target.clone(),
                eps,
            },
        ))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[T]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::arg(format!(
                "{} terms with {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let mut total = T::zero();
        for (t, &w) in terms.iter().zip(weights) {
            let v = &self.nodes[t.0].value;
            if v.len() != 1 {
                return Err(Error::arg("weighted_sum terms must be scalar"));
            }
            total += w * v.data()[0];
        }
        Ok(self.push(scalar(total), terms.to_vec(), Op::WeightedSum(weights.to_vec())))
    }

    fn check_param(&self, v: Var, len: usize, what: &str) -> Result<()> {
        let n = self.nodes[v.0].value.len();
        if n != len {
            return Err(Error::dim(format!("{what} has {n} values, expected {len}")));
        }
        Ok(())
    }

    /// Reverse accumulation from a scalar node. Every differentiable leaf
    /// receives a gradient, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1, 1, 1, 1] {
            return Err(Error::arg(format!(
                "backward needs a scalar loss node, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &dy);
            for (parent, g) in node.parents.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep intermediate gradients available to callers
            grads[idx] = Some(dy);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = grads.get_mut(idx).and_then(Option::take);
            let is_leaf = node.parents.is_empty() && node.requires_grad;
            out.push(match (g, is_leaf) {
                (Some(g), _) => Some(Volume4::new(g, node.value.shape(), node.value.spacing())?),
                (None, true) => Some(Volume4::zeros(node.value.shape()).spacing_from(node.value.spacing())),
                (None, false) => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, dy: &[T]) -> Vec<Option<Vec<T>>> {
        let p = &node.parents;
        let input = |i: usize| &self.nodes[p[i].0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { geom, packed } => {
                let dx = self
                    .wants(p[0])
                    .then(|| conv_backward_input_raw(geom, dy, packed));
                let dw = self.wants(p[1]).then(|| {
                    let raw = conv_backward_weight_raw(geom, input(0).data(), dy);
                    unpack_weights(&raw, geom.cout, geom.cin, geom.taps())
                });
                let db = self.wants(p[2]).then(|| bias_grad(dy, geom.cout));
                vec![dx, dw, db]
            }
            Op::ConvTransposed { geom, packed } => {
                let dx = self
                    .wants(p[0])
                    .then(|| conv_forward_raw(geom, dy, packed, None));
                let dw = self.wants(p[1]).then(|| {
                    let raw = conv_backward_weight_raw(geom, dy, input(0).data());
                    unpack_weights(&raw, geom.cout, geom.cin, geom.taps())
                });
                vec![dx, dw]
            }
            Op::Shuffle(f) => {
                let g = Volume4::new(dy.to_vec(), node.value.shape(), node.value.spacing())
                    .and_then(|g| pixel_unshuffle(&g, *f))
                    .expect("shuffle gradient shape");
                vec![Some(g.into_data())]
            }
            Op::InstanceNorm { stats } => {
                let c = node.value.channels();
                let (dx, dgamma, dbeta) = instance_norm_backward(dy, c, input(1).data(), stats);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::LeakyRelu(slope) => {
                let x = input(0).data();
                let dx = dy
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                vec![Some(dx)]
            }
            Op::Tanh => {
                let y = node.value.data();
                let dx = dy
                    .iter()
                    .zip(y)
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                vec![Some(dx)]
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let mut parts: Vec<Vec<T>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(w * dy.len() / total))
                    .collect();
                for voxel in dy.chunks_exact(total) {
                    let mut start = 0;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&voxel[start..start + w]);
                        start += w;
                    }
                }
                parts.into_iter().map(Some).collect()
            }
            Op::Softmax => {
                let c = node.value.channels();
                let mut dx = vec![T::zero(); dy.len()];
                for ((out, g), s) in dx
                    .chunks_exact_mut(c)
                    .zip(dy.chunks_exact(c))
                    .zip(node.value.data().chunks_exact(c))
                {
                    let dot: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    for i in 0..c {
                        out[i] = s[i] * (g[i] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::Add => vec![Some(dy.to_vec()), Some(dy.to_vec())],
            Op::Scale(f) => vec![Some(dy.iter().map(|&g| g * *f).collect())],
            Op::Sum => vec![Some(vec![dy[0]; input(0).len()])],
            Op::HalfSumSquares => vec![Some(input(0).data().iter().map(|&v| v * dy[0]).collect())],
            Op::Dice { target, smooth } => {
                let g = crate::loss::dice_loss_grad(input(0).data(), target.data(), *smooth);
                vec![Some(g.into_iter().map(|v| v * dy[0]).collect())]
            }
            Op::CrossEntropy { target, eps } => {
                let s = input(0);
                let g = crate::loss::cross_entropy_grad(s.data(), target.data(), s.voxels(), *eps);
                vec![Some(g.into_iter().map(|v| v * dy[0]).collect())]
            }
            Op::WeightedSum(w) => w.iter().map(|&wi| Some(vec![wi * dy[0]])).collect(),
        }
    }
}
