//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass. Parameters enter as leaves keyed by
//! `(tag, index)` so several networks can share a tape; after
//! [`Graph::backward`] their gradients are collected per tag.

use std::collections::HashMap;

use super::kernels::{self, ConvSpec};
use super::tensor::Tensor;
use crate::segmentation::{dice_loss, dice_loss_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param {
        tag: usize,
        index: usize,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    MaxPool2 {
        x: NodeId,
        arg: Vec<u32>,
    },
    Upsample2 {
        x: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f32>,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f32,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    MseConst {
        x: NodeId,
        target: f32,
    },
    BceLogitsConst {
        x: NodeId,
        target: f32,
    },
    L1 {
        a: NodeId,
        b: NodeId,
    },
    SoftDice {
        pred: NodeId,
        target: Tensor,
        eps: f64,
    },
    WeightedSum {
        terms: Vec<(NodeId, f32)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(usize, usize), NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf. Repeated calls with the same key reuse one node.
    pub fn param(&mut self, tag: usize, index: usize, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(&(tag, index)) {
            return id;
        }
        let id = self.push(value.clone(), Op::Param { tag, index }, true);
        self.params.insert((tag, index), id);
        id
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> NodeId {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y, Op::Conv { x, w, b, spec }, rg)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (y, arg) = kernels::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::MaxPool2 { x, arg }, rg)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let y = kernels::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Upsample2 { x }, rg)
    }

    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        assert_eq!([tb.n(), tb.h(), tb.w()], [n, h, w], "concat shapes");
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..n {
            data.extend_from_slice(ta.item(i));
            data.extend_from_slice(tb.item(i));
        }
        let y = Tensor::from_vec([n, ca + tb.c(), h, w], data).expect("concat");
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Concat { a, b }, rg)
    }

    /// `mean((x - target)^2)`.
    pub fn mse_const(&mut self, x: NodeId, target: f32) -> NodeId {
        let t = self.value(x);
        let v = t
            .data()
            .iter()
            .map(|&v| (v as f64 - target as f64).powi(2))
            .sum::<f64>()
            / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v as f32), Op::MseConst { x, target }, rg)
    }

    /// Mean binary cross-entropy of logits `x` against a constant label.
    pub fn bce_logits_const(&mut self, x: NodeId, target: f32) -> NodeId {
        let t = self.value(x);
        let v = t
            .data()
            .iter()
            .map(|&z| {
                let z = z as f64;
                z.max(0.0) - z * target as f64 + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v as f32), Op::BceLogitsConst { x, target }, rg)
    }

    /// `mean(|a - b|)`.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "l1 shapes");
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / ta.numel() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v as f32), Op::L1 { a, b }, rg)
    }

    /// Soft Dice loss of each batch item, averaged over the batch.
    pub fn soft_dice(&mut self, pred: NodeId, target: Tensor, eps: f64) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "dice shapes");
        let mut total = 0.0;
        for n in 0..p.n() {
            let pv: Vec<f64> = p.item(n).iter().map(|&v| v as f64).collect();
            let tv: Vec<f64> = target.item(n).iter().map(|&v| v as f64).collect();
            total += dice_loss(&pv, &tv, eps).expect("equal lengths");
        }
        let v = total / p.n() as f64;
        let rg = self.rg(pred);
        self.push(Tensor::scalar(v as f32), Op::SoftDice { pred, target, eps }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f32)]) -> NodeId {
        let v: f64 = terms
            .iter()
            .map(|&(id, w)| self.value(id).to_scalar() as f64 * w as f64)
            .sum();
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        self.push(Tensor::scalar(v as f32), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |id: NodeId, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(id) {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param { tag, index } => {
                    params.insert((*tag, *index), g);
                }
                Op::Conv { x, w, b, spec } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *spec, self.rg(*x));
                    if let Some(dx) = cg.dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, cg.dweight, &mut grads);
                    if let Some(b) = b {
                        let shape = self.value(*b).shape();
                        send(*b, Tensor::from_vec(shape, cg.dbias).expect("bias"), &mut grads);
                    }
                }
                Op::MaxPool2 { x, arg } => {
                    let dx = kernels::maxpool2_backward(self.value(*x).shape(), arg, &g);
                    send(*x, dx, &mut grads);
                }
                Op::Upsample2 { x } => send(*x, kernels::upsample2_backward(&g), &mut grads),
                Op::InstanceNorm { x, inv_std } => {
                    let dx = kernels::instance_norm_backward(&node.value, inv_std, &g);
                    send(*x, dx, &mut grads);
                }
                Op::Relu { x } => send(
                    *x,
                    zip_map(&g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 }),
                    &mut grads,
                ),
                Op::LeakyRelu { x, slope } => send(
                    *x,
                    zip_map(&g, &node.value, |g, y| if y > 0.0 { g } else { slope * g }),
                    &mut grads,
                ),
                Op::Tanh { x } => send(*x, zip_map(&g, &node.value, |g, y| g * (1.0 - y * y)), &mut grads),
                Op::Sigmoid { x } => send(*x, zip_map(&g, &node.value, |g, y| g * y * (1.0 - y)), &mut grads),
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Concat { a, b } => {
                    let (la, lb) = (self.value(*a).item_len(), self.value(*b).item_len());
                    let mut ga = Vec::with_capacity(la * g.n());
                    let mut gb = Vec::with_capacity(lb * g.n());
                    for n in 0..g.n() {
                        let item = g.item(n);
                        ga.extend_from_slice(&item[..la]);
                        gb.extend_from_slice(&item[la..]);
                    }
                    send(*a, Tensor::from_vec(self.value(*a).shape(), ga).expect("a"), &mut grads);
                    send(*b, Tensor::from_vec(self.value(*b).shape(), gb).expect("b"), &mut grads);
                }
                Op::MseConst { x, target } => {
                    let s = g.to_scalar();
                    let xv = self.value(*x);
                    let k = 2.0 * s / xv.numel() as f32;
                    send(*x, xv.map(|v| k * (v - target)), &mut grads);
                }
                Op::BceLogitsConst { x, target } => {
                    let s = g.to_scalar();
                    let xv = self.value(*x);
                    let k = s / xv.numel() as f32;
                    send(*x, xv.map(|z| k * (sigmoid(z) - target)), &mut grads);
                }
                Op::L1 { a, b } => {
                    let s = g.to_scalar();
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = s / ta.numel() as f32;
                    let ga = zip_map(ta, tb, |x, y| k * sign(x - y));
                    if self.rg(*b) {
                        send(*b, ga.map(|v| -v), &mut grads);
                    }
                    send(*a, ga, &mut grads);
                }
                Op::SoftDice { pred, target, eps } => {
                    let s = g.to_scalar() as f64 / target.n() as f64;
                    let p = self.value(*pred);
                    let mut data = Vec::with_capacity(p.numel());
                    for n in 0..p.n() {
                        let pv: Vec<f64> = p.item(n).iter().map(|&v| v as f64).collect();
                        let tv: Vec<f64> = target.item(n).iter().map(|&v| v as f64).collect();
                        let gv = dice_loss_grad(&pv, &tv, *eps).expect("equal lengths");
                        data.extend(gv.into_iter().map(|v| (v * s) as f32));
                    }
                    send(*pred, Tensor::from_vec(p.shape(), data).expect("dice"), &mut grads);
                }
                Op::WeightedSum { terms } => {
                    let s = g.to_scalar();
                    for &(id, w) in terms {
                        send(id, Tensor::scalar(s * w), &mut grads);
                    }
                }
            }
        }
        Gradients { params }
    }
}

/// Parameter gradients from one backward pass.
pub struct Gradients {
    params: HashMap<(usize, usize), Tensor>,
}

impl Gradients {
    /// Gradients for parameters `0..count` of `tag`; `None` where the
    /// parameter did not influence the loss.
    pub fn for_tag(&mut self, tag: usize, count: usize) -> Vec<Option<Tensor>> {
        (0..count).map(|i| self.params.remove(&(tag, i))).collect()
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
