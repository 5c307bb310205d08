//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every op appends one node holding its output
//! value and the handles of its inputs, so node order is execution order.
//! [`Graph::backward`] walks the nodes from the root down to index zero,
//! which visits ops in exact reverse execution order, and sums the
//! contributions a node receives from each consumer.

use super::conv::{self, ConvGeometry, ConvShape};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    ConcatChannels(Var, Var),
    EmbedBroadcast {
        table: Var,
        ids: Vec<usize>,
    },
    LerpRows {
        a: Var,
        b: Var,
        weights: Vec<T>,
    },
    BceRows {
        logits: Var,
        targets: Vec<T>,
    },
    FocalRows {
        logits: Var,
        targets: Vec<T>,
        gamma: T,
        weights: (T, T),
    },
    L2NormalizeRows(Var),
    ArcMargin {
        cosine: Var,
        targets: Vec<T>,
        scale: T,
        margin: T,
        fallback: Vec<bool>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::ConcatChannels(..) => "concat_channels",
            Op::EmbedBroadcast { .. } => "embed_broadcast",
            Op::LerpRows { .. } => "lerp_rows",
            Op::BceRows { .. } => "bce_with_logits",
            Op::FocalRows { .. } => "focal_loss",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::ArcMargin { .. } => "arc_margin",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape plus the accumulated gradients of its leaves.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Operand layout of a binary elementwise op.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Broadcast::Same, a.shape().to_vec()))
    } else if a.len() == 1 {
        Ok((Broadcast::LeftScalar, b.shape().to_vec()))
    } else if b.len() == 1 {
        Ok((Broadcast::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} are neither identical nor scalar",
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_broadcast<T: Element>(mode: Broadcast, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    match mode {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
        Broadcast::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

/// Reduces an elementwise gradient to the operand's shape.
fn reduce_to<T: Element>(grad: Vec<T>, target_len: usize) -> Vec<T> {
    if grad.len() == target_len {
        grad
    } else {
        vec![grad.iter().copied().sum()]
    }
}

fn rows_of<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    let b = t.batch();
    (b, t.len() / b.max(1))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; parameters bound to it do not
    /// require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0)?.as_deref()
    }

    /// Resets every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of the parameter leaves, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((id, self.leaf_grads.get(i)?.as_deref()?)),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A leaf whose gradient is tracked (inputs under a gradient check).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf { param: None }, rg)
    }

    /// Binds a parameter as a leaf. Its gradient can later be moved into the
    /// store with [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let rg = self.grad_enabled;
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let shape = ConvShape::infer(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let out = conv::forward(
            &shape,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![shape.batch, shape.cout, shape.oh, shape.ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
            },
            rg,
        )
    }

    /// `out[b, m] = sum_n input[b, n] * weight[m, n] + bias[m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [b, n] = self.value(input).dims2("linear input")?;
        let [m, wn] = self.value(weight).dims2("linear weight")?;
        if wn != n {
            return Err(Error::dim(format!(
                "linear: input has {n} features but weight expects {wn}"
            )));
        }
        let mut out = match bias {
            Some(bv) => {
                let bt = self.value(bv);
                if bt.shape() != [m] {
                    return Err(Error::dim(format!(
                        "linear: bias shape {:?} does not match {m} outputs",
                        bt.shape()
                    )));
                }
                bt.data().repeat(b)
            }
            None => vec![T::zero(); b * m],
        };
        T::gemm(
            b,
            n,
            m,
            T::one(),
            self.value(input).data(),
            (n as isize, 1),
            self.value(weight).data(),
            (1, n as isize),
            T::one(),
            &mut out,
            (m as isize, 1),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![b, m], out)?, Op::Linear { input, weight, bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (mode, shape) = broadcast(name, self.value(a), self.value(b))?;
        let data = zip_broadcast(mode, self.value(a).data(), self.value(b).data(), f);
        Ok((Tensor::new(shape, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let inv = T::of(1.0 / (h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, c], data)?, Op::GlobalAvgPool(x), rg)
    }

    /// `y[b, c, ..] = x[b, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::dim("channel_affine: input needs a channel dimension"));
        }
        let c = x.shape()[1];
        for (what, p) in [("scale", scale), ("shift", shift)] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(format!(
                    "channel_affine: {what} shape {:?} does not match {c} channels",
                    self.value(p).shape()
                )));
            }
        }
        let plane = x.len() / (x.batch() * c).max(1);
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let data = x
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let ch = i % c;
                p.iter().map(move |&v| v * sc[ch] + sh[ch])
            })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input, scale, shift]);
        self.push(value, Op::ChannelAffine { input, scale, shift }, rg)
    }

    /// Concatenates `[B, C1, H, W]` and `[B, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (ba, h, w) != (bb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(ba * (la + lb));
        for i in 0..ba {
            data.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![ba, ca + cb, h, w], data)?, Op::ConcatChannels(a, b), rg)
    }

    /// Looks up row `ids[b]` of a `[K, E]` table and spreads each entry over
    /// an `height x width` plane, giving `[B, E, height, width]`.
    pub fn embed_broadcast(&mut self, table: Var, ids: &[usize], height: usize, width: usize) -> Result<Var> {
        let [k, e] = self.value(table).dims2("embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::dim(format!("embedding id {bad} out of range for {k} rows")));
        }
        let plane = height * width;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e * plane);
        for &id in ids {
            for j in 0..e {
                data.extend(std::iter::repeat_n(t[id * e + j], plane));
            }
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), e, height, width], data)?,
            Op::EmbedBroadcast {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Row-wise convex combination `w[b] * a[b] + (1 - w[b]) * b[b]`.
    ///
    /// Rows with `w == 1` copy `a` and rows with `w == 0` copy `b` verbatim.
    pub fn lerp_rows(&mut self, a: Var, b: Var, weights: &[T]) -> Result<Var> {
        same_shape("lerp_rows", self.value(a), self.value(b))?;
        let (rows, width) = rows_of(self.value(a));
        if weights.len() != rows {
            return Err(Error::dim(format!(
                "lerp_rows: {} weights for {rows} rows",
                weights.len()
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len());
        for (r, &w) in weights.iter().enumerate() {
            let (ra, rb) = (&ad[r * width..(r + 1) * width], &bd[r * width..(r + 1) * width]);
            if w == T::one() {
                data.extend_from_slice(ra);
            } else if w == T::zero() {
                data.extend_from_slice(rb);
            } else {
                let wc = T::one() - w;
                data.extend(ra.iter().zip(rb).map(|(&x, &y)| w * x + wc * y));
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(
            value,
            Op::LerpRows {
                a,
                b,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    fn check_targets(&self, logits: Var, targets: &[T], what: &str) -> Result<(usize, usize)> {
        let [b, c] = self.value(logits).dims2(what)?;
        if targets.len() != b * c {
            return Err(Error::dim(format!(
                "{what}: {} targets for logits of shape [{b}, {c}]",
                targets.len()
            )));
        }
        Ok((b, c))
    }

    /// Per-row binary cross-entropy with logits, averaged over classes:
    /// `[B, C] -> [B]`. Targets may be soft.
    pub fn bce_rows(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let (b, c) = self.check_targets(logits, targets, "bce_with_logits")?;
        if let Some(bad) = targets.iter().find(|y| !(**y >= T::zero() && **y <= T::one())) {
            return Err(Error::Domain(format!("bce target {bad} outside [0, 1]")));
        }
        let z = self.value(logits).data();
        let inv = T::of(1.0 / c as f64);
        let data = (0..b)
            .map(|r| {
                (0..c)
                    .map(|j| {
                        let (zi, yi) = (z[r * c + j], targets[r * c + j]);
                        zi.max(T::zero()) - yi * zi + (-zi.abs()).exp().ln_1p()
                    })
                    .sum::<T>()
                    * inv
            })
            .collect();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::new(vec![b], data)?,
            Op::BceRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Per-row focal loss averaged over classes: `[B, C] -> [B]`.
    ///
    /// `weights` are the (positive, negative) class weights.
    pub fn focal_rows(&mut self, logits: Var, targets: &[T], gamma: T, weights: (T, T)) -> Result<Var> {
        let (b, c) = self.check_targets(logits, targets, "focal_loss")?;
        if let Some(bad) = targets.iter().find(|y| **y != T::zero() && **y != T::one()) {
            return Err(Error::Domain(format!("focal loss needs binary targets, got {bad}")));
        }
        if gamma < T::zero() {
            return Err(Error::Domain(format!("focal gamma {gamma} is negative")));
        }
        let z = self.value(logits).data();
        let inv = T::of(1.0 / c as f64);
        let data = (0..b)
            .map(|r| {
                (0..c)
                    .map(|j| focal_term(z[r * c + j], targets[r * c + j], gamma, weights))
                    .sum::<T>()
                    * inv
            })
            .collect();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::new(vec![b], data)?,
            Op::FocalRows {
                logits,
                targets: targets.to_vec(),
                gamma,
                weights,
            },
            rg,
        )
    }

    /// Scales every row of `[B, F]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let [b, f] = self.value(x).dims2("l2_normalize_rows")?;
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(d.len());
        for r in 0..b {
            let row = &d[r * f..(r + 1) * f];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::Domain(format!("row {r} has zero norm")));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, f], data)?, Op::L2NormalizeRows(x), rg)
    }

    /// Additive angular margin on cosine similarities `[B, C]`.
    ///
    /// Positive entries become `scale * cos(theta + margin)`, falling back to
    /// `scale * (cos(theta) - margin * sin(margin))` once `theta + margin`
    /// passes pi; negative entries become `scale * cos(theta)`.
    pub fn arc_margin(&mut self, cosine: Var, targets: &[T], scale: T, margin: T) -> Result<Var> {
        self.check_targets(cosine, targets, "arc_margin")?;
        if let Some(bad) = targets.iter().find(|y| **y != T::zero() && **y != T::one()) {
            return Err(Error::Domain(format!("arc margin needs binary targets, got {bad}")));
        }
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let threshold = (T::of(std::f64::consts::PI) - margin).cos();
        let cosv = self.value(cosine).data();
        let mut fallback = vec![false; cosv.len()];
        let data = cosv
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&c, &y))| {
                if y == T::zero() {
                    scale * c
                } else if c > threshold {
                    let sin = (T::one() - c * c).max(T::zero()).sqrt();
                    scale * (c * cos_m - sin * sin_m)
                } else {
                    fallback[i] = true;
                    scale * (c - margin * sin_m)
                }
            })
            .collect();
        let value = Tensor::new(self.value(cosine).shape().to_vec(), data)?;
        let rg = self.rg(&[cosine]);
        self.push(
            value,
            Op::ArcMargin {
                cosine,
                targets: targets.to_vec(),
                scale,
                margin,
                fallback,
            },
            rg,
        )
    }

    /// Fingerprint of every branch decision taken on the tape (ReLU sign
    /// patterns, margin fallbacks). Two evaluations with equal fingerprints
    /// ran through the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h = (h ^ u64::from(bit)).wrapping_mul(0x0000_0100_0000_01B3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|&v| feed(v > T::zero())),
                Op::ArcMargin { fallback, .. } => fallback.iter().for_each(|&f| feed(f)),
                _ => {}
            }
        }
        h
    }

    /// Reverse-mode accumulation from a scalar root.
    ///
    /// Leaf gradients add onto whatever earlier calls left there.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                accumulate(&mut self.leaf_grads[i], g);
                continue;
            }
            for (var, contribution) in self.local_grads(i, &g)? {
                if contribution.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                accumulate(&mut grads[var.0], contribution);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs that
    /// requires one.
    fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let need = |v: Var| nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                shape,
            } => {
                let grads = conv::backward(
                    shape,
                    val(*input).data(),
                    val(*kernel).data(),
                    g,
                    (need(*input), need(*kernel), bias.is_some_and(need)),
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
            }
            Op::Linear { input, weight, bias } => {
                let [b, n] = val(*input).dims2("linear")?;
                let m = val(*weight).shape()[0];
                if need(*input) {
                    let mut dx = vec![T::zero(); b * n];
                    T::gemm(b, m, n, T::one(), g, (m as isize, 1), val(*weight).data(), (n as isize, 1), T::zero(), &mut dx, (n as isize, 1));
                    out.push((*input, dx));
                }
                if need(*weight) {
                    let mut dw = vec![T::zero(); m * n];
                    T::gemm(m, b, n, T::one(), g, (1, m as isize), val(*input).data(), (n as isize, 1), T::zero(), &mut dw, (n as isize, 1));
                    out.push((*weight, dw));
                }
                if let Some(bv) = bias.filter(|v| need(*v)) {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                    out.push((bv, db));
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                out.push((*x, y.iter().zip(g).map(|(&s, &gi)| gi * s * (T::one() - s)).collect()));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(nodes[i].op, Op::Sub(..));
                if need(*a) {
                    out.push((*a, reduce_to(g.to_vec(), val(*a).len())));
                }
                if need(*b) {
                    let d = if neg { g.iter().map(|&x| -x).collect() } else { g.to_vec() };
                    out.push((*b, reduce_to(d, val(*b).len())));
                }
            }
            Op::Mul(a, b) => {
                let (mode, _) = broadcast("mul", val(*a), val(*b))?;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let at = |k: usize| match mode {
                    Broadcast::LeftScalar => ad[0],
                    _ => ad[k],
                };
                let bt = |k: usize| match mode {
                    Broadcast::RightScalar => bd[0],
                    _ => bd[k],
                };
                if need(*a) {
                    let d = g.iter().enumerate().map(|(k, &gi)| gi * bt(k)).collect();
                    out.push((*a, reduce_to(d, ad.len())));
                }
                if need(*b) {
                    let d = g.iter().enumerate().map(|(k, &gi)| gi * at(k)).collect();
                    out.push((*b, reduce_to(d, bd.len())));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&gi| gi * *f).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::Mean(x) => {
                let n = val(*x).len();
                out.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4("global_avg_pool")?;
                let inv = T::of(1.0 / (h * w) as f64);
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, h * w)).collect();
                out.push((*x, d));
            }
            Op::ChannelAffine { input, scale, shift } => {
                let x = val(*input);
                let c = x.shape()[1];
                let plane = x.len() / (x.batch() * c).max(1);
                let sc = val(*scale).data();
                if need(*input) {
                    let d = g
                        .chunks(plane)
                        .enumerate()
                        .flat_map(|(k, p)| {
                            let s = sc[k % c];
                            p.iter().map(move |&gi| gi * s)
                        })
                        .collect();
                    out.push((*input, d));
                }
                if need(*scale) || need(*shift) {
                    let mut ds = vec![T::zero(); c];
                    let mut dh = vec![T::zero(); c];
                    for (k, (gp, xp)) in g.chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                        let ch = k % c;
                        ds[ch] = ds[ch] + gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                        dh[ch] = dh[ch] + gp.iter().copied().sum::<T>();
                    }
                    if need(*scale) {
                        out.push((*scale, ds));
                    }
                    if need(*shift) {
                        out.push((*shift, dh));
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (la, lb) = (val(*a).len() / val(*a).batch(), val(*b).len() / val(*b).batch());
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if need(*a) {
                    out.push((*a, da));
                }
                if need(*b) {
                    out.push((*b, db));
                }
            }
            Op::EmbedBroadcast { table, ids } => {
                let [_, e] = val(*table).dims2("embedding table")?;
                let plane = g.len() / (ids.len() * e).max(1);
                let mut dt = vec![T::zero(); val(*table).len()];
                for (k, p) in g.chunks(plane).enumerate() {
                    let (b, j) = (k / e, k % e);
                    let slot = ids[b] * e + j;
                    dt[slot] = dt[slot] + p.iter().copied().sum::<T>();
                }
                out.push((*table, dt));
            }
            Op::LerpRows { a, b, weights } => {
                let width = g.len() / weights.len().max(1);
                let side = |first: bool| -> Vec<T> {
                    g.chunks(width)
                        .zip(weights)
                        .flat_map(|(row, &w)| {
                            let f = if first { w } else { T::one() - w };
                            row.iter().map(move |&gi| gi * f)
                        })
                        .collect()
                };
                if need(*a) {
                    out.push((*a, side(true)));
                }
                if need(*b) {
                    out.push((*b, side(false)));
                }
            }
            Op::BceRows { logits, targets } => {
                let z = val(*logits).data();
                let c = z.len() / g.len().max(1);
                let inv = T::of(1.0 / c as f64);
                let d = z
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(k, (&zi, &yi))| g[k / c] * inv * (sigmoid(zi) - yi))
                    .collect();
                out.push((*logits, d));
            }
            Op::FocalRows {
                logits,
                targets,
                gamma,
                weights,
            } => {
                let z = val(*logits).data();
                let c = z.len() / g.len().max(1);
                let inv = T::of(1.0 / c as f64);
                let d = z
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(k, (&zi, &yi))| g[k / c] * inv * focal_grad(zi, yi, *gamma, *weights))
                    .collect();
                out.push((*logits, d));
            }
            Op::L2NormalizeRows(x) => {
                let [_, f] = val(*x).dims2("l2_normalize_rows")?;
                let xd = val(*x).data();
                let yd = nodes[i].value.data();
                let mut d = Vec::with_capacity(xd.len());
                for ((xr, yr), gr) in xd.chunks(f).zip(yd.chunks(f)).zip(g.chunks(f)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    d.extend(yr.iter().zip(gr).map(|(&y, &gi)| (gi - y * dot) / norm));
                }
                out.push((*x, d));
            }
            Op::ArcMargin {
                cosine,
                targets,
                scale,
                margin,
                fallback,
            } => {
                let (cos_m, sin_m) = (margin.cos(), margin.sin());
                let floor = T::epsilon().sqrt();
                let d = val(*cosine)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(fallback)
                    .zip(g)
                    .map(|(((&c, &y), &fb), &gi)| {
                        if y == T::zero() || fb {
                            gi * *scale
                        } else {
                            let sin = (T::one() - c * c).max(T::zero()).sqrt().max(floor);
                            gi * *scale * (cos_m + c * sin_m / sin)
                        }
                    })
                    .collect();
                out.push((*cosine, d));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e = *e + c),
        None => *slot = Some(contribution),
    }
}

/// One focal-loss entry, evaluated through log-sigmoids so extreme logits
/// stay finite.
pub(crate) fn focal_term<T: Element>(z: T, y: T, gamma: T, (w_pos, w_neg): (T, T)) -> T {
    if y == T::one() {
        let q = sigmoid(-z);
        w_pos * q.powf(gamma) * softplus(-z)
    } else {
        let p = sigmoid(z);
        w_neg * p.powf(gamma) * softplus(z)
    }
}

fn focal_grad<T: Element>(z: T, y: T, gamma: T, (w_pos, w_neg): (T, T)) -> T {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y == T::one() {
        // d/dz of -(1-p)^g log p
        w_pos * q.powf(gamma) * (-gamma * p * softplus(-z) - q)
    } else {
        // d/dz of -p^g log(1-p)
        w_neg * p.powf(gamma) * (p + gamma * q * softplus(z))
    }
}
