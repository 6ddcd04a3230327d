use crate::autodiff::kernels;
use crate::error::{invalid, Error, Result};
use crate::scalar::{epsilon, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Abs(usize),
    ClampMin(usize, T),
    Huber(usize, T),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Dot(usize, usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftTargetKl {
        logits: usize,
        targets: Vec<T>,
        probs: Vec<T>,
        temperature: T,
    },
    PairwiseDistances(usize),
    CenterDistances {
        input: usize,
        centers: Tensor<T>,
    },
    TripletCosines {
        input: usize,
        triplets: Vec<[usize; 3]>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::Huber(..) => "huber",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2Norm(_) => "l2norm",
            Op::Dot(..) => "dot",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SoftTargetKl { .. } => "soft_target_kl",
            Op::PairwiseDistances(_) => "pairwise_distances",
            Op::CenterDistances { .. } => "center_distances",
            Op::TripletCosines { .. } => "triplet_cosines",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::ClampMin(a, _)
            | Op::Huber(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Norm(a)
            | Op::PairwiseDistances(a) => vec![a],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SoftTargetKl { logits, .. } => {
                vec![logits]
            }
            Op::CenterDistances { input, .. } | Op::TripletCosines { input, .. } => vec![input],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    // true when some requires_grad leaf is reachable through the inputs
    tracked: bool,
    grad: Option<Tensor<T>>,
}

/// One record of the executed-operation log, in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Node ids are assigned in execution order, so every node's inputs have
/// smaller ids and the id order is a topological order. A fresh graph is
/// built for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    ScalarRhs,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call, for `requires_grad` leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// The executed operations in topological order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, n)| OpRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: id,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = op.inputs().iter().any(|&i| self.nodes[i].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).is_scalar() {
            Ok(Broadcast::ScalarRhs)
        } else {
            Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = match mode {
            Broadcast::Same => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => {
                let y = vb.item();
                va.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    /// Element-wise sum; `b` may also be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("a tensor always matches its own shape")
    }

    /// `max(a, floor)` element-wise; the gradient is zero where the floor wins.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a.0, floor))
    }

    pub fn huber(&mut self, a: Var, delta: T) -> Result<Var> {
        if delta <= T::zero() {
            return Err(invalid("huber", format!("delta must be positive, got {delta}")));
        }
        Ok(self.unary(a, |x| kernels::huber(x, delta), Op::Huber(a.0, delta)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (va.dims2()?, vb.dims2()?);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (_, n) = va.dims2()?;
        if vb.shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let b = vb.data();
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a.0, bias.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::of_usize(v.numel());
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Euclidean norm of all entries. The gradient at the origin is zero.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let n = kernels::l2norm(self.value(a).data());
        self.push(Tensor::scalar(n), Op::L2Norm(a.0))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(Error::Shape {
                op: "dot",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let d = kernels::dot(va.data(), vb.data());
        Ok(self.push(Tensor::scalar(d), Op::Dot(a.0, b.0)))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (m, c) = v.dims2()?;
        if labels.len() != m {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let logp = kernels::log_softmax_rows(v.data(), m, c, T::one());
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= logp[i * c + l];
        }
        loss /= T::of_usize(m);
        let probs = logp.iter().map(|x| x.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch mean of `KL(softmax(teacher/T) || softmax(logits/T))`.
    ///
    /// Not multiplied by `T²`; callers scale it as needed.
    pub fn soft_target_kl(&mut self, logits: Var, teacher_logits: &Tensor<T>, temperature: T) -> Result<Var> {
        if temperature <= T::zero() {
            return Err(invalid("soft_target_kl", "temperature must be positive"));
        }
        let v = self.value(logits);
        let (m, c) = v.dims2()?;
        if teacher_logits.shape() != v.shape() {
            return Err(Error::Shape {
                op: "soft_target_kl",
                left: v.shape().to_vec(),
                right: teacher_logits.shape().to_vec(),
            });
        }
        let log_student = kernels::log_softmax_rows(v.data(), m, c, temperature);
        let log_teacher = kernels::log_softmax_rows(teacher_logits.data(), m, c, temperature);
        let mut loss = T::zero();
        for (&lt, &ls) in log_teacher.iter().zip(&log_student) {
            loss += lt.exp() * (lt - ls);
        }
        loss /= T::of_usize(m);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftTargetKl {
                logits: logits.0,
                targets: log_teacher.iter().map(|x| x.exp()).collect(),
                probs: log_student.iter().map(|x| x.exp()).collect(),
                temperature,
            },
        ))
    }

    /// `m×m` Euclidean distance matrix between the rows of an `m×d` input.
    pub fn pairwise_distances(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (m, d) = v.dims2()?;
        let data = kernels::pairwise_distances(v.data(), m, d);
        let value = Tensor::new(vec![m, m], data)?;
        Ok(self.push(value, Op::PairwiseDistances(a.0)))
    }

    /// `m×C` distances from each input row to each (constant) center row.
    pub fn center_distances(&mut self, a: Var, centers: &Tensor<T>) -> Result<Var> {
        let v = self.value(a);
        let (m, d) = v.dims2()?;
        let (c, dc) = centers.dims2()?;
        if d != dc {
            return Err(Error::Shape {
                op: "center_distances",
                left: v.shape().to_vec(),
                right: centers.shape().to_vec(),
            });
        }
        let data = kernels::center_distances(v.data(), centers.data(), m, c, d);
        let value = Tensor::new(vec![m, c], data)?;
        Ok(self.push(
            value,
            Op::CenterDistances {
                input: a.0,
                centers: centers.clone(),
            },
        ))
    }

    /// For each `[end_a, vertex, end_b]` the cosine of the angle at `vertex`.
    pub fn triplet_cosines(&mut self, a: Var, triplets: &[[usize; 3]]) -> Result<Var> {
        let v = self.value(a);
        let (m, d) = v.dims2()?;
        if triplets.is_empty() {
            return Err(invalid("triplet_cosines", "empty triplet list"));
        }
        if triplets.iter().flatten().any(|&i| i >= m) {
            return Err(invalid("triplet_cosines", format!("triplet index out of range for {m} rows")));
        }
        let x = v.data();
        let row = |i: usize| &x[i * d..(i + 1) * d];
        let data = triplets
            .iter()
            .map(|&[i, j, k]| kernels::vertex_cosine(row(i), row(j), row(k)))
            .collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::TripletCosines {
                input: a.0,
                triplets: triplets.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients of every `requires_grad` leaf are reset first and then filled
    /// in, so calling this twice on the same graph gives identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            if node.requires_grad {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        // leaves recorded before the loss that got no contribution
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| nodes[i].value.data();
        let out = val(id);
        // closure adding a contribution into the gradient buffer of `target`
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[target].tracked {
                return;
            }
            let len = nodes[target].value.numel();
            let buf = grads[target].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        let reduce_rhs = |b: usize, contrib: &mut dyn Iterator<Item = T>| -> Vec<T> {
            if nodes[b].value.numel() == g.len() {
                contrib.collect()
            } else {
                vec![contrib.fold(T::zero(), |s, x| s + x)]
            }
        };
        let rhs = |b: usize, i: usize| {
            let vb = val(b);
            if vb.len() == 1 {
                vb[0]
            } else {
                vb[i]
            }
        };

        match &nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                let gb = reduce_rhs(b, &mut g.iter().copied());
                acc(b, &mut |buf| add_into(buf, &gb));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                let gb = reduce_rhs(b, &mut g.iter().map(|&x| -x));
                acc(b, &mut |buf| add_into(buf, &gb));
            }
            &Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * rhs(b, i)).collect();
                let va = val(a);
                let gb = reduce_rhs(b, &mut g.iter().zip(va).map(|(&gi, &x)| gi * x));
                acc(a, &mut |buf| add_into(buf, &ga));
                acc(b, &mut |buf| add_into(buf, &gb));
            }
            &Op::Div(a, b) => {
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi / rhs(b, i)).collect();
                let gb = reduce_rhs(
                    b,
                    &mut g
                        .iter()
                        .zip(out)
                        .enumerate()
                        .map(|(i, (&gi, &o))| -gi * o / rhs(b, i)),
                );
                acc(a, &mut |buf| add_into(buf, &ga));
                acc(b, &mut |buf| add_into(buf, &gb));
            }
            &Op::Scale(a, c) => acc(a, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            }),
            &Op::Relu(a) => {
                let va = val(a);
                acc(a, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                })
            }
            &Op::Abs(a) => {
                let va = val(a);
                acc(a, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        if x != T::zero() {
                            *o += gi * x.signum();
                        }
                    }
                })
            }
            &Op::ClampMin(a, floor) => {
                let va = val(a);
                acc(a, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        if x > floor {
                            *o += gi;
                        }
                    }
                })
            }
            &Op::Huber(a, delta) => {
                let va = val(a);
                acc(a, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *o += gi * kernels::huber_slope(x, delta);
                    }
                })
            }
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a].value.dims2().expect("matmul lhs is a matrix");
                let n = nodes[b].value.shape()[1];
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            buf[i * k + p] += kernels::dot(&g[i * n..(i + 1) * n], brow);
                        }
                    }
                });
                acc(b, &mut |buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            for (o, &gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            &Op::AddBias(a, b) => {
                let n = nodes[b].value.numel();
                acc(a, &mut |buf| add_into(buf, g));
                acc(b, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            &Op::Mean(a) => {
                let share = g[0] / T::of_usize(nodes[a].value.numel());
                acc(a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += share;
                    }
                })
            }
            &Op::L2Norm(a) => {
                let norm = out[0];
                if norm > T::zero() {
                    let va = val(a);
                    acc(a, &mut |buf| {
                        for (o, &x) in buf.iter_mut().zip(va) {
                            *o += g[0] * x / norm;
                        }
                    });
                }
            }
            &Op::Dot(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |buf| {
                    for (o, &y) in buf.iter_mut().zip(vb) {
                        *o += g[0] * y;
                    }
                });
                acc(b, &mut |buf| {
                    for (o, &x) in buf.iter_mut().zip(va) {
                        *o += g[0] * x;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let c = probs.len() / m;
                let scale = g[0] / T::of_usize(m);
                acc(*logits, &mut |buf| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            buf[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftTargetKl {
                logits,
                targets,
                probs,
                temperature,
            } => {
                let m = nodes[*logits].value.shape()[0];
                let scale = g[0] / (T::of_usize(m) * *temperature);
                acc(*logits, &mut |buf| {
                    for ((o, &p), &q) in buf.iter_mut().zip(probs).zip(targets) {
                        *o += scale * (p - q);
                    }
                });
            }
            &Op::PairwiseDistances(a) => {
                let (m, d) = nodes[a].value.dims2().expect("pairwise input is a matrix");
                let x = val(a);
                acc(a, &mut |buf| {
                    for i in 0..m {
                        for j in (i + 1)..m {
                            let dist = out[i * m + j];
                            if dist <= T::zero() {
                                continue;
                            }
                            let w = (g[i * m + j] + g[j * m + i]) / dist;
                            for t in 0..d {
                                let delta = w * (x[i * d + t] - x[j * d + t]);
                                buf[i * d + t] += delta;
                                buf[j * d + t] -= delta;
                            }
                        }
                    }
                });
            }
            Op::CenterDistances { input, centers } => {
                let (m, d) = nodes[*input].value.dims2().expect("center input is a matrix");
                let c = centers.shape()[0];
                let (x, u) = (val(*input), centers.data());
                acc(*input, &mut |buf| {
                    for i in 0..m {
                        for k in 0..c {
                            let dist = out[i * c + k];
                            if dist <= T::zero() {
                                continue;
                            }
                            let w = g[i * c + k] / dist;
                            for t in 0..d {
                                buf[i * d + t] += w * (x[i * d + t] - u[k * d + t]);
                            }
                        }
                    }
                });
            }
            Op::TripletCosines { input, triplets } => {
                let d = nodes[*input].value.shape()[1];
                let x = val(*input);
                let eps = epsilon::<T>();
                acc(*input, &mut |buf| {
                    let mut ea = vec![T::zero(); d];
                    let mut eb = vec![T::zero(); d];
                    for (&[i, j, k], (&gt, &cos)) in triplets.iter().zip(g.iter().zip(out)) {
                        for t in 0..d {
                            ea[t] = x[i * d + t] - x[j * d + t];
                            eb[t] = x[k * d + t] - x[j * d + t];
                        }
                        let (na, nb) = (kernels::l2norm(&ea), kernels::l2norm(&eb));
                        if na <= eps || nb <= eps {
                            continue;
                        }
                        for t in 0..d {
                            let (ua, ub) = (ea[t] / na, eb[t] / nb);
                            let da = gt * (ub - cos * ua) / na;
                            let db = gt * (ua - cos * ub) / nb;
                            buf[i * d + t] += da;
                            buf[k * d + t] += db;
                            buf[j * d + t] -= da + db;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    for (o, &x) in buf.iter_mut().zip(g) {
        *o += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2], &[1., 2.]));
        let b = g.constant(t(vec![2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);

        let r = g.constant(t(vec![3], &[-1., 0., 2.]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);

        let z = g.scale(a, 0.0);
        assert_eq!(g.value(z).data(), &[0., 0.]);
    }

    #[test]
    fn scalar_rhs_broadcasts() {
        let mut g = Graph::new();
        let a = g.param(t(vec![3], &[1., 2., 3.]));
        let c = g.param(Tensor::scalar(2.0));
        let p = g.mul(a, c).unwrap();
        assert_eq!(g.value(p).data(), &[2., 4., 6.]);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.grad(c).unwrap().data(), &[6.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(vec![2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(vec![2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let r = g.constant(t(vec![1, 2], &[1., 0.]));
        let c = g.constant(t(vec![2, 1], &[2., 5.]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[2.]);
    }

    #[test]
    fn reduction_examples() {
        let mut g = Graph::new();
        let v = g.constant(t(vec![2], &[3., 4.]));
        let n = g.l2norm(v);
        assert_eq!(g.value(n).item(), 5.0);
        let a = g.constant(t(vec![2], &[1., 0.]));
        let b = g.constant(t(vec![2], &[0., 1.]));
        let d = g.dot(a, b).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        let x = g.constant(t(vec![3], &[2., 4., 6.]));
        let mu = g.mean(x);
        assert_eq!(g.value(mu).item(), 4.0);
        let short = g.constant(t(vec![3], &[1., 1., 1.]));
        assert!(g.dot(a, short).is_err());
    }

    #[test]
    fn l2norm_gradient_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(vec![3]));
        let n = g.l2norm(x);
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![2, 4]));
        let ce = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);

        let z = g.constant(t(vec![1, 3], &[1e6, 0., 0.]));
        let ce = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.value(ce).item();
        assert!(v.is_finite() && v.abs() < 1e-12);

        assert!(matches!(
            g.softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2, 3], &[1., -2., 3., 0.5, 7., -1.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.; 6]);

        let mut g = Graph::new();
        let x = g.param(t(vec![2], &[1., 2.]));
        let d = g.dot(x, x).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);

        // diamond: y = x*x + x
        let mut g = Graph::new();
        let x = g.param(t(vec![3], &[1., -2., 0.5]));
        let sq = g.square(x);
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3., -3., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], &[1., 2.]));
        let y = g.dot(x, x).unwrap();
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let w = g.constant(t(vec![2], &[1., 2.]));
        let x = g.param(t(vec![2], &[3., 4.]));
        let d = g.dot(w, x).unwrap();
        g.backward(d).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn records_are_topological() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], &[1., 2.]));
        let y = g.relu(x);
        let z = g.add(y, x).unwrap();
        let _ = g.sum(z);
        for r in g.records() {
            assert!(r.inputs.iter().all(|&i| i < r.output));
        }
        assert!(g.is_leaf(x) && !g.is_leaf(y));
    }
}
