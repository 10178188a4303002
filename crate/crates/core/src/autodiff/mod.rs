//! Reverse-mode automatic differentiation over a static graph of dense f64 tensors.
//!
//! Volumetric tensors have shape `[C, X, Y, Z]` stored channel-major with x fastest.
//! A graph is built once, then run repeatedly: bind inputs, [`Graph::forward`],
//! [`Graph::backward`]. Parameter gradients accumulate into the [`ParamStore`].

pub mod gradcheck;
mod kernels;
mod params;

pub use params::{ParamBlock, ParamStore};

use kernels::ConvScratch;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Tensor shape. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn volume(channels: usize, dims: [usize; 3]) -> Self {
        Shape(vec![channels, dims[0], dims[1], dims[2]])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    fn as_volume(&self) -> Option<(usize, [usize; 3])> {
        match self.0.as_slice() {
            &[c, x, y, z] => Some((c, [x, y, z])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Full,
    Scalar,
    /// Single-channel operand repeated over channels; value is the per-channel length.
    Channel(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Channel(n) => i % n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param(usize),
    Conv3d { x: NodeId, w: NodeId },
    BiasAdd { x: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    MaxPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Binary { kind: BinKind, a: NodeId, b: NodeId, ba: Bcast, bb: Bcast },
    Affine { x: NodeId, scale: f64, shift: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Square { x: NodeId },
    Sqrt { x: NodeId },
    GridSample { image: NodeId, disp: NodeId },
    FieldGradient { u: NodeId },
    MaskedMean { x: NodeId, mask: NodeId },
}

struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    bound: bool,
    argmax: Vec<usize>,
}

/// Static computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    scratch: ConvScratch,
    evaluated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), scratch: ConvScratch::default(), evaluated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape, needs_grad: bool) -> NodeId {
        let n = shape.numel();
        let bound = !matches!(op, Op::Input);
        self.nodes.push(Node {
            op,
            shape,
            value: vec![0.0; n],
            grad: Vec::new(),
            needs_grad,
            bound,
            argmax: Vec::new(),
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} does not exist", id.0)))
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    /// Value computed by the last forward pass.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Gradient from the last backward pass; empty if the node does not require gradients.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Placeholder bound with [`Graph::set_input`] before every forward pass.
    pub fn input(&mut self, shape: Shape, requires_grad: bool) -> NodeId {
        self.push(Op::Input, shape, requires_grad)
    }

    pub fn constant(&mut self, shape: Shape, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "constant of shape {:?} needs {} values, got {}",
                shape.0,
                shape.numel(),
                data.len()
            )));
        }
        let id = self.push(Op::Constant, shape, false);
        self.nodes[id.0].value = data;
        Ok(id)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        let id = self.push(Op::Constant, Shape::scalar(), false);
        self.nodes[id.0].value[0] = v;
        id
    }

    /// Node reading the parameter block `block` of the store passed to forward.
    pub fn param(&mut self, store: &ParamStore, block: usize) -> Result<NodeId> {
        if block >= store.len() {
            return Err(Error::InvalidArgument(format!("parameter block {block} does not exist")));
        }
        let shape = Shape(store.block(block).shape.clone());
        Ok(self.push(Op::Param(block), shape, true))
    }

    pub fn set_input(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} does not exist", id.0)))?;
        if !matches!(node.op, Op::Input | Op::Constant) {
            return Err(Error::InvalidArgument(format!("node {} is not an input", id.0)));
        }
        if data.len() != node.value.len() {
            return Err(Error::ShapeMismatch(format!(
                "input {} of shape {:?} bound to {} values",
                id.0,
                node.shape.0,
                data.len()
            )));
        }
        node.value.copy_from_slice(data);
        node.bound = true;
        Ok(())
    }

    fn volume_shape(&self, id: NodeId, what: &str) -> Result<(usize, [usize; 3])> {
        self.node(id)?
            .shape
            .as_volume()
            .ok_or_else(|| Error::ShapeMismatch(format!("{what}: expected [C,X,Y,Z], got {:?}", self.nodes[id.0].shape.0)))
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// 3x3x3 convolution, stride 1, zero padding 1, no bias. Weights `[Cout, Cin, 3, 3, 3]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (cin, d) = self.volume_shape(x, "conv3d input")?;
        let ws = &self.node(w)?.shape.0;
        if ws.len() != 5 || ws[1] != cin || ws[2..] != [3, 3, 3] {
            return Err(Error::ShapeMismatch(format!("conv3d weight {ws:?} for {cin} input channels")));
        }
        let cout = ws[0];
        let ng = self.ng(&[x, w]);
        Ok(self.push(Op::Conv3d { x, w }, Shape::volume(cout, d), ng))
    }

    /// Adds a per-channel bias of shape `[C]`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, d) = self.volume_shape(x, "bias_add input")?;
        if self.node(b)?.shape.0 != [c] {
            return Err(Error::ShapeMismatch(format!("bias {:?} for {c} channels", self.nodes[b.0].shape.0)));
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(Op::BiasAdd { x, b }, Shape::volume(c, d), ng))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let shape = self.node(x)?.shape.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::LeakyRelu { x, slope }, shape, ng))
    }

    /// 2x2x2 max pooling; spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, d) = self.volume_shape(x, "max_pool2 input")?;
        if d.iter().any(|&n| n % 2 != 0 || n == 0) {
            return Err(Error::ShapeMismatch(format!("max_pool2 needs even dims, got {d:?}")));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::MaxPool2 { x }, Shape::volume(c, [d[0] / 2, d[1] / 2, d[2] / 2]), ng))
    }

    /// Factor-two trilinear upsampling with half-pixel alignment.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, d) = self.volume_shape(x, "upsample2 input")?;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Upsample2 { x }, Shape::volume(c, [2 * d[0], 2 * d[1], 2 * d[2]]), ng))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, da) = self.volume_shape(a, "concat lhs")?;
        let (cb, db) = self.volume_shape(b, "concat rhs")?;
        if da != db {
            return Err(Error::ShapeMismatch(format!("concat spatial dims {da:?} vs {db:?}")));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Concat { a, b }, Shape::volume(ca + cb, da), ng))
    }

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.node(a)?.shape.clone();
        let sb = self.node(b)?.shape.clone();
        let (shape, ba, bb) = if sa == sb {
            (sa, Bcast::Full, Bcast::Full)
        } else if sb.is_scalar() {
            (sa, Bcast::Full, Bcast::Scalar)
        } else if sa.is_scalar() {
            (sb, Bcast::Scalar, Bcast::Full)
        } else {
            match (sa.as_volume(), sb.as_volume()) {
                (Some((ca, da)), Some((1, db))) if da == db => {
                    let n = da[0] * da[1] * da[2];
                    (Shape::volume(ca, da), Bcast::Full, Bcast::Channel(n))
                }
                (Some((1, da)), Some((cb, db))) if da == db => {
                    let n = da[0] * da[1] * da[2];
                    (Shape::volume(cb, db), Bcast::Channel(n), Bcast::Full)
                }
                _ => {
                    return Err(Error::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", sa.0, sb.0)));
                }
            }
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Binary { kind, a, b, ba, bb }, shape, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Div, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let shape = self.node(x)?.shape.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Affine { x, scale, shift }, shape, ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.node(x)?;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Sum { x }, Shape::scalar(), ng))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        if self.node(x)?.shape.numel() == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Mean { x }, Shape::scalar(), ng))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.node(x)?.shape.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Square { x }, shape, ng))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.node(x)?.shape.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Sqrt { x }, shape, ng))
    }

    /// Backward warp `out(x) = image(x + u(x))` with trilinear interpolation and border clamp.
    /// `image` is `[1,X,Y,Z]`, `disp` is `[3,X,Y,Z]` in voxels on the same grid.
    pub fn grid_sample(&mut self, image: NodeId, disp: NodeId) -> Result<NodeId> {
        let (ci, di) = self.volume_shape(image, "grid_sample image")?;
        let (cd, dd) = self.volume_shape(disp, "grid_sample displacement")?;
        if ci != 1 || cd != 3 || di != dd {
            return Err(Error::ShapeMismatch(format!(
                "grid_sample image {:?} with displacement {:?}",
                self.nodes[image.0].shape.0, self.nodes[disp.0].shape.0
            )));
        }
        let ng = self.ng(&[image, disp]);
        Ok(self.push(Op::GridSample { image, disp }, Shape::volume(1, di), ng))
    }

    /// Forward differences of each channel along x, y, z (zero at the far face).
    /// Output has `3C` channels ordered `(c, axis)`.
    pub fn field_gradient(&mut self, u: NodeId) -> Result<NodeId> {
        let (c, d) = self.volume_shape(u, "field_gradient input")?;
        let ng = self.ng(&[u]);
        Ok(self.push(Op::FieldGradient { u }, Shape::volume(3 * c, d), ng))
    }

    /// `sum(x * mask) / sum(mask)`. The mask is treated as a constant and must not need gradients.
    pub fn masked_mean(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let nx = self.node(x)?.shape.numel();
        let nm = self.node(mask)?;
        if nm.shape.numel() != nx {
            return Err(Error::ShapeMismatch(format!("masked_mean mask {:?} for {nx} values", nm.shape.0)));
        }
        if nm.needs_grad {
            return Err(Error::InvalidArgument("masked_mean mask must not require gradients".into()));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::MaskedMean { x, mask }, Shape::scalar(), ng))
    }

    /// Evaluates every node in insertion order.
    pub fn forward(&mut self, store: &ParamStore) -> Result<()> {
        for i in 0..self.nodes.len() {
            self.eval_node(i, store)?;
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize, store: &ParamStore) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let v = |id: NodeId| -> &[f64] { &before[id.0].value };
        match node.op {
            Op::Input => {
                if !node.bound {
                    return Err(Error::UnboundInput(i));
                }
            }
            Op::Constant => {}
            Op::Param(b) => {
                let block = store
                    .blocks()
                    .get(b)
                    .ok_or_else(|| Error::InvalidArgument(format!("parameter block {b} missing from store")))?;
                if block.value.len() != node.value.len() {
                    return Err(Error::ShapeMismatch(format!("parameter {:?} changed shape", block.name)));
                }
                node.value.copy_from_slice(&block.value);
            }
            Op::Conv3d { x, w } => {
                let (cin, d) = before[x.0].shape.as_volume().expect("checked at build");
                let cout = node.shape.0[0];
                kernels::conv3d_forward(v(x), v(w), cin, cout, d, &mut node.value, &mut self.scratch);
            }
            Op::BiasAdd { x, b } => {
                let c = node.shape.0[0];
                let n = node.value.len() / c;
                let (xv, bv) = (v(x), v(b));
                for ch in 0..c {
                    for idx in ch * n..(ch + 1) * n {
                        node.value[idx] = xv[idx] + bv[ch];
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                for (o, &a) in node.value.iter_mut().zip(v(x)) {
                    *o = if a > 0.0 { a } else { slope * a };
                }
            }
            Op::MaxPool2 { x } => {
                let (c, d) = before[x.0].shape.as_volume().expect("checked at build");
                node.argmax.resize(node.value.len(), 0);
                kernels::maxpool2_forward(v(x), c, d, &mut node.value, &mut node.argmax);
            }
            Op::Upsample2 { x } => {
                let (c, d) = before[x.0].shape.as_volume().expect("checked at build");
                kernels::upsample2_forward(v(x), c, d, &mut node.value);
            }
            Op::Concat { a, b } => {
                let na = before[a.0].value.len();
                node.value[..na].copy_from_slice(v(a));
                node.value[na..].copy_from_slice(v(b));
            }
            Op::Binary { kind, a, b, ba, bb } => {
                let (av, bv) = (v(a), v(b));
                for (idx, o) in node.value.iter_mut().enumerate() {
                    let (p, q) = (av[ba.index(idx)], bv[bb.index(idx)]);
                    *o = match kind {
                        BinKind::Add => p + q,
                        BinKind::Sub => p - q,
                        BinKind::Mul => p * q,
                        BinKind::Div => p / q,
                    };
                }
            }
            Op::Affine { x, scale, shift } => {
                for (o, &a) in node.value.iter_mut().zip(v(x)) {
                    *o = scale * a + shift;
                }
            }
            Op::Sum { x } => node.value[0] = v(x).iter().sum(),
            Op::Mean { x } => {
                let xv = v(x);
                node.value[0] = xv.iter().sum::<f64>() / xv.len() as f64;
            }
            Op::Square { x } => {
                for (o, &a) in node.value.iter_mut().zip(v(x)) {
                    *o = a * a;
                }
            }
            Op::Sqrt { x } => {
                for (o, &a) in node.value.iter_mut().zip(v(x)) {
                    *o = a.sqrt();
                }
            }
            Op::GridSample { image, disp } => {
                let (_, d) = before[image.0].shape.as_volume().expect("checked at build");
                kernels::grid_sample_forward(v(image), v(disp), d, &mut node.value);
            }
            Op::FieldGradient { u } => {
                let (c, d) = before[u.0].shape.as_volume().expect("checked at build");
                kernels::field_gradient_forward(v(u), c, d, &mut node.value);
            }
            Op::MaskedMean { x, mask } => {
                let (xv, mv) = (v(x), v(mask));
                let msum: f64 = mv.iter().sum();
                if msum == 0.0 {
                    return Err(Error::Empty(format!("masked_mean at node {i}: mask is empty")));
                }
                node.value[0] = xv.iter().zip(mv).map(|(a, m)| a * m).sum::<f64>() / msum;
            }
        }
        Ok(())
    }

    /// Reverse pass from the scalar `output`. Node gradients are overwritten; parameter
    /// gradients are added to `store`.
    pub fn backward(&mut self, output: NodeId, store: &mut ParamStore) -> Result<()> {
        if !self.evaluated {
            return Err(Error::InvalidArgument("backward called before forward".into()));
        }
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput { node: output.0, len: out.value.len() });
        }
        for n in self.nodes.iter_mut() {
            if n.needs_grad {
                n.grad.clear();
                n.grad.resize(n.value.len(), 0.0);
            } else {
                n.grad.clear();
            }
        }
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        self.nodes[output.0].grad[0] = 1.0;
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Param(b) = self.nodes[i].op {
                let g = &self.nodes[i].grad;
                for (dst, &src) in store.block_mut(b).grad.iter_mut().zip(g) {
                    *dst += src;
                }
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = &node.grad;
        match node.op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::Conv3d { x, w } => {
                let (cin, d) = before[x.0].shape.as_volume().expect("checked at build");
                let cout = node.shape.0[0];
                let (xi, wi) = (x.0, w.0);
                let mut gx = std::mem::take(&mut before[xi].grad);
                let mut gw = std::mem::take(&mut before[wi].grad);
                kernels::conv3d_backward(
                    &before[xi].value,
                    &before[wi].value,
                    g,
                    cin,
                    cout,
                    d,
                    before[xi].needs_grad.then_some(gx.as_mut_slice()),
                    before[wi].needs_grad.then_some(gw.as_mut_slice()),
                    &mut self.scratch,
                );
                before[xi].grad = gx;
                before[wi].grad = gw;
            }
            Op::BiasAdd { x, b } => {
                let c = node.shape.0[0];
                let n = g.len() / c;
                if before[x.0].needs_grad {
                    for (d, s) in before[x.0].grad.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if before[b.0].needs_grad {
                    for ch in 0..c {
                        before[b.0].grad[ch] += g[ch * n..(ch + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let src = &mut before[x.0];
                for ((d, &a), &gv) in src.grad.iter_mut().zip(&src.value).zip(g) {
                    *d += if a > 0.0 { gv } else { slope * gv };
                }
            }
            Op::MaxPool2 { x } if before[x.0].needs_grad => {
                for (&idx, &gv) in node.argmax.iter().zip(g) {
                    before[x.0].grad[idx] += gv;
                }
            }
            Op::Upsample2 { x } if before[x.0].needs_grad => {
                let (c, d) = before[x.0].shape.as_volume().expect("checked at build");
                kernels::upsample2_backward(g, c, d, &mut before[x.0].grad);
            }
            Op::Concat { a, b } => {
                let na = before[a.0].value.len();
                if before[a.0].needs_grad {
                    for (d, s) in before[a.0].grad.iter_mut().zip(&g[..na]) {
                        *d += s;
                    }
                }
                if before[b.0].needs_grad {
                    for (d, s) in before[b.0].grad.iter_mut().zip(&g[na..]) {
                        *d += s;
                    }
                }
            }
            Op::Binary { kind, a, b, ba, bb } => {
                let (ia, ib) = (a.0, b.0);
                let (nga, ngb) = (before[ia].needs_grad, before[ib].needs_grad);
                let mut ga = std::mem::take(&mut before[ia].grad);
                let mut gb = if ia == ib { Vec::new() } else { std::mem::take(&mut before[ib].grad) };
                let (av, bv) = (&before[ia].value, &before[ib].value);
                for (idx, &gv) in g.iter().enumerate() {
                    let (ja, jb) = (ba.index(idx), bb.index(idx));
                    let (p, q) = (av[ja], bv[jb]);
                    let (da, db) = match kind {
                        BinKind::Add => (gv, gv),
                        BinKind::Sub => (gv, -gv),
                        BinKind::Mul => (gv * q, gv * p),
                        BinKind::Div => (gv / q, -gv * p / (q * q)),
                    };
                    if ia == ib {
                        if nga {
                            ga[ja] += da + db;
                        }
                    } else {
                        if nga {
                            ga[ja] += da;
                        }
                        if ngb {
                            gb[jb] += db;
                        }
                    }
                }
                before[ia].grad = ga;
                if ia != ib {
                    before[ib].grad = gb;
                }
            }
            Op::Affine { x, scale, .. } => {
                for (d, &s) in before[x.0].grad.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
            Op::Sum { x } => {
                let gv = g[0];
                before[x.0].grad.iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean { x } => {
                let gv = g[0] / before[x.0].value.len() as f64;
                before[x.0].grad.iter_mut().for_each(|d| *d += gv);
            }
            Op::Square { x } => {
                let src = &mut before[x.0];
                for ((d, &a), &gv) in src.grad.iter_mut().zip(&src.value).zip(g) {
                    *d += 2.0 * a * gv;
                }
            }
            Op::Sqrt { x } => {
                for ((d, &o), &gv) in before[x.0].grad.iter_mut().zip(&node.value).zip(g) {
                    *d += 0.5 * gv / o;
                }
            }
            Op::GridSample { image, disp } => {
                let (_, d) = before[image.0].shape.as_volume().expect("checked at build");
                let (ii, di) = (image.0, disp.0);
                let mut gi = std::mem::take(&mut before[ii].grad);
                let mut gd = std::mem::take(&mut before[di].grad);
                kernels::grid_sample_backward(
                    &before[ii].value,
                    &before[di].value,
                    d,
                    g,
                    before[ii].needs_grad.then_some(gi.as_mut_slice()),
                    before[di].needs_grad.then_some(gd.as_mut_slice()),
                );
                before[ii].grad = gi;
                before[di].grad = gd;
            }
            Op::FieldGradient { u } if before[u.0].needs_grad => {
                let (c, d) = before[u.0].shape.as_volume().expect("checked at build");
                kernels::field_gradient_backward(g, c, d, &mut before[u.0].grad);
            }
            Op::MaskedMean { x, mask } => {
                let mut gx = std::mem::take(&mut before[x.0].grad);
                let mv = &before[mask.0].value;
                let gv = g[0] / mv.iter().sum::<f64>();
                for (d, m) in gx.iter_mut().zip(mv) {
                    *d += gv * m;
                }
                before[x.0].grad = gx;
            }
            Op::MaxPool2 { .. } | Op::Upsample2 { .. } | Op::FieldGradient { .. } => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], w: &[f64], cin: usize, cout: usize, d: [usize; 3]) -> Vec<f64> {
        let n = d[0] * d[1] * d[2];
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (a, b, c) = (i as isize + kx - 1, j as isize + ky - 1, k as isize + kz - 1);
                                        if a < 0 || b < 0 || c < 0 || a >= d[0] as isize || b >= d[1] as isize || c >= d[2] as isize {
                                            continue;
                                        }
                                        let xi = ci * n + a as usize + d[0] * (b as usize + d[1] * c as usize);
                                        let wi = (co * cin + ci) * 27 + (kz * 9 + ky * 3 + kx) as usize;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[co * n + i + d[0] * (j + d[1] * k)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (cin, cout, d) in [(1, 1, [3, 3, 3]), (2, 3, [5, 4, 6]), (3, 2, [1, 2, 7])] {
            let n = d[0] * d[1] * d[2];
            let x: Vec<f64> = (0..cin * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..cin * cout * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut store = ParamStore::new();
            let wb = store.add("w", &[cout, cin, 3, 3, 3], w.clone()).unwrap();
            let mut g = Graph::new();
            let xi = g.input(Shape::volume(cin, d), false);
            let wn = g.param(&store, wb).unwrap();
            let y = g.conv3d(xi, wn).unwrap();
            g.set_input(xi, &x).unwrap();
            g.forward(&store).unwrap();
            let expect = naive_conv(&x, &w, cin, cout, d);
            for (a, b) in g.value(y).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_hand_values() {
        let mut g = Graph::new();
        let x = g.input(Shape::volume(1, [2, 1, 1]), false);
        let y = g.upsample2(x).unwrap();
        g.set_input(x, &[0.0, 4.0]).unwrap();
        g.forward(&ParamStore::new()).unwrap();
        // along x: [0, 1, 3, 4]; y and z replicate
        assert_eq!(&g.value(y)[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(g.value(y).len(), 4 * 2 * 2);
        assert!(g.value(y)[4..8].iter().zip([0.0, 1.0, 3.0, 4.0]).all(|(a, b)| *a == b));
    }

    #[test]
    fn max_pool_picks_block_maximum() {
        let mut g = Graph::new();
        let x = g.input(Shape::volume(1, [2, 2, 2]), false);
        let y = g.max_pool2(x).unwrap();
        g.set_input(x, &[1.0, 5.0, -2.0, 3.0, 0.0, 4.0, 2.0, 1.0]).unwrap();
        g.forward(&ParamStore::new()).unwrap();
        assert_eq!(g.value(y), &[5.0]);
        let odd = g.input(Shape::volume(1, [3, 2, 2]), false);
        assert!(g.max_pool2(odd).is_err());
    }

    #[test]
    fn grid_sample_gradient_of_linear_image() {
        // image(x) = 2x + 3y - z: d out / d u is the constant image gradient away from borders
        let d = [6, 6, 6];
        let n = 216;
        let img: Vec<f64> = (0..n).map(|i| 2.0 * (i % 6) as f64 + 3.0 * ((i / 6) % 6) as f64 - (i / 36) as f64).collect();
        let mut g = Graph::new();
        let im = g.constant(Shape::volume(1, d), img).unwrap();
        let u = g.input(Shape::volume(3, d), true);
        let w = g.grid_sample(im, u).unwrap();
        let s = g.sum(w).unwrap();
        g.set_input(u, &vec![0.3; 3 * n]).unwrap();
        let mut store = ParamStore::new();
        g.forward(&store).unwrap();
        g.backward(s, &mut store).unwrap();
        for idx in 0..n {
            let c = [idx % 6, (idx / 6) % 6, idx / 36];
            if c.iter().all(|&v| v < 5) {
                assert!((g.grad(u)[idx] - 2.0).abs() < 1e-12);
                assert!((g.grad(u)[n + idx] - 3.0).abs() < 1e-12);
                assert!((g.grad(u)[2 * n + idx] + 1.0).abs() < 1e-12);
                let expect = 2.0 * (c[0] as f64 + 0.3) + 3.0 * (c[1] as f64 + 0.3) - (c[2] as f64 + 0.3);
                assert!((g.value(w)[idx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut store = ParamStore::new();
            let wb = store.add("w", &[2, 1, 3, 3, 3], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut g = Graph::new();
            let x = g.input(Shape::volume(1, [4, 4, 4]), false);
            let w = g.param(&store, wb).unwrap();
            let c = g.conv3d(x, w).unwrap();
            let a = g.leaky_relu(c, 0.2).unwrap();
            let q = g.square(a).unwrap();
            let l = g.mean(q).unwrap();
            g.set_input(x, &(0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            g.forward(&store).unwrap();
            g.backward(l, &mut store).unwrap();
            (g.scalar(l).to_bits(), store.block(wb).grad.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trivial_graphs() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Shape::volume(1, [2, 2, 2]), true);
        let y = g.affine(x, 2.0, 1.0).unwrap();
        let q = g.square(x).unwrap();
        let s = g.sum(q).unwrap();
        let xs = [0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 3.0, 1.0];
        g.set_input(x, &[1.0; 8]).unwrap();
        g.forward(&store).unwrap();
        assert_eq!(g.value(y), &[3.0; 8]);
        g.set_input(x, &xs).unwrap();
        g.forward(&store).unwrap();
        g.backward(s, &mut store).unwrap();
        for (gx, x) in g.grad(x).iter().zip(xs) {
            assert_eq!(*gx, 2.0 * x);
        }
    }

    #[test]
    fn random_graph_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = [4, 2, 4];
        let n = 32;
        let a: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut g = Graph::new();
        let an = g.input(Shape::volume(2, d), false);
        let bn = g.input(Shape::volume(1, d), false);
        let p = g.mul(an, bn).unwrap();
        let r = g.leaky_relu(p, 0.1).unwrap();
        let q = g.div(r, bn).unwrap();
        let c = g.concat(q, bn).unwrap();
        let sq = g.sqrt(bn).unwrap();
        let e = g.sub(c, sq).unwrap();
        let m = g.mean(e).unwrap();
        g.set_input(an, &a).unwrap();
        g.set_input(bn, &b).unwrap();
        g.forward(&ParamStore::new()).unwrap();
        let mut expect = 0.0;
        for ch in 0..3 {
            for i in 0..n {
                let v = if ch < 2 {
                    let p = a[ch * n + i] * b[i];
                    let r = if p > 0.0 { p } else { 0.1 * p };
                    r / b[i]
                } else {
                    b[i]
                };
                expect += v - b[i].sqrt();
            }
        }
        expect /= (3 * n) as f64;
        assert!((g.scalar(m) - expect).abs() < 1e-12);
    }

    #[test]
    fn grid_sample_corner_weight_derivative_in_one_cell() {
        let d = [2, 2, 2];
        let img = [1.0, 4.0, -2.0, 0.5, 3.0, 2.0, -1.0, 5.0];
        let (fx, fy, fz) = (0.3, 0.6, 0.2);
        let mut disp = vec![0.0; 24];
        // only voxel 0 matters; others sampled at clamped corners
        disp[0] = fx;
        disp[8] = fy;
        disp[16] = fz;
        let mut g = Graph::new();
        let im = g.constant(Shape::volume(1, d), img.to_vec()).unwrap();
        let u = g.input(Shape::volume(3, d), true);
        let w = g.grid_sample(im, u).unwrap();
        let sel = g.constant(Shape::volume(1, d), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = g.mul(w, sel).unwrap();
        let s = g.sum(p).unwrap();
        g.set_input(u, &disp).unwrap();
        let mut store = ParamStore::new();
        g.forward(&store).unwrap();
        g.backward(s, &mut store).unwrap();
        let v = |i: usize, j: usize, k: usize| img[i + 2 * (j + 2 * k)];
        let mut dx = 0.0;
        let mut dy = 0.0;
        let mut dz = 0.0;
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let wx = if i == 1 { fx } else { 1.0 - fx };
                    let wy = if j == 1 { fy } else { 1.0 - fy };
                    let wz = if k == 1 { fz } else { 1.0 - fz };
                    let sx = if i == 1 { 1.0 } else { -1.0 };
                    let sy = if j == 1 { 1.0 } else { -1.0 };
                    let sz = if k == 1 { 1.0 } else { -1.0 };
                    dx += sx * wy * wz * v(i, j, k);
                    dy += wx * sy * wz * v(i, j, k);
                    dz += wx * wy * sz * v(i, j, k);
                }
            }
        }
        assert!((g.grad(u)[0] - dx).abs() < 1e-14);
        assert!((g.grad(u)[8] - dy).abs() < 1e-14);
        assert!((g.grad(u)[16] - dz).abs() < 1e-14);
    }

    #[test]
    fn errors_for_misuse() {
        let mut g = Graph::new();
        let x = g.input(Shape::volume(1, [2, 2, 2]), true);
        let s = g.sum(x).unwrap();
        let mut store = ParamStore::new();
        assert!(matches!(g.forward(&store), Err(Error::UnboundInput(0))));
        assert!(g.set_input(x, &[0.0; 3]).is_err());
        g.set_input(x, &[1.0; 8]).unwrap();
        g.forward(&store).unwrap();
        assert!(matches!(g.backward(x, &mut store), Err(Error::NonScalarOutput { .. })));
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.grad(x), &[1.0; 8]);
        let y = g.input(Shape::volume(2, [2, 2, 3]), false);
        assert!(g.add(x, y).is_err());
        let m = g.input(Shape::volume(1, [2, 2, 2]), true);
        assert!(g.masked_mean(x, m).is_err());
    }
}
