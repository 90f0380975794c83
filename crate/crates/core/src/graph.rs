//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward pass records its operations into a [`Graph`]; calling
//! [`Graph::backward`] walks the tape in reverse and yields gradients for
//! every node that transitively depends on a leaf marked as trainable.
//! Attention, layer norm, convolution and cross-entropy are fused ops with
//! hand-written backward rules so a forward pass stays a few dozen nodes.

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key positions a query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Keys below `prefix` are visible to every query; beyond it, query `i`
    /// sees keys `j <= i`.
    PrefixCausal { prefix: usize },
}

impl AttnMask {
    #[inline]
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::PrefixCausal { prefix } => j < prefix || j <= i,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        memory: Option<(Var, Var)>,
        heads: usize,
        probs: Vec<f64>,
        mem_probs: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    PadPrompt {
        x: Var,
        prompt: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()))
    }

    /// Borrowed gradient buffer, if the node received one.
    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Positions of the border cells of a `(h+2)×(w+2)` padded grid, in
/// row-major order. This is the layout of a padding prompt.
pub fn border_cells(h: usize, w: usize) -> Vec<(usize, usize)> {
    let (hp, wp) = (h + 2, w + 2);
    let mut cells = Vec::with_capacity(2 * wp + 2 * h);
    for r in 0..hp {
        for c in 0..wp {
            if r == 0 || r == hp - 1 || c == 0 || c == wp - 1 {
                cells.push((r, c));
            }
        }
    }
    cells
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Inserts a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`) for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = if trans_b {
            assert_eq!(bv.cols(), k, "matmul inner dimension mismatch");
            bv.rows()
        } else {
            assert_eq!(bv.rows(), k, "matmul inner dimension mismatch");
            bv.cols()
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let n = av.cols();
        assert_eq!(bv.numel(), n, "row bias width mismatch");
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Tensor::new(shape, out), Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|v| v.max(0.0)).collect(),
        );
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshape(shape);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Stacks 2-D operands with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let width = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), width, "concat width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![rows, width], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Rows `start..end` of a 2-D operand.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let w = xv.cols();
        assert!(start <= end && end <= xv.rows());
        let data = xv.data()[start * w..end * w].to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![end - start, w], data),
            Op::SliceRows { x, start },
            rg,
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `memory` supplies extra key/value rows that every query may read. They
    /// add to the numerator of the attention average but not to its
    /// normalizer, so all-zero memory rows leave the output unchanged.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        memory: Option<(Var, Var)>,
        heads: usize,
        mask: AttnMask,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.rows(), tk);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (mk, mv) = match memory {
            Some((mk, mv)) => (Some(self.value(mk)), Some(self.value(mv))),
            None => (None, None),
        };
        let np = mk.map_or(0, |t| t.rows());

        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; heads * tq * tk];
        let mut mem_probs = vec![0.0; heads * tq * np];
        let mut qh = vec![0.0; tq * dh];
        let mut kh = vec![0.0; tk * dh];
        let mut vh = vec![0.0; tk * dh];
        let mut mkh = vec![0.0; np * dh];
        let mut mvh = vec![0.0; np * dh];
        let mut oh = vec![0.0; tq * dh];
        for h in 0..heads {
            gather_head(qv.data(), tq, d, h, dh, &mut qh);
            gather_head(kv.data(), tk, d, h, dh, &mut kh);
            gather_head(vv.data(), tk, d, h, dh, &mut vh);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, scale, &qh, false, &kh, true, 0.0, p);
            let r = &mut mem_probs[h * tq * np..(h + 1) * tq * np];
            if let (Some(mk), Some(_)) = (mk, mv) {
                gather_head(mk.data(), np, d, h, dh, &mut mkh);
                gemm(tq, dh, np, scale, &qh, false, &mkh, true, 0.0, r);
            }
            for i in 0..tq {
                let prow = &mut p[i * tk..(i + 1) * tk];
                let mut mx = f64::NEG_INFINITY;
                for (j, s) in prow.iter().enumerate() {
                    if mask.allows(i, j) && *s > mx {
                        mx = *s;
                    }
                }
                let mut z = 0.0;
                for (j, s) in prow.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        *s = (*s - mx).exp();
                        z += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                let inv = 1.0 / z;
                prow.iter_mut().for_each(|s| *s *= inv);
                for s in r[i * np..(i + 1) * np].iter_mut() {
                    *s = (*s - mx).exp() * inv;
                }
            }
            gemm(tq, tk, dh, 1.0, p, false, &vh, false, 0.0, &mut oh);
            if let Some(mv) = mv {
                gather_head(mv.data(), np, d, h, dh, &mut mvh);
                gemm(tq, np, dh, 1.0, r, false, &mvh, false, 1.0, &mut oh);
            }
            scatter_head(&oh, tq, d, h, dh, &mut out);
        }
        let mut rg = self.rg(q) || self.rg(k) || self.rg(v);
        if let Some((a, b)) = memory {
            rg |= self.rg(a) || self.rg(b);
        }
        if !rg {
            probs = Vec::new();
            mem_probs = Vec::new();
        }
        self.push(
            Tensor::new(vec![tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                memory,
                heads,
                probs,
                mem_probs,
            },
            rg,
        )
    }

    /// Looks up rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let w = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), w], data),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Pads a `[T, C, H, W]` stack by one cell on every side. Border cells
    /// take the values of `prompt` (`[C, border]`, laid out as
    /// [`border_cells`]) or zero when no prompt is given.
    pub fn pad_with_prompt(&mut self, x: Var, prompt: Option<Var>) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "pad expects a [T, C, H, W] stack");
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (hp, wp) = (h + 2, w + 2);
        let mut out = vec![0.0; t * c * hp * wp];
        let cells = border_cells(h, w);
        let pv = prompt.map(|p| self.value(p));
        if let Some(pv) = pv {
            assert_eq!(pv.shape(), &[c, cells.len()], "padding prompt geometry mismatch");
        }
        let xd = xv.data();
        for ti in 0..t {
            for ci in 0..c {
                let dst = &mut out[(ti * c + ci) * hp * wp..(ti * c + ci + 1) * hp * wp];
                let src = &xd[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w];
                for y in 0..h {
                    dst[(y + 1) * wp + 1..(y + 1) * wp + 1 + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
                if let Some(pv) = pv {
                    for (bi, &(r, cc)) in cells.iter().enumerate() {
                        dst[r * wp + cc] = pv.at(ci, bi);
                    }
                }
            }
        }
        let rg = self.rg(x) || prompt.is_some_and(|p| self.rg(p));
        self.push(
            Tensor::new(vec![t, c, hp, wp], out),
            Op::PadPrompt { x, prompt },
            rg,
        )
    }

    /// 3×3 stride-1 convolution over an already padded `[T, Cin, H+2, W+2]`
    /// stack with a `[Cout, Cin·9]` kernel matrix, producing `[T, Cout, H, W]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (t, cin, hp, wp) = (s[0], s[1], s[2], s[3]);
        let (h, w) = (hp - 2, wp - 2);
        let wv = self.value(weight);
        let cout = wv.rows();
        assert_eq!(wv.cols(), cin * 9, "conv kernel does not match input channels");
        let bv = self.value(bias);
        assert_eq!(bv.numel(), cout);
        let hw = h * w;
        let ncols = t * hw;
        let cols = im2col(xv.data(), t, cin, h, w);
        let mut tmp = vec![0.0; cout * ncols];
        gemm(cout, cin * 9, ncols, 1.0, wv.data(), false, &cols, false, 0.0, &mut tmp);
        let mut out = vec![0.0; t * cout * hw];
        for co in 0..cout {
            let b = bv.data()[co];
            for ti in 0..t {
                let src = &tmp[co * ncols + ti * hw..co * ncols + (ti + 1) * hw];
                let dst = &mut out[(ti * cout + co) * hw..(ti * cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::new(vec![t, cout, h, w], out),
            Op::Conv3x3 {
                x,
                weight,
                bias,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Var {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        assert_eq!(m, targets.len(), "logit rows must match target count");
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..n {
                probs[r * n + c] = (row[c] - mx).exp() / z;
            }
            if t != ignore {
                total += z.ln() + mx - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        )
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        if self.rg(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                // dA = G · op(B)ᵀ
                self.accum(grads, *a, |ga| {
                    gemm(m, n, k, 1.0, g, false, bv.data(), !*trans_b, 1.0, ga);
                });
                self.accum(grads, *b, |gb| {
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, 1.0, g, true, av.data(), false, 1.0, gb);
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, gb);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                self.accum(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(a, bias) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                let n = node.value.cols();
                self.accum(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += s * y;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accum(grads, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accum(grads, *a, |ga| add_into(ga, g)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accum(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let w = node.value.cols();
                self.accum(grads, *x, |gx| {
                    add_into(&mut gx[start * w..start * w + g.len()], g);
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gamma).data();
                self.accum(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                self.accum(grads, *beta, |gb| {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                });
                self.accum(grads, *x, |gx| {
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            let d = grow[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hrow[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for c in 0..n {
                            let d = grow[c] * gv[c];
                            dst[c] += rstd[r] * (d - mean_d - hrow[c] * mean_dh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                memory,
                heads,
                probs,
                mem_probs,
            } => self.backprop_attention(node, g, grads, (*q, *k, *v), *memory, *heads, probs, mem_probs),
            Op::Embed { table, ids } => {
                let w = node.value.cols();
                self.accum(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * w..(id + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::PadPrompt { x, prompt } => {
                let s = self.value(*x).shape();
                let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (hp, wp) = (h + 2, w + 2);
                self.accum(grads, *x, |gx| {
                    for tc in 0..t * c {
                        let src = &g[tc * hp * wp..(tc + 1) * hp * wp];
                        let dst = &mut gx[tc * h * w..(tc + 1) * h * w];
                        for y in 0..h {
                            add_into(
                                &mut dst[y * w..(y + 1) * w],
                                &src[(y + 1) * wp + 1..(y + 1) * wp + 1 + w],
                            );
                        }
                    }
                });
                if let Some(p) = prompt {
                    let cells = border_cells(h, w);
                    let nb = cells.len();
                    self.accum(grads, *p, |gp| {
                        for ti in 0..t {
                            for ci in 0..c {
                                let src = &g[(ti * c + ci) * hp * wp..];
                                for (bi, &(r, cc)) in cells.iter().enumerate() {
                                    gp[ci * nb + bi] += src[r * wp + cc];
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv3x3 {
                x,
                weight,
                bias,
                cols,
            } => {
                let s = self.value(*x).shape();
                let (t, cin, hp, wp) = (s[0], s[1], s[2], s[3]);
                let (h, w) = (hp - 2, wp - 2);
                let hw = h * w;
                let ncols = t * hw;
                let cout = node.value.shape()[1];
                // Re-layout the output gradient as [Cout, T·HW].
                let mut gt = vec![0.0; cout * ncols];
                for ti in 0..t {
                    for co in 0..cout {
                        gt[co * ncols + ti * hw..co * ncols + (ti + 1) * hw]
                            .copy_from_slice(&g[(ti * cout + co) * hw..(ti * cout + co + 1) * hw]);
                    }
                }
                self.accum(grads, *bias, |gb| {
                    for co in 0..cout {
                        gb[co] += gt[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
                    }
                });
                self.accum(grads, *weight, |gw| {
                    gemm(cout, ncols, cin * 9, 1.0, &gt, false, cols, true, 1.0, gw);
                });
                let wv = self.value(*weight).data();
                self.accum(grads, *x, |gx| {
                    let mut dcols = vec![0.0; cin * 9 * ncols];
                    gemm(cin * 9, cout, ncols, 1.0, wv, true, &gt, false, 0.0, &mut dcols);
                    col2im_add(&dcols, t, cin, h, w, gx);
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = node_cols(self.value(*logits));
                let scale = g[0] / *count as f64;
                self.accum(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..n {
                            gl[r * n + c] += scale * probs[r * n + c];
                        }
                        gl[r * n + t] -= scale;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        memory: Option<(Var, Var)>,
        heads: usize,
        probs: &[f64],
        mem_probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (mk, mv) = match memory {
            Some((a, b)) => (Some(self.value(a)), Some(self.value(b))),
            None => (None, None),
        };
        let np = mk.map_or(0, |t| t.rows());
        let out = node.value.data();

        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut dmk = vec![0.0; np * d];
        let mut dmv = vec![0.0; np * d];

        let mut qh = vec![0.0; tq * dh];
        let mut kh = vec![0.0; tk * dh];
        let mut vh = vec![0.0; tk * dh];
        let mut mkh = vec![0.0; np * dh];
        let mut mvh = vec![0.0; np * dh];
        let mut gh = vec![0.0; tq * dh];
        let mut oh = vec![0.0; tq * dh];
        let mut dp = vec![0.0; tq * tk];
        let mut dr = vec![0.0; tq * np];
        let mut tmp_q = vec![0.0; tq * dh];
        let mut tmp_k = vec![0.0; tk * dh];
        let mut tmp_m = vec![0.0; np * dh];
        for h in 0..heads {
            gather_head(qv.data(), tq, d, h, dh, &mut qh);
            gather_head(kv.data(), tk, d, h, dh, &mut kh);
            gather_head(vv.data(), tk, d, h, dh, &mut vh);
            gather_head(g, tq, d, h, dh, &mut gh);
            gather_head(out, tq, d, h, dh, &mut oh);
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let r = &mem_probs[h * tq * np..(h + 1) * tq * np];
            if np > 0 {
                gather_head(mk.unwrap().data(), np, d, h, dh, &mut mkh);
                gather_head(mv.unwrap().data(), np, d, h, dh, &mut mvh);
            }
            // dV = Pᵀ G, dMv = Rᵀ G
            gemm(tk, tq, dh, 1.0, p, true, &gh, false, 0.0, &mut tmp_k);
            scatter_head_add(&tmp_k, tk, d, h, dh, &mut dv);
            if np > 0 {
                gemm(np, tq, dh, 1.0, r, true, &gh, false, 0.0, &mut tmp_m);
                scatter_head_add(&tmp_m, np, d, h, dh, &mut dmv);
            }
            // dP = G Vᵀ, dR = G Mvᵀ
            gemm(tq, dh, tk, 1.0, &gh, false, &vh, true, 0.0, &mut dp);
            if np > 0 {
                gemm(tq, dh, np, 1.0, &gh, false, &mvh, true, 0.0, &mut dr);
            }
            for i in 0..tq {
                let dot: f64 = gh[i * dh..(i + 1) * dh]
                    .iter()
                    .zip(&oh[i * dh..(i + 1) * dh])
                    .map(|(a, b)| a * b)
                    .sum();
                for j in 0..tk {
                    dp[i * tk + j] = p[i * tk + j] * (dp[i * tk + j] - dot);
                }
                for j in 0..np {
                    dr[i * np + j] *= r[i * np + j];
                }
            }
            // dQ = (dS K + dM Mk)·scale
            gemm(tq, tk, dh, scale, &dp, false, &kh, false, 0.0, &mut tmp_q);
            if np > 0 {
                gemm(tq, np, dh, scale, &dr, false, &mkh, false, 1.0, &mut tmp_q);
            }
            scatter_head_add(&tmp_q, tq, d, h, dh, &mut dq);
            // dK = dSᵀ Q·scale, dMk = dMᵀ Q·scale
            gemm(tk, tq, dh, scale, &dp, true, &qh, false, 0.0, &mut tmp_k);
            scatter_head_add(&tmp_k, tk, d, h, dh, &mut dk);
            if np > 0 {
                gemm(np, tq, dh, scale, &dr, true, &qh, false, 0.0, &mut tmp_m);
                scatter_head_add(&tmp_m, np, d, h, dh, &mut dmk);
            }
        }
        self.accum(grads, q, |x| add_into(x, &dq));
        self.accum(grads, k, |x| add_into(x, &dk));
        self.accum(grads, v, |x| add_into(x, &dv));
        if let Some((a, b)) = memory {
            self.accum(grads, a, |x| add_into(x, &dmk));
            self.accum(grads, b, |x| add_into(x, &dmv));
        }
    }
}

fn node_cols(t: &Tensor) -> usize {
    t.cols()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gather_head(src: &[f64], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..rows {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn scatter_head_add(src: &[f64], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..rows {
        add_into(
            &mut dst[r * d + h * dh..r * d + (h + 1) * dh],
            &src[r * dh..(r + 1) * dh],
        );
    }
}

/// Lowers a padded `[T, C, H+2, W+2]` stack into a `[C·9, T·H·W]` patch matrix.
fn im2col(x: &[f64], t: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2, w + 2);
    let hw = h * w;
    let ncols = t * hw;
    let mut cols = vec![0.0; c * 9 * ncols];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * ncols..((ci * 9) + ky * 3 + kx + 1) * ncols];
                for ti in 0..t {
                    let plane = &x[(ti * c + ci) * hp * wp..(ti * c + ci + 1) * hp * wp];
                    for y in 0..h {
                        let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                        row[ti * hw + y * w..ti * hw + (y + 1) * w].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], t: usize, c: usize, h: usize, w: usize, gx: &mut [f64]) {
    let (hp, wp) = (h + 2, w + 2);
    let hw = h * w;
    let ncols = t * hw;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * ncols..((ci * 9) + ky * 3 + kx + 1) * ncols];
                for ti in 0..t {
                    let plane = &mut gx[(ti * c + ci) * hp * wp..(ti * c + ci + 1) * hp * wp];
                    for y in 0..h {
                        add_into(
                            &mut plane[(y + ky) * wp + kx..(y + ky) * wp + kx + w],
                            &row[ti * hw + y * w..ti * hw + (y + 1) * w],
                        );
                    }
                }
            }
        }
    }
}
