//! Reverse-mode autodiff on a flat tape of `f64` tensors.
//!
//! A [`Tape`] is rebuilt per forward pass (define-by-run). Node ids are
//! topologically ordered by construction, so backward is a single reverse
//! sweep. Convolutions go through im2col + GEMM; everything is CPU `f64`
//! so finite-difference checks resolve well below the 1e-4 gate.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, numerical_grad};

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

pub type NodeId = usize;

pub(crate) enum Op {
    Leaf,
    Add,
    /// Weighted sum of scalar inputs.
    AddScalars(Vec<f64>),
    Scale(f64),
    LeakyRelu(f64),
    Sigmoid,
    /// x [C,H,W], w [O,C,kh,kw], b [O]; caches the im2col matrix.
    Conv2d {
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    /// x [C,H,W], w [C,kh,kw], b [C]; one filter per channel.
    DepthwiseConv2d {
        stride: usize,
        pad: usize,
    },
    /// View of the input under a new shape (element order preserved).
    Reshape,
    UpsampleNearest(usize),
    AvgPool(usize),
    ConcatChannels,
    /// [C,H,W] -> [C]; caches flat argmax per channel (first max wins).
    GlobalMaxPool(Vec<usize>),
    GlobalAvgPool,
    /// x [n], w [m,n], b [m].
    Linear,
    /// e [K], maps [K,H,W] -> [H,W]: out = sum_k e_k * maps_k.
    ChannelWeightedSum,
    Softmax,
    /// Mean binary cross-entropy of probabilities against a fixed target.
    BceMean {
        target: ArrayD<f64>,
    },
    /// Cross-entropy from logits [C] against a class index.
    CrossEntropy {
        target: usize,
    },
}

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "node {id} is not a scalar");
        v.iter().next().copied().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { value, op, inputs });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> NodeId {
        self.leaf(value.into_dyn())
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> NodeId {
        self.leaf(value.into_dyn())
    }

    /// Backpropagates from a scalar output; returns one gradient per node
    /// (zeros where the node does not influence the output).
    pub fn backward(&self, out: NodeId) -> Vec<ArrayD<f64>> {
        assert_eq!(self.nodes[out].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(ArrayD::ones(IxDyn(&[1])));

        for id in (0..=out).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }

        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| ArrayD::zeros(self.nodes[i].value.raw_dim())))
            .collect()
    }

    fn accumulate_inputs(&self, id: NodeId, gy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[id];
        let input_grads = ops::backward_op(self, node, gy);
        for (&inp, g) in node.inputs.iter().zip(input_grads) {
            match &mut grads[inp] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }
    }
}

pub(crate) fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality().expect("expected rank-3 tensor")
}

pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// [C,H,W] -> [C*kh*kw, OH*OW] patch matrix.
pub(crate) fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    if let Some(xs) = x.as_slice() {
        let cs = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let out_base = row * (oh * ow);
                    let (j0, j1) = valid_j_range(w, ow, kj, stride, pad);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in 0..oh {
                        let src_i = (i * stride + ki) as isize - pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        let src_base = (ci * h + src_i as usize) * w;
                        let dst_base = out_base + i * ow;
                        if stride == 1 {
                            let s0 = src_base + j0 + kj - pad;
                            cs[dst_base + j0..dst_base + j1]
                                .copy_from_slice(&xs[s0..s0 + (j1 - j0)]);
                        } else {
                            for j in j0..j1 {
                                cs[dst_base + j] = xs[src_base + j * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
        return cols;
    }
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                for i in 0..oh {
                    let src_i = (i * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let src_j = (j * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        out_row[i * ow + j] = x[(ci, src_i as usize, src_j as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Output-column range `[j0, j1)` whose source column `j*stride + kj - pad`
/// lands inside `[0, w)`.
fn valid_j_range(w: usize, ow: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let j0 = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    let j1 = (w + pad).saturating_sub(kj).div_ceil(stride).min(ow);
    (j0.min(j1), j1)
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to [C,H,W].
pub(crate) fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let owned;
    let cs = match cols.as_slice() {
        Some(s) => s,
        None => {
            owned = cols.iter().copied().collect::<Vec<f64>>();
            &owned
        }
    };
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_base_row = row * (oh * ow);
                let (j0, j1) = valid_j_range(w, ow, kj, stride, pad);
                if j0 >= j1 {
                    continue;
                }
                for i in 0..oh {
                    let dst_i = (i * stride + ki) as isize - pad as isize;
                    if dst_i < 0 || dst_i >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + dst_i as usize) * w;
                    let src_base = src_base_row + i * ow;
                    if stride == 1 {
                        let d0 = dst_base + j0 + kj - pad;
                        for (dst, src) in xs[d0..d0 + (j1 - j0)]
                            .iter_mut()
                            .zip(&cs[src_base + j0..src_base + j1])
                        {
                            *dst += *src;
                        }
                    } else {
                        for j in j0..j1 {
                            xs[dst_base + j * stride + kj - pad] += cs[src_base + j];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn softmax1(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}
