use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use super::{as3, col2im, conv_out_len, im2col, softmax1, Node, NodeId, Op, Tape};

pub(crate) const BCE_EPS: f64 = 1e-7;

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add, vec![a, b])
    }

    /// Weighted sum of scalar nodes, e.g. a loss total.
    pub fn add_scalars(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let s: f64 = terms.iter().map(|&(id, w)| self.scalar(id) * w).sum();
        let (ids, ws): (Vec<_>, Vec<_>) = terms.iter().copied().unzip();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::AddScalars(ws),
            ids,
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t * c);
        self.push(v, Op::Scale(c), vec![x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| if t > 0.0 { t } else { alpha * t });
        self.push(v, Op::LeakyRelu(alpha), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid, vec![x])
    }

    /// 2-D cross-correlation. x [C,H,W], w [O,C,kh,kw], b [O] -> [O,OH,OW].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let wd = wv.shape();
        let (o, c, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        let (xc, h, wdt) = xv.dim();
        assert_eq!(xc, c, "conv2d channel mismatch");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wdt, kw, stride, pad);

        let cols = im2col(&xv, kh, kw, stride, pad);
        let w2 = wv
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let mut out2 = w2.dot(&cols);
        for (mut row, &bias) in out2.outer_iter_mut().zip(bv.iter()) {
            row += bias;
        }
        let out = out2.into_shape_with_order((o, oh, ow)).unwrap();
        self.push(out.into_dyn(), Op::Conv2d { stride, pad, cols }, vec![x, w, b])
    }

    /// Depthwise 2-D cross-correlation. x [C,H,W], w [C,kh,kw], b [C].
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let wv = as3(&self.nodes[w].value);
        let bv = &self.nodes[b].value;
        let (c, h, wdt) = xv.dim();
        let (wc, kh, kw) = wv.dim();
        assert_eq!(c, wc, "depthwise channel mismatch");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wdt, kw, stride, pad);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            let bias = bv[ci];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias;
                    for ki in 0..kh {
                        let si = (i * stride + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let sj = (j * stride + kj) as isize - pad as isize;
                            if sj < 0 || sj >= wdt as isize {
                                continue;
                            }
                            acc += wv[(ci, ki, kj)] * xv[(ci, si as usize, sj as usize)];
                        }
                    }
                    out[(ci, i, j)] = acc;
                }
            }
        }
        self.push(out.into_dyn(), Op::DepthwiseConv2d { stride, pad }, vec![x, w, b])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        self.push(v, Op::Reshape, vec![x])
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h * factor, w * factor));
        for ci in 0..c {
            for si in 0..h {
                // Fill the first output row of the block, then replicate it.
                let src = xv.slice(ndarray::s![ci, si, ..]);
                let mut row0 = out.slice_mut(ndarray::s![ci, si * factor, ..]);
                let row0s = row0.as_slice_mut().unwrap();
                for (sj, &v) in src.iter().enumerate() {
                    row0s[sj * factor..(sj + 1) * factor].fill(v);
                }
                let row0 = row0s.to_vec();
                for di in 1..factor {
                    out.slice_mut(ndarray::s![ci, si * factor + di, ..])
                        .as_slice_mut()
                        .unwrap()
                        .copy_from_slice(&row0);
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest(factor), vec![x])
    }

    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        assert!(h % factor == 0 && w % factor == 0, "avg_pool needs divisible dims");
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..factor {
                        for dj in 0..factor {
                            acc += xv[(ci, i * factor + di, j * factor + dj)];
                        }
                    }
                    out[(ci, i, j)] = acc * norm;
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool(factor), vec![x])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as3(&self.nodes[a].value);
        let bv = as3(&self.nodes[b].value);
        assert_eq!(av.dim().1, bv.dim().1);
        assert_eq!(av.dim().2, bv.dim().2);
        let v = ndarray::concatenate(Axis(0), &[av, bv]).unwrap();
        self.push(v.into_dyn(), Op::ConcatChannels, vec![a, b])
    }

    /// [C,H,W] -> [C], max over spatial positions; ties go to the first index.
    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        let mut out = Array1::<f64>::zeros(c);
        let mut arg = vec![0usize; c];
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0usize;
            for i in 0..h {
                for j in 0..w {
                    let v = xv[(ci, i, j)];
                    if v > best {
                        best = v;
                        best_at = i * w + j;
                    }
                }
            }
            out[ci] = best;
            arg[ci] = best_at;
        }
        self.push(out.into_dyn(), Op::GlobalMaxPool(arg), vec![x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = as3(&self.nodes[x].value);
        let (c, h, w) = xv.dim();
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = xv.index_axis(Axis(0), ci).sum() / (h * w) as f64;
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool, vec![x])
    }

    /// x [n], w [m,n], b [m] -> [m].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv: Array1<f64> = self.nodes[x].value.view().into_dimensionality().unwrap().to_owned();
        let wv: Array2<f64> = self.nodes[w].value.view().into_dimensionality().unwrap().to_owned();
        let bv: Array1<f64> = self.nodes[b].value.view().into_dimensionality().unwrap().to_owned();
        let v = wv.dot(&xv) + &bv;
        self.push(v.into_dyn(), Op::Linear, vec![x, w, b])
    }

    /// e [K], maps [K,H,W] -> [H,W]: the scalar-product fusion of an
    /// embedding with feature maps.
    pub fn channel_weighted_sum(&mut self, e: NodeId, maps: NodeId) -> NodeId {
        let ev: Array1<f64> = self.nodes[e].value.view().into_dimensionality().unwrap().to_owned();
        let mv = as3(&self.nodes[maps].value);
        let (k, h, w) = mv.dim();
        assert_eq!(ev.len(), k, "embedding length must match channel count");
        let mut out = Array2::<f64>::zeros((h, w));
        for ki in 0..k {
            out.scaled_add(ev[ki], &mv.index_axis(Axis(0), ki));
        }
        self.push(out.into_dyn(), Op::ChannelWeightedSum, vec![e, maps])
    }

    pub fn softmax(&mut self, z: NodeId) -> NodeId {
        let zv: Array1<f64> = self.nodes[z].value.view().into_dimensionality().unwrap().to_owned();
        self.push(softmax1(&zv).into_dyn(), Op::Softmax, vec![z])
    }

    /// Mean BCE of probabilities `p` against binary target, clamped to
    /// [eps, 1-eps] with eps = 1e-7.
    pub fn bce_mean(&mut self, p: NodeId, target: ArrayD<f64>) -> NodeId {
        let pv = &self.nodes[p].value;
        assert_eq!(pv.shape(), target.shape(), "bce shape mismatch");
        let n = pv.len() as f64;
        let mut loss = 0.0;
        for (&pi, &ti) in pv.iter().zip(target.iter()) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss / n),
            Op::BceMean { target },
            vec![p],
        )
    }

    /// Cross-entropy of logits [C] against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let zv: Array1<f64> = self.nodes[logits].value.view().into_dimensionality().unwrap().to_owned();
        assert!(target < zv.len());
        let m = zv.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + zv.mapv(|v| (v - m).exp()).sum().ln();
        let loss = lse - zv[target];
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Op::CrossEntropy { target },
            vec![logits],
        )
    }
}

/// Per-op vector-Jacobian product; returns one gradient per input.
pub(crate) fn backward_op(tape: &Tape, node: &Node, gy: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
    match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![gy.clone(), gy.clone()],
        Op::AddScalars(ws) => {
            let g = gy[[0]];
            ws.iter()
                .map(|&w| ArrayD::from_elem(IxDyn(&[1]), g * w))
                .collect()
        }
        Op::Scale(c) => vec![gy.mapv(|t| t * c)],
        Op::Reshape => {
            let from = tape.nodes[node.inputs[0]].value.shape();
            vec![gy.clone().into_shape_with_order(IxDyn(from)).unwrap()]
        }
        Op::LeakyRelu(alpha) => {
            let x = &tape.nodes[node.inputs[0]].value;
            let mut g = gy.clone();
            ndarray::Zip::from(&mut g).and(x).for_each(|gi, &xi| {
                if xi <= 0.0 {
                    *gi *= alpha;
                }
            });
            vec![g]
        }
        Op::Sigmoid => {
            let y = &node.value;
            let mut g = gy.clone();
            ndarray::Zip::from(&mut g).and(y).for_each(|gi, &yi| {
                *gi *= yi * (1.0 - yi);
            });
            vec![g]
        }
        Op::Conv2d { stride, pad, cols } => {
            let xv = as3(&tape.nodes[node.inputs[0]].value);
            let wv = &tape.nodes[node.inputs[1]].value;
            let wd = wv.shape();
            let (o, c, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
            let (xc, h, w) = xv.dim();
            let gy3 = as3(gy);
            let (_, oh, ow) = gy3.dim();
            let gy2 = gy3.into_shape_with_order((o, oh * ow)).unwrap().to_owned();

            let db = gy2.sum_axis(Axis(1));
            let dw2 = gy2.dot(&cols.t());
            let dw = dw2.into_shape_with_order((o, c, kh, kw)).unwrap();
            let w2 = wv
                .view()
                .into_shape_with_order((o, c * kh * kw))
                .unwrap()
                .to_owned();
            let dcols = w2.t().dot(&gy2);
            let dx = col2im(&dcols, xc, h, w, kh, kw, *stride, *pad);
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        }
        Op::DepthwiseConv2d { stride, pad } => {
            let xv = as3(&tape.nodes[node.inputs[0]].value);
            let wv = as3(&tape.nodes[node.inputs[1]].value);
            let (c, h, w) = xv.dim();
            let (_, kh, kw) = wv.dim();
            let gy3 = as3(gy);
            let (_, oh, ow) = gy3.dim();
            let mut dx = Array3::<f64>::zeros((c, h, w));
            let mut dw = Array3::<f64>::zeros(wv.dim());
            let mut db = Array1::<f64>::zeros(c);
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = gy3[(ci, i, j)];
                        db[ci] += g;
                        for ki in 0..kh {
                            let si = (i * stride + ki) as isize - *pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let sj = (j * stride + kj) as isize - *pad as isize;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                dw[(ci, ki, kj)] += g * xv[(ci, si as usize, sj as usize)];
                                dx[(ci, si as usize, sj as usize)] += g * wv[(ci, ki, kj)];
                            }
                        }
                    }
                }
            }
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        }
        Op::UpsampleNearest(f) => {
            let gy3 = as3(gy);
            let (c, oh, ow) = gy3.dim();
            let (h, w) = (oh / f, ow / f);
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..oh {
                    let src = gy3.slice(ndarray::s![ci, i, ..]);
                    let mut dst = dx.slice_mut(ndarray::s![ci, i / f, ..]);
                    let dsts = dst.as_slice_mut().unwrap();
                    if let Some(ss) = src.as_slice() {
                        for (dj, chunk) in ss.chunks_exact(*f).enumerate() {
                            dsts[dj] += chunk.iter().sum::<f64>();
                        }
                    } else {
                        for j in 0..ow {
                            dsts[j / f] += src[j];
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        }
        Op::AvgPool(f) => {
            let gy3 = as3(gy);
            let (c, oh, ow) = gy3.dim();
            let norm = 1.0 / (f * f) as f64;
            let mut dx = Array3::<f64>::zeros((c, oh * f, ow * f));
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = gy3[(ci, i, j)] * norm;
                        for di in 0..*f {
                            for dj in 0..*f {
                                dx[(ci, i * f + di, j * f + dj)] = g;
                            }
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        }
        Op::ConcatChannels => {
            let c1 = tape.nodes[node.inputs[0]].value.shape()[0];
            let gy3 = as3(gy);
            let ga = gy3.slice(ndarray::s![..c1, .., ..]).to_owned();
            let gb = gy3.slice(ndarray::s![c1.., .., ..]).to_owned();
            vec![ga.into_dyn(), gb.into_dyn()]
        }
        Op::GlobalMaxPool(arg) => {
            let xv = as3(&tape.nodes[node.inputs[0]].value);
            let (c, h, w) = xv.dim();
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                let (i, j) = (arg[ci] / w, arg[ci] % w);
                dx[(ci, i, j)] = gy[[ci]];
            }
            vec![dx.into_dyn()]
        }
        Op::GlobalAvgPool => {
            let xv = as3(&tape.nodes[node.inputs[0]].value);
            let (c, h, w) = xv.dim();
            let norm = 1.0 / (h * w) as f64;
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                dx.index_axis_mut(Axis(0), ci).fill(gy[[ci]] * norm);
            }
            vec![dx.into_dyn()]
        }
        Op::Linear => {
            let xv: Array1<f64> = tape.nodes[node.inputs[0]]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned();
            let wv: Array2<f64> = tape.nodes[node.inputs[1]]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned();
            let g1: Array1<f64> = gy.view().into_dimensionality().unwrap().to_owned();
            let dx = wv.t().dot(&g1);
            let dw = g1
                .view()
                .into_shape_with_order((g1.len(), 1))
                .unwrap()
                .dot(&xv.view().into_shape_with_order((1, xv.len())).unwrap());
            vec![dx.into_dyn(), dw.into_dyn(), g1.into_dyn()]
        }
        Op::ChannelWeightedSum => {
            let ev: Array1<f64> = tape.nodes[node.inputs[0]]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned();
            let mv = as3(&tape.nodes[node.inputs[1]].value);
            let (k, h, w) = mv.dim();
            let gy2: Array2<f64> = gy.view().into_dimensionality().unwrap().to_owned();
            let mut de = Array1::<f64>::zeros(k);
            let mut dm = Array3::<f64>::zeros((k, h, w));
            for ki in 0..k {
                de[ki] = (&gy2 * &mv.index_axis(Axis(0), ki)).sum();
                dm.index_axis_mut(Axis(0), ki).assign(&gy2.mapv(|g| g * ev[ki]));
            }
            vec![de.into_dyn(), dm.into_dyn()]
        }
        Op::Softmax => {
            let s: Array1<f64> = node.value.view().into_dimensionality().unwrap().to_owned();
            let g1: Array1<f64> = gy.view().into_dimensionality().unwrap().to_owned();
            let dot = g1.dot(&s);
            let dz = &s * &(g1 - dot);
            vec![dz.into_dyn()]
        }
        Op::BceMean { target } => {
            let pv = &tape.nodes[node.inputs[0]].value;
            let n = pv.len() as f64;
            let g = gy[[0]] / n;
            let mut dp = ArrayD::<f64>::zeros(pv.raw_dim());
            ndarray::Zip::from(&mut dp).and(pv).and(target).for_each(|d, &p, &t| {
                // The clamped loss is flat outside [eps, 1-eps], but a zero
                // gradient there would make saturated-wrong predictions
                // unrecoverable; evaluate the slope at the clamp instead.
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                *d = g * (pc - t) / (pc * (1.0 - pc));
            });
            vec![dp]
        }
        Op::CrossEntropy { target } => {
            let zv: Array1<f64> = tape.nodes[node.inputs[0]]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned();
            let mut dz = softmax1(&zv);
            dz[*target] -= 1.0;
            vec![(dz * gy[[0]]).into_dyn()]
        }
    }
}
