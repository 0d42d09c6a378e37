//! Forward definitions of every differentiable op.

use serde::{Deserialize, Serialize};

use super::{Axis, Graph, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

/// A contiguous run of rows `[start, start + len)` treated as one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Segments must be non-empty and tile `0..rows` in order.
pub(crate) fn check_segments(op: &'static str, segments: &[Segment], rows: usize) -> Result<()> {
    let mut cursor = 0;
    for s in segments {
        if s.len == 0 {
            return Err(invalid(op, "empty segment"));
        }
        if s.start != cursor {
            return Err(invalid(op, format!("segments must tile rows; gap at row {cursor}")));
        }
        cursor = s.end();
    }
    if cursor != rows {
        return Err(invalid(op, format!("segments cover {cursor} rows, tensor has {rows}")));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, op: impl FnOnce(usize) -> Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, &[i], op(i)))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = va.dims2("matmul")?;
        let (k2, n) = vb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), T::zero(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, &[ia, ib], Op::MatMul(ia, ib)))
    }

    /// `x·w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        let (m, k) = vx.dims2("linear")?;
        let (k2, n) = vw.dims2("linear")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "linear",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if vb.shape() != [n] {
            return Err(Error::Shape {
                op: "linear",
                lhs: vw.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(vb.data());
        }
        T::gemm(m, k, n, vx.data(), (k, 1), vw.data(), (n, 1), T::one(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, &[ix, iw, ib], Op::Linear { x: ix, w: iw, b: ib }))
    }

    /// `[m,n] → [n,m]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let (m, n) = v.dims2("transpose")?;
        let d = v.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = d[r * n + c];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, &[i], Op::Transpose(i)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, ia, ib))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, &[ia, ib], Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, &[ia, ib], Op::Sub(ia, ib)))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, &[ia, ib], Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary(x, |i| Op::Scale(i, c), |a| a * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Adds the length-`n` vector `b` to every row of the `[m,n]` matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let (m, n) = vx.dims2("add_row")?;
        if vb.shape() != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, &[ix, ib], Op::AddRow(ix, ib)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |a| if a > T::zero() { a } else { T::zero() })
    }

    /// Natural log; non-positive inputs produce `-inf`/`NaN` as in IEEE arithmetic.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log, |a| a.ln())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp, |a| a.exp())
    }

    /// `x^p` elementwise for a constant exponent.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let pt = T::lit(p);
        self.unary(x, |i| Op::Powf(i, pt), |a| a.powf(pt))
    }

    /// Softmax along `axis` of a tensor of any rank.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let ax = Axis::of(v.shape(), axis, "softmax")?;
        let mut out = v.data().to_vec();
        for o in 0..ax.outer {
            for inn in 0..ax.inner {
                let max = (0..ax.len).map(|l| out[ax.at(o, l, inn)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for l in 0..ax.len {
                    let e = (out[ax.at(o, l, inn)] - max).exp();
                    out[ax.at(o, l, inn)] = e;
                    sum += e;
                }
                for l in 0..ax.len {
                    out[ax.at(o, l, inn)] /= sum;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, &[i], Op::Softmax { x: i, axis: ax }))
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let ax = Axis::of(v.shape(), axis, "log_softmax")?;
        let mut out = v.data().to_vec();
        for o in 0..ax.outer {
            for inn in 0..ax.inner {
                let max = (0..ax.len).map(|l| out[ax.at(o, l, inn)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..ax.len).map(|l| (out[ax.at(o, l, inn)] - max).exp()).sum::<T>().ln();
                for l in 0..ax.len {
                    out[ax.at(o, l, inn)] = out[ax.at(o, l, inn)] - lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, &[i], Op::LogSoftmax { x: i, axis: ax }))
    }

    /// Row-wise log-softmax of an `[m,n]` matrix over the entries where `keep`
    /// is true. Excluded entries neither enter the normaliser nor receive
    /// gradient, and their output is 0. A row with nothing kept is all zeros.
    pub fn log_softmax_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let (m, n) = v.dims2("log_softmax_masked")?;
        if keep.len() != m * n {
            return Err(Error::Shape {
                op: "log_softmax_masked",
                lhs: v.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let d = v.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = r * n..(r + 1) * n;
            let kept = || row.clone().filter(|&j| keep[j]);
            let max = kept().map(|j| d[j]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let lse = max + kept().map(|j| (d[j] - max).exp()).sum::<T>().ln();
            for j in kept() {
                out[j] = d[j] - lse;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, &[i], Op::LogSoftmaxMasked { x: i, keep: keep.to_vec() }))
    }

    /// `[m,n]`, `idx` of length `m` → `[m]` with `out[r] = x[r, idx[r]]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let (m, n) = v.dims2("gather")?;
        if idx.len() != m {
            return Err(Error::Shape {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
            return Err(invalid("gather", format!("index {bad} out of range for {n} columns")));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| v.data()[r * n + c]).collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, &[i], Op::Gather { x: i, idx: idx.to_vec() }))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let ax = Axis::of(v.shape(), axis, name)?;
        if mean && ax.len == 0 {
            return Err(invalid("mean", "mean over an empty axis"));
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![T::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for inn in 0..ax.inner {
                let s: T = (0..ax.len).map(|l| v.data()[ax.at(o, l, inn)]).sum();
                out[o * ax.inner + inn] = if mean { s / T::from_usize(ax.len).unwrap() } else { s };
            }
        }
        let out = Tensor::new(shape, out)?;
        let op = if mean { Op::MeanAxis { x: i, axis: ax } } else { Op::SumAxis { x: i, axis: ax } };
        Ok(self.push(out, &[i], op))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s: T = self.nodes[i].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), &[i], Op::SumAll(i)))
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        if v.numel() == 0 {
            return Err(invalid("mean_all", "empty tensor"));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        Ok(self.push(Tensor::scalar(s), &[i], Op::MeanAll(i)))
    }

    /// Multiplies `x` by a constant binary mask of the same shape.
    pub fn mask_apply(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        same_shape("mask_apply", v, mask)?;
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(invalid("mask_apply", "mask entries must be 0 or 1"));
        }
        let data = v
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| if m == T::one() { a } else { T::zero() })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, &[i], Op::MaskApply { x: i, mask: mask.data().to_vec() }))
    }

    /// Row-wise layer normalisation of `[m,n]` with affine `gamma`, `beta` of shape `[n]`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (vx, vg, vb) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let (m, n) = vx.dims2("layernorm")?;
        for p in [vg, vb] {
            if p.shape() != [n] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: vx.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let eps = T::lit(eps);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, &[ix, ig, ib], Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, rstd }))
    }

    /// Rows of `table` (`[V,d]`) selected by `ids` → `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = &self.nodes[it].value;
        let (vocab, d) = vt.dims2("embedding_lookup")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(out, &[it], Op::Embedding { table: it, ids: ids.to_vec() }))
    }

    /// Multi-head scaled dot-product self-attention applied independently
    /// within each segment. `q`, `k`, `v` are `[N,d]` with `d % heads == 0`;
    /// segments tile `0..N`. Output is `[N,d]`, heads concatenated per row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (vq, vk, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        same_shape("attention", vq, vk)?;
        same_shape("attention", vq, vv)?;
        let (rows, d) = vq.dims2("attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("width {d} not divisible by {heads} heads")));
        }
        check_segments("attention", segments, rows)?;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let blocks = par::map(segments, |s| {
            let t = s.len;
            let mut out = vec![T::zero(); t * d];
            let mut probs = vec![T::zero(); heads * t * t];
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[h * t * t..(h + 1) * t * t];
                for i in 0..t {
                    let qi = &qd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..t {
                        let kj = &kd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        let sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        p[i * t + j] = sc;
                        max = max.max(sc);
                    }
                    let mut sum = T::zero();
                    for j in 0..t {
                        let e = (p[i * t + j] - max).exp();
                        p[i * t + j] = e;
                        sum += e;
                    }
                    for j in 0..t {
                        p[i * t + j] /= sum;
                    }
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..t {
                        let w = p[i * t + j];
                        let vj = &vd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::new();
        for (o, p) in blocks {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            &[iq, ik, iv],
            Op::Attention { q: iq, k: ik, v: iv, segments: segments.to_vec(), heads, probs },
        ))
    }

    /// Mean of the rows of each segment: `[N,d]` → `[segments.len(), d]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let (rows, d) = v.dims2("segment_mean")?;
        check_segments("segment_mean", segments, rows)?;
        let mut out = vec![T::zero(); segments.len() * d];
        for (b, s) in segments.iter().enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for r in s.start..s.end() {
                for (oc, &xc) in o.iter_mut().zip(&v.data()[r * d..(r + 1) * d]) {
                    *oc += xc;
                }
            }
            let inv = T::one() / T::from_usize(s.len).unwrap();
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let out = Tensor::new(vec![segments.len(), d], out)?;
        Ok(self.push(out, &[i], Op::SegmentMean { x: i, segments: segments.to_vec() }))
    }

    /// Stacks `[m_i, n]` matrices vertically into `[Σ m_i, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let (_, n) = self.nodes[idx[0]].value.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            let (m, n2) = v.dims2("concat_rows")?;
            if n2 != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[idx[0]].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, &idx, Op::ConcatRows(idx.clone())))
    }

    /// Rows `[start, start+len)` of an `[m,n]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let (m, n) = v.dims2("slice_rows")?;
        if start + len > m {
            return Err(invalid("slice_rows", format!("rows {start}..{} out of {m}", start + len)));
        }
        let out = Tensor::new(vec![len, n], v.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, &[i], Op::SliceRows { x: i, start }))
    }
}
