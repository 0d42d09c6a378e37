//! Vector-Jacobian products for every op in [`Op`].

use super::{Node, Op};
use crate::tensor::Real;

/// Runs `f` with mutable access to the gradient buffer of node `idx`
/// (allocated on first use) and shared access to every node's value.
fn with_grad<T: Real>(nodes: &mut [Node<T>], idx: usize, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let mut buf = nodes[idx]
        .grad
        .take()
        .unwrap_or_else(|| vec![T::zero(); nodes[idx].value.numel()]);
    f(nodes, &mut buf);
    nodes[idx].grad = Some(buf);
}

/// Adds `alpha·src` to the gradient of node `idx`; a first contribution is
/// written directly instead of into a zeroed buffer.
fn add_grad<T: Real>(nodes: &mut [Node<T>], idx: usize, alpha: T, src: &[T]) {
    if !nodes[idx].requires_grad {
        return;
    }
    match nodes[idx].grad.as_mut() {
        Some(buf) => axpy(buf, alpha, src),
        None if alpha == T::one() => nodes[idx].grad = Some(src.to_vec()),
        None => nodes[idx].grad = Some(src.iter().map(|&v| alpha * v).collect()),
    }
}

/// Adds an owned gradient contribution to node `idx`, moving it in when the
/// node has no gradient yet.
fn give_grad<T: Real>(nodes: &mut [Node<T>], idx: usize, src: Vec<T>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match nodes[idx].grad.as_mut() {
        Some(buf) => axpy(buf, T::one(), &src),
        None => nodes[idx].grad = Some(src),
    }
}

fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Accumulates the gradient `g` of node `i` into its inputs.
pub(super) fn propagate<T: Real>(nodes: &mut [Node<T>], i: usize, g: &[T]) {
    let (before, rest) = nodes.split_at_mut(i);
    let node = &rest[0];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (before[*a].value.shape()[0], before[*a].value.shape()[1]);
            let n = before[*b].value.shape()[1];
            with_grad(before, *a, |ns, ga| {
                T::gemm(m, n, k, g, (n, 1), ns[*b].value.data(), (1, n), T::one(), ga);
            });
            with_grad(before, *b, |ns, gb| {
                T::gemm(k, m, n, ns[*a].value.data(), (1, k), g, (n, 1), T::one(), gb);
            });
        }
        Op::Linear { x, w, b } => {
            let (m, k) = (before[*x].value.shape()[0], before[*x].value.shape()[1]);
            let n = before[*w].value.shape()[1];
            with_grad(before, *x, |ns, gx| {
                T::gemm(m, n, k, g, (n, 1), ns[*w].value.data(), (1, n), T::one(), gx);
            });
            with_grad(before, *w, |ns, gw| {
                T::gemm(k, m, n, ns[*x].value.data(), (1, k), g, (n, 1), T::one(), gw);
            });
            with_grad(before, *b, |_, gb| {
                for row in g.chunks(n) {
                    axpy(gb, T::one(), row);
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (before[*a].value.shape()[0], before[*a].value.shape()[1]);
            with_grad(before, *a, |_, ga| {
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            add_grad(before, *a, T::one(), g);
            add_grad(before, *b, T::one(), g);
        }
        Op::Sub(a, b) => {
            add_grad(before, *a, T::one(), g);
            add_grad(before, *b, -T::one(), g);
        }
        Op::Mul(a, b) => {
            with_grad(before, *a, |ns, ga| {
                for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(ns[*b].value.data()) {
                    *d += gv * bv;
                }
            });
            with_grad(before, *b, |ns, gb| {
                for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(ns[*a].value.data()) {
                    *d += gv * av;
                }
            });
        }
        Op::Scale(a, c) => add_grad(before, *a, *c, g),
        Op::AddRow(x, b) => {
            let n = before[*b].value.numel();
            add_grad(before, *x, T::one(), g);
            with_grad(before, *b, |_, gb| {
                for row in g.chunks(n) {
                    axpy(gb, T::one(), row);
                }
            });
        }
        Op::Relu(x) => with_grad(before, *x, |ns, gx| {
            for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(ns[*x].value.data()) {
                if xv > T::zero() {
                    *d += gv;
                }
            }
        }),
        Op::Log(x) => with_grad(before, *x, |ns, gx| {
            for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(ns[*x].value.data()) {
                *d += gv / xv;
            }
        }),
        Op::Exp(x) => with_grad(before, *x, |_, gx| {
            for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                *d += gv * y;
            }
        }),
        Op::Powf(x, p) => with_grad(before, *x, |ns, gx| {
            for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(ns[*x].value.data()) {
                *d += gv * *p * xv.powf(*p - T::one());
            }
        }),
        Op::Softmax { x, axis } => with_grad(before, *x, |_, gx| {
            for o in 0..axis.outer {
                for inn in 0..axis.inner {
                    let s: T = (0..axis.len).map(|l| g[axis.at(o, l, inn)] * out[axis.at(o, l, inn)]).sum();
                    for l in 0..axis.len {
                        let j = axis.at(o, l, inn);
                        gx[j] += out[j] * (g[j] - s);
                    }
                }
            }
        }),
        Op::LogSoftmax { x, axis } => with_grad(before, *x, |_, gx| {
            for o in 0..axis.outer {
                for inn in 0..axis.inner {
                    let s: T = (0..axis.len).map(|l| g[axis.at(o, l, inn)]).sum();
                    for l in 0..axis.len {
                        let j = axis.at(o, l, inn);
                        gx[j] += g[j] - out[j].exp() * s;
                    }
                }
            }
        }),
        Op::LogSoftmaxMasked { x, keep } => {
            let n = before[*x].value.shape()[1];
            with_grad(before, *x, |_, gx| {
                for r in 0..g.len() / n.max(1) {
                    let row = r * n..(r + 1) * n;
                    let s: T = row.clone().filter(|&j| keep[j]).map(|j| g[j]).sum();
                    for j in row.filter(|&j| keep[j]) {
                        gx[j] += g[j] - out[j].exp() * s;
                    }
                }
            });
        }
        Op::Gather { x, idx } => {
            let n = before[*x].value.shape()[1];
            with_grad(before, *x, |_, gx| {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * n + c] += g[r];
                }
            });
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let w = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::from_usize(axis.len).unwrap()
            } else {
                T::one()
            };
            with_grad(before, *x, |_, gx| {
                for o in 0..axis.outer {
                    for inn in 0..axis.inner {
                        let gv = g[o * axis.inner + inn] * w;
                        for l in 0..axis.len {
                            gx[axis.at(o, l, inn)] += gv;
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => with_grad(before, *x, |_, gx| gx.iter_mut().for_each(|d| *d += g[0])),
        Op::MeanAll(x) => with_grad(before, *x, |_, gx| {
            let gv = g[0] / T::from_usize(gx.len()).unwrap();
            gx.iter_mut().for_each(|d| *d += gv);
        }),
        Op::MaskApply { x, mask } => with_grad(before, *x, |_, gx| {
            for ((d, &gv), &mv) in gx.iter_mut().zip(g).zip(mask) {
                *d += gv * mv;
            }
        }),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let n = before[*gamma].value.numel();
            let nf = T::from_usize(n).unwrap();
            with_grad(before, *gamma, |_, gg| {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        gg[c] += grow[c] * hrow[c];
                    }
                }
            });
            with_grad(before, *beta, |_, gb| {
                for grow in g.chunks(n) {
                    axpy(gb, T::one(), grow);
                }
            });
            with_grad(before, *x, |ns, gx| {
                let gam = ns[*gamma].value.data();
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for c in 0..n {
                        let dh = grow[c] * gam[c];
                        sum_d += dh;
                        sum_dh += dh * hrow[c];
                    }
                    let k = rstd[r] / nf;
                    for c in 0..n {
                        let dh = grow[c] * gam[c];
                        gx[r * n + c] += k * (nf * dh - sum_d - hrow[c] * sum_dh);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = before[*table].value.shape()[1];
            with_grad(before, *table, |_, gt| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * d..(id + 1) * d], T::one(), &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::Attention { q, k, v, segments, heads, probs } => {
            attention_backward(before, (*q, *k, *v), segments, *heads, probs, g);
        }
        Op::SegmentMean { x, segments } => {
            let d = before[*x].value.shape()[1];
            with_grad(before, *x, |_, gx| {
                for (b, s) in segments.iter().enumerate() {
                    let w = T::one() / T::from_usize(s.len).unwrap();
                    for r in s.start..s.end() {
                        axpy(&mut gx[r * d..(r + 1) * d], w, &g[b * d..(b + 1) * d]);
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = before[p].value.numel();
                let slice = &g[offset..offset + len];
                add_grad(before, p, T::one(), slice);
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let n = before[*x].value.shape()[1];
            with_grad(before, *x, |_, gx| {
                axpy(&mut gx[start * n..start * n + g.len()], T::one(), g);
            });
        }
    }
}

fn attention_backward<T: Real>(
    nodes: &mut [Node<T>],
    (q, k, v): (usize, usize, usize),
    segments: &[super::Segment],
    heads: usize,
    probs: &[T],
    g: &[T],
) {
    let d = nodes[q].value.shape()[1];
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let rows = nodes[q].value.shape()[0];
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    {
        let (qd, kd, vd) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
        let mut poff = 0;
        for s in segments {
            let t = s.len;
            let mut dp = vec![T::zero(); t];
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[poff + h * t * t..poff + (h + 1) * t * t];
                for i in 0..t {
                    let gi = &g[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    let mut dot = T::zero();
                    for j in 0..t {
                        let vj = &vd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dot += dp[j] * p[i * t + j];
                        let w = p[i * t + j];
                        let dvj = &mut dv[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        axpy(dvj, w, gi);
                    }
                    for j in 0..t {
                        let ds = p[i * t + j] * (dp[j] - dot) * scale;
                        let (ri, rj) = ((s.start + i) * d + off, (s.start + j) * d + off);
                        for c in 0..dh {
                            dq[ri + c] += ds * kd[rj + c];
                            dk[rj + c] += ds * qd[ri + c];
                        }
                    }
                }
            }
            poff += heads * t * t;
        }
    }
    give_grad(nodes, q, dq);
    give_grad(nodes, k, dk);
    give_grad(nodes, v, dv);
}
