use super::{Bcast, BinKind, Node, NodeId, Op, UnaryKind};
use crate::tensor::{gemm, gemm_strided, normal_pdf, MatRef, Tensor};

type Grads = Vec<Option<Vec<f64>>>;

fn buf<'g>(grads: &'g mut Grads, nodes: &[Node], id: NodeId) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
}

fn view(t: &Tensor, trans: bool) -> MatRef<'_> {
    let cols = t.shape()[1];
    if trans {
        MatRef::transposed(t.data(), 0, cols)
    } else {
        MatRef::row_major(t.data(), 0, cols)
    }
}

/// Reverse sweep. Returns gradients for leaf nodes only; interior
/// gradients are released as soon as they have been propagated.
pub(super) fn run(nodes: &[Node], loss: NodeId) -> Vec<Option<Tensor>> {
    let mut grads: Grads = vec![None; nodes.len()];
    grads[loss] = Some(vec![1.0]);
    let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];

    for id in (0..=loss).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let wants = |p: NodeId| nodes[p].needs_grad;
        match &node.op {
            Op::Leaf => {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (at, bt) = (&nodes[a].value, &nodes[b].value);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if ta { at.shape()[0] } else { at.shape()[1] };
                let gv = MatRef::row_major(&g, 0, n);
                let gt = MatRef::transposed(&g, 0, n);
                if wants(a) {
                    let da = buf(&mut grads, nodes, a);
                    if ta {
                        gemm(k, n, m, 1.0, view(bt, tb), gt, 1.0, da);
                    } else {
                        gemm(m, n, k, 1.0, gv, view(bt, !tb), 1.0, da);
                    }
                }
                if wants(b) {
                    let db = buf(&mut grads, nodes, b);
                    if tb {
                        gemm(n, m, k, 1.0, gt, view(at, ta), 1.0, db);
                    } else {
                        gemm(k, m, n, 1.0, view(at, !ta), gv, 1.0, db);
                    }
                }
            }
            &Op::Binary { a, b, kind, bcast } => {
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                let width = match bcast {
                    Bcast::Same => g.len().max(1),
                    Bcast::Scalar => 1,
                    Bcast::Row => bd.len().max(1),
                };
                if wants(a) {
                    let da = buf(&mut grads, nodes, a);
                    match (kind, bcast) {
                        (BinKind::Add | BinKind::Sub, _) => {
                            for (d, gi) in da.iter_mut().zip(&g) {
                                *d += gi;
                            }
                        }
                        (_, Bcast::Scalar) => {
                            let y = bd[0];
                            for (d, gi) in da.iter_mut().zip(&g) {
                                *d += if kind == BinKind::Mul { gi * y } else { gi / y };
                            }
                        }
                        _ => {
                            for (dr, gr) in da.chunks_mut(width).zip(g.chunks(width)) {
                                for ((d, gi), y) in dr.iter_mut().zip(gr).zip(bd) {
                                    *d += if kind == BinKind::Mul { gi * y } else { gi / y };
                                }
                            }
                        }
                    }
                }
                if wants(b) {
                    let db = buf(&mut grads, nodes, b);
                    let step = if bcast == Bcast::Scalar { 1 } else { width };
                    for (gr, ar) in g.chunks(step).zip(ad.chunks(step)) {
                        for (j, (gi, x)) in gr.iter().zip(ar).enumerate() {
                            let bj = if bcast == Bcast::Scalar { 0 } else { j };
                            let y = bd[bj];
                            db[bj] += match kind {
                                BinKind::Add => *gi,
                                BinKind::Sub => -gi,
                                BinKind::Mul => gi * x,
                                BinKind::Div => -gi * x / (y * y),
                            };
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    let da = buf(&mut grads, nodes, a);
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
            }
            &Op::Shift { a } | &Op::Reshape { a } => {
                if wants(a) {
                    let da = buf(&mut grads, nodes, a);
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
            }
            &Op::Transpose { a } => {
                if wants(a) {
                    let (m, n) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                    let da = buf(&mut grads, nodes, a);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                if wants(a) {
                    let cols = nodes[a].value.last_dim();
                    let da = buf(&mut grads, nodes, a);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut da[src * cols..(src + 1) * cols];
                        for (d, gi) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let a = *a;
                if wants(a) {
                    let cols = nodes[a].value.last_dim();
                    let da = buf(&mut grads, nodes, a);
                    for (r, &dst) in idx.iter().enumerate() {
                        let out = &mut da[r * cols..(r + 1) * cols];
                        for (d, gi) in out.iter_mut().zip(&g[dst * cols..(dst + 1) * cols]) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    if wants(p) {
                        let dp = buf(&mut grads, nodes, p);
                        for (d, gi) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::Pick { a, coords } => {
                let a = *a;
                if wants(a) {
                    let cols = nodes[a].value.last_dim();
                    let da = buf(&mut grads, nodes, a);
                    for (&(r, c), gi) in coords.iter().zip(&g) {
                        da[r * cols + c] += gi;
                    }
                }
            }
            &Op::ScaleRows { x, w } => {
                let (xt, wt) = (&nodes[x].value, &nodes[w].value);
                let cols = xt.last_dim();
                if wants(x) {
                    let dx = buf(&mut grads, nodes, x);
                    for (r, s) in wt.data().iter().enumerate() {
                        for j in 0..cols {
                            dx[r * cols + j] += g[r * cols + j] * s;
                        }
                    }
                }
                if wants(w) {
                    let dw = buf(&mut grads, nodes, w);
                    for (r, d) in dw.iter_mut().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        *d += gr.iter().zip(xt.row(r)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            &Op::Sum { a } | &Op::Mean { a } => {
                if wants(a) {
                    let numel = nodes[a].value.numel();
                    let s = if matches!(node.op, Op::Mean { .. }) {
                        g[0] / numel.max(1) as f64
                    } else {
                        g[0]
                    };
                    for d in buf(&mut grads, nodes, a).iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::SumRows { a } => {
                if wants(a) {
                    let cols = nodes[a].value.last_dim();
                    let da = buf(&mut grads, nodes, a);
                    for row in da.chunks_exact_mut(cols.max(1)) {
                        for (d, gi) in row.iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Unary { a, kind, saved } => {
                let a = *a;
                if wants(a) {
                    let x = nodes[a].value.data();
                    let y = node.value.data();
                    let da = buf(&mut grads, nodes, a);
                    for i in 0..g.len() {
                        da[i] += g[i]
                            * match kind {
                                UnaryKind::Sqrt => 0.5 / y[i],
                                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryKind::Gelu => saved[i] + x[i] * normal_pdf(x[i]),
                                UnaryKind::NormalCdf => normal_pdf(x[i]),
                                UnaryKind::Square => 2.0 * x[i],
                                UnaryKind::Exp => y[i],
                                UnaryKind::Log => 1.0 / x[i],
                            };
                    }
                }
            }
            &Op::Softmax { a } => {
                if wants(a) {
                    let y = &node.value;
                    let cols = y.last_dim().max(1);
                    let da = buf(&mut grads, nodes, a);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            da[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSumExp { a } => {
                if wants(a) {
                    let x = &nodes[a].value;
                    let cols = x.last_dim();
                    let lse = node.value.data();
                    let da = buf(&mut grads, nodes, a);
                    for r in 0..x.rows() {
                        for (j, &v) in x.row(r).iter().enumerate() {
                            da[r * cols + j] += g[r] * (v - lse[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[x].value.last_dim();
                let gd = nodes[gain].value.data();
                if wants(x) {
                    let dx = buf(&mut grads, nodes, x);
                    let mut dxhat = vec![0.0; d];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += s * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if wants(gain) {
                    let dg = buf(&mut grads, nodes, gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gi), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * h;
                        }
                    }
                }
                if wants(bias) {
                    let db = buf(&mut grads, nodes, bias);
                    for gr in g.chunks(d) {
                        for (o, gi) in db.iter_mut().zip(gr) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                count,
            } => {
                let logits = *logits;
                if wants(logits) && *count > 0 {
                    let v = nodes[logits].value.last_dim();
                    let s = g[0] / *count as f64;
                    let dl = buf(&mut grads, nodes, logits);
                    for (r, (&t, &on)) in targets.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] += s * probs[r * v + j];
                        }
                        dl[r * v + t] -= s;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (qt, kt, vt) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
                let d = qt.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (wq, wk, wv) = (wants(q), wants(k), wants(v));
                let mut dq = wq.then(|| grads[q].take().unwrap_or_else(|| vec![0.0; qt.numel()]));
                let mut dk = wk.then(|| grads[k].take().unwrap_or_else(|| vec![0.0; kt.numel()]));
                let mut dv = wv.then(|| grads[v].take().unwrap_or_else(|| vec![0.0; vt.numel()]));
                let mut dp = Vec::new();
                let mut off = 0;
                for s in segments {
                    let l = s.len;
                    dp.resize(l * l, 0.0);
                    for h in 0..heads {
                        let base = s.start * d + h * dh;
                        let p = &probs[off..off + l * l];
                        let gview = MatRef::with_stride(&g, base, d, 1);
                        if let Some(dv) = dv.as_mut() {
                            gemm_strided(
                                l,
                                l,
                                dh,
                                1.0,
                                MatRef::transposed(p, 0, l),
                                gview,
                                1.0,
                                dv,
                                base,
                                d,
                                1,
                            );
                        }
                        if wq || wk {
                            gemm(
                                l,
                                dh,
                                l,
                                1.0,
                                gview,
                                MatRef::with_stride(vt.data(), base, 1, d),
                                0.0,
                                &mut dp,
                            );
                            for r in 0..l {
                                let pr = &p[r * l..(r + 1) * l];
                                let row = &mut dp[r * l..(r + 1) * l];
                                let dot: f64 = pr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                                for (x, pv) in row.iter_mut().zip(pr) {
                                    *x = pv * (*x - dot);
                                }
                            }
                            if let Some(dq) = dq.as_mut() {
                                gemm_strided(
                                    l,
                                    l,
                                    dh,
                                    scale,
                                    MatRef::row_major(&dp, 0, l),
                                    MatRef::with_stride(kt.data(), base, d, 1),
                                    1.0,
                                    dq,
                                    base,
                                    d,
                                    1,
                                );
                            }
                            if let Some(dk) = dk.as_mut() {
                                gemm_strided(
                                    l,
                                    l,
                                    dh,
                                    scale,
                                    MatRef::transposed(&dp, 0, l),
                                    MatRef::with_stride(qt.data(), base, d, 1),
                                    1.0,
                                    dk,
                                    base,
                                    d,
                                    1,
                                );
                            }
                        }
                        off += l * l;
                    }
                }
                // q, k and v may alias the same node
                for (id, gr) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(gr) = gr {
                        match grads[id].as_mut() {
                            Some(existing) => {
                                for (e, x) in existing.iter_mut().zip(&gr) {
                                    *e += x;
                                }
                            }
                            None => grads[id] = Some(gr),
                        }
                    }
                }
            }
        }
    }
    leaves
}
