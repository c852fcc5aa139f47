//! Forward and backward compute kernels shared by the autodiff graph and
//! the plain inference path.
//!
//! Every kernel is deterministic regardless of thread count: parallel loops
//! only ever split output regions that are written by exactly one task, and
//! floating-point reductions always run in a fixed sequential order.

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which parallel dispatch is not
/// worth the scheduling overhead.
const PAR_WORK: usize = 1 << 16;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Index of the row maximum, ties broken toward the lower index.
pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

// ── matrix multiplication ───────────────────────────────────────────────

fn matmul_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul2d_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let work = m * k * n;
    if work < PAR_WORK {
        matmul_serial(a, b, m, k, n, out);
    } else if m >= 4 {
        let threads = rayon::current_num_threads().max(1);
        let block = m.div_ceil(threads * 4).max(4);
        out.par_chunks_mut(block * n)
            .zip(a.par_chunks(block * k))
            .for_each(|(o_chunk, a_chunk)| {
                matmul_serial(a_chunk, b, o_chunk.len() / n, k, n, o_chunk);
            });
    } else if m == 1 {
        // Vector-matrix product: split the output row into column blocks.
        let threads = rayon::current_num_threads().max(1);
        let block = n.div_ceil(threads * 2).max(32);
        out.par_chunks_mut(block).enumerate().for_each(|(bi, o_blk)| {
            let js = bi * block;
            o_blk.fill(0.0);
            for (p, &av) in a.iter().enumerate() {
                let b_blk = &b[p * n + js..p * n + js + o_blk.len()];
                for (o, &bv) in o_blk.iter_mut().zip(b_blk) {
                    *o += av * bv;
                }
            }
        });
    } else {
        matmul_serial(a, b, m, k, n, out);
    }
}

pub(crate) fn matmul2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul2d_into(a, b, m, k, n, &mut out);
    out
}

/// Per-item matmul over a leading batch axis: `[B×m×k] · [B×k×n] → [B×m×n]`.
pub(crate) fn batch_matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    if batch == 1 {
        matmul2d_into(a, b, m, k, n, &mut out);
        return out;
    }
    let run = |(o_item, (a_item, b_item)): (&mut [f64], (&[f64], &[f64]))| {
        matmul_serial(a_item, b_item, m, k, n, o_item);
    };
    if batch * m * k * n >= PAR_WORK {
        out.par_chunks_mut(m * n)
            .zip(a.par_chunks(m * k).zip(b.par_chunks(k * n)))
            .for_each(run);
    } else {
        out.chunks_mut(m * n)
            .zip(a.chunks(m * k).zip(b.chunks(k * n)))
            .for_each(run);
    }
    out
}

/// Swaps the two trailing axes: `[B×m×n] → [B×n×m]` (B may be 1 for plain 2-D).
pub(crate) fn transpose_last(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for item in 0..batch {
        let src = &x[item * m * n..(item + 1) * m * n];
        let dst = &mut out[item * m * n..(item + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

// ── softmax ─────────────────────────────────────────────────────────────

/// Softmax over the axis described by (outer, len, inner) strides, with
/// max-subtraction for stability.
pub(crate) fn softmax_slices(x: &[f64], outer: usize, len: usize, inner: usize, out: &mut [f64]) {
    let slice = |data: &mut [f64], o: usize, i: usize| {
        let base = o * len * inner + i;
        let mut maxv = f64::NEG_INFINITY;
        for a in 0..len {
            maxv = maxv.max(data[base + a * inner]);
        }
        let mut sum = 0.0;
        for a in 0..len {
            let e = (data[base + a * inner] - maxv).exp();
            data[base + a * inner] = e;
            sum += e;
        }
        for a in 0..len {
            data[base + a * inner] /= sum;
        }
    };
    out.copy_from_slice(x);
    if outer * len * inner >= PAR_WORK && inner == 1 {
        out.par_chunks_mut(len).for_each(|row| {
            let mut maxv = f64::NEG_INFINITY;
            for &v in row.iter() {
                maxv = maxv.max(v);
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        });
    } else {
        for o in 0..outer {
            for i in 0..inner {
                slice(out, o, i);
            }
        }
    }
}

/// Backward of softmax: `dx = y ⊙ (dy − Σ_axis dy⊙y)` per slice.
pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                let idx = base + a * inner;
                dot += dy[idx] * y[idx];
            }
            for a in 0..len {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

// ── bias broadcast over the trailing axis ───────────────────────────────

pub(crate) fn add_bias(x: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    for (o_row, x_row) in out.chunks_mut(n).zip(x.chunks(n)) {
        for ((o, &xv), &bv) in o_row.iter_mut().zip(x_row).zip(bias) {
            *o = xv + bv;
        }
    }
}

/// Gradient of the bias in [`add_bias`]: column sums over all leading rows.
pub(crate) fn column_sums(dy: &[f64], n: usize) -> Vec<f64> {
    let mut db = vec![0.0; n];
    for row in dy.chunks(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    db
}

// ── 1-D convolution ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub steps_out: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

/// Output geometry for a 1-D convolution, or `None` when the input is too
/// short for the requested window under `valid` padding.
pub(crate) fn conv1d_dims(steps: usize, width: usize, stride: usize, same: bool) -> Option<ConvDims> {
    if same {
        let steps_out = steps.div_ceil(stride);
        let span = (steps_out - 1) * stride + width;
        let pad = span.saturating_sub(steps);
        // Symmetric zero padding, extra element on the right when odd.
        Some(ConvDims {
            steps_out,
            pad_left: pad / 2,
            pad_right: pad - pad / 2,
        })
    } else {
        if steps < width {
            return None;
        }
        Some(ConvDims {
            steps_out: (steps - width) / stride + 1,
            pad_left: 0,
            pad_right: 0,
        })
    }
}

/// Gathers sliding windows of one item into `[steps_out × (width·ch_in)]`,
/// matching the row-major `[width×ch_in×ch_out]` kernel layout.
fn im2col(
    x_item: &[f64],
    steps: usize,
    ch_in: usize,
    width: usize,
    stride: usize,
    pad_left: usize,
    steps_out: usize,
    col: &mut [f64],
) {
    col.fill(0.0);
    let row_w = width * ch_in;
    for t in 0..steps_out {
        let row = &mut col[t * row_w..(t + 1) * row_w];
        for dw in 0..width {
            let src = (t * stride + dw) as isize - pad_left as isize;
            if src >= 0 && (src as usize) < steps {
                let s = src as usize * ch_in;
                row[dw * ch_in..(dw + 1) * ch_in].copy_from_slice(&x_item[s..s + ch_in]);
            }
        }
    }
}

/// Forward 1-D convolution: `x[b×s×ci] * kernel[w×ci×co] + bias → [b×s'×co]`.
pub(crate) fn conv1d_fwd(
    x: &[f64],
    batch: usize,
    steps: usize,
    ch_in: usize,
    kernel: &[f64],
    width: usize,
    ch_out: usize,
    bias: &[f64],
    stride: usize,
    dims: ConvDims,
) -> Vec<f64> {
    let so = dims.steps_out;
    let row_w = width * ch_in;
    let mut out = vec![0.0; batch * so * ch_out];
    let run = |(o_item, x_item): (&mut [f64], &[f64])| {
        let mut col = vec![0.0; so * row_w];
        im2col(x_item, steps, ch_in, width, stride, dims.pad_left, so, &mut col);
        if batch == 1 {
            matmul2d_into(&col, kernel, so, row_w, ch_out, o_item);
        } else {
            matmul_serial(&col, kernel, so, row_w, ch_out, o_item);
        }
        for row in o_item.chunks_mut(ch_out) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    };
    if batch > 1 && batch * so * row_w * ch_out >= PAR_WORK {
        out.par_chunks_mut(so * ch_out)
            .zip(x.par_chunks(steps * ch_in))
            .for_each(run);
    } else {
        out.chunks_mut(so * ch_out)
            .zip(x.chunks(steps * ch_in))
            .for_each(run);
    }
    out
}

/// Backward 1-D convolution; returns `(dx, dkernel, dbias)`.
pub(crate) fn conv1d_bwd(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    steps: usize,
    ch_in: usize,
    kernel: &[f64],
    width: usize,
    ch_out: usize,
    stride: usize,
    dims: ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let so = dims.steps_out;
    let row_w = width * ch_in;
    let db = column_sums(dy, ch_out);

    // dkernel = Σ_items colᵀ·dy, accumulated in item order.
    let mut dk = vec![0.0; row_w * ch_out];
    let mut col = vec![0.0; so * row_w];
    for item in 0..batch {
        let x_item = &x[item * steps * ch_in..(item + 1) * steps * ch_in];
        let dy_item = &dy[item * so * ch_out..(item + 1) * so * ch_out];
        im2col(x_item, steps, ch_in, width, stride, dims.pad_left, so, &mut col);
        for t in 0..so {
            let c_row = &col[t * row_w..(t + 1) * row_w];
            let d_row = &dy_item[t * ch_out..(t + 1) * ch_out];
            for (p, &cv) in c_row.iter().enumerate() {
                if cv != 0.0 {
                    let dk_row = &mut dk[p * ch_out..(p + 1) * ch_out];
                    for (dkv, &dv) in dk_row.iter_mut().zip(d_row) {
                        *dkv += cv * dv;
                    }
                }
            }
        }
    }

    // dx: scatter dy·kernelᵀ back through each window (items independent).
    let kt = transpose_last(kernel, 1, row_w, ch_out); // [co × row_w]
    let mut dx = vec![0.0; batch * steps * ch_in];
    let run = |(dx_item, dy_item): (&mut [f64], &[f64])| {
        for t in 0..so {
            let d_row = &dy_item[t * ch_out..(t + 1) * ch_out];
            for dw in 0..width {
                let src = (t * stride + dw) as isize - dims.pad_left as isize;
                if src < 0 || src as usize >= steps {
                    continue;
                }
                let base = src as usize * ch_in;
                for (oc, &dv) in d_row.iter().enumerate() {
                    if dv != 0.0 {
                        let kt_row = &kt[oc * row_w + dw * ch_in..oc * row_w + (dw + 1) * ch_in];
                        for (x_slot, &kv) in dx_item[base..base + ch_in].iter_mut().zip(kt_row) {
                            *x_slot += dv * kv;
                        }
                    }
                }
            }
        }
    };
    if batch > 1 && batch * so * row_w * ch_out >= PAR_WORK {
        dx.par_chunks_mut(steps * ch_in)
            .zip(dy.par_chunks(so * ch_out))
            .for_each(run);
    } else {
        dx.chunks_mut(steps * ch_in)
            .zip(dy.chunks(so * ch_out))
            .for_each(run);
    }
    (dx, dk, db)
}

// ── LSTM ────────────────────────────────────────────────────────────────

/// Per-step activations saved by the forward pass for backpropagation
/// through time. All buffers are `[b×s×H]`; gate order is `[i|f|g|o]`.
#[derive(Clone, Debug)]
pub(crate) struct LstmSaved {
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub cell: Vec<f64>,
}

/// Forward LSTM over a full sequence. `w: [in×4H]`, `u: [H×4H]`, `b: [4H]`,
/// gate blocks ordered `[i|f|g|o]`. Initial hidden and cell states are zero.
/// Returns the full hidden sequence `[b×s×H]`.
pub(crate) fn lstm_fwd(
    x: &[f64],
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    w: &[f64],
    u: &[f64],
    b: &[f64],
    save: bool,
) -> (Vec<f64>, Option<LstmSaved>) {
    let g4 = 4 * hidden;
    // Input contribution for every step at once.
    let xw = matmul2d(x, w, batch * steps, input, g4);

    let mut h_seq = vec![0.0; batch * steps * hidden];
    let mut saved = if save {
        Some(LstmSaved {
            gate_i: vec![0.0; batch * steps * hidden],
            gate_f: vec![0.0; batch * steps * hidden],
            gate_g: vec![0.0; batch * steps * hidden],
            gate_o: vec![0.0; batch * steps * hidden],
            cell: vec![0.0; batch * steps * hidden],
        })
    } else {
        None
    };

    let item_len = steps * hidden;
    let run = |item: usize,
               h_item: &mut [f64],
               sv: Option<(&mut [f64], &mut [f64], &mut [f64], &mut [f64], &mut [f64])>| {
        let xw_item = &xw[item * steps * g4..(item + 1) * steps * g4];
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut pre = vec![0.0; g4];
        let mut sv = sv;
        for t in 0..steps {
            pre.copy_from_slice(&xw_item[t * g4..(t + 1) * g4]);
            for (p, &bv) in b.iter().enumerate() {
                pre[p] += bv;
            }
            for (p, &hv) in h.iter().enumerate() {
                if hv != 0.0 {
                    let u_row = &u[p * g4..(p + 1) * g4];
                    for (pv, &uv) in pre.iter_mut().zip(u_row) {
                        *pv += hv * uv;
                    }
                }
            }
            for j in 0..hidden {
                let gi = sigmoid(pre[j]);
                let gf = sigmoid(pre[hidden + j]);
                let gg = pre[2 * hidden + j].tanh();
                let go = sigmoid(pre[3 * hidden + j]);
                c[j] = gf * c[j] + gi * gg;
                h[j] = go * c[j].tanh();
                if let Some((si, sf, sg, so, sc)) = sv.as_mut() {
                    let idx = t * hidden + j;
                    si[idx] = gi;
                    sf[idx] = gf;
                    sg[idx] = gg;
                    so[idx] = go;
                    sc[idx] = c[j];
                }
            }
            h_item[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
        }
    };

    match &mut saved {
        Some(s) => {
            let iter = h_seq
                .par_chunks_mut(item_len)
                .zip(s.gate_i.par_chunks_mut(item_len))
                .zip(s.gate_f.par_chunks_mut(item_len))
                .zip(s.gate_g.par_chunks_mut(item_len))
                .zip(s.gate_o.par_chunks_mut(item_len))
                .zip(s.cell.par_chunks_mut(item_len))
                .enumerate();
            iter.for_each(|(item, (((((h_item, si), sf), sg), so), sc))| {
                run(item, h_item, Some((si, sf, sg, so, sc)));
            });
        }
        None => {
            h_seq
                .par_chunks_mut(item_len)
                .enumerate()
                .for_each(|(item, h_item)| run(item, h_item, None));
        }
    }
    (h_seq, saved)
}

/// Backpropagation through time; returns `(dx, dw, du, db)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_bwd(
    x: &[f64],
    h_seq: &[f64],
    saved: &LstmSaved,
    dy: &[f64],
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    w: &[f64],
    u: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let g4 = 4 * hidden;
    let ut = transpose_last(u, 1, hidden, g4); // [4H×H]

    // Pre-activation gradients for every (item, step); filled in parallel,
    // then contracted with big deterministic matmuls below.
    let mut dpre = vec![0.0; batch * steps * g4];
    let item_h = steps * hidden;
    dpre.par_chunks_mut(steps * g4)
        .enumerate()
        .for_each(|(item, dpre_item)| {
            let sv = |buf: &[f64], t: usize, j: usize| buf[item * item_h + t * hidden + j];
            let mut dh_next = vec![0.0; hidden];
            let mut dc_next = vec![0.0; hidden];
            for t in (0..steps).rev() {
                let dp = &mut dpre_item[t * g4..(t + 1) * g4];
                for j in 0..hidden {
                    let gi = sv(&saved.gate_i, t, j);
                    let gf = sv(&saved.gate_f, t, j);
                    let gg = sv(&saved.gate_g, t, j);
                    let go = sv(&saved.gate_o, t, j);
                    let c = sv(&saved.cell, t, j);
                    let c_prev = if t == 0 { 0.0 } else { sv(&saved.cell, t - 1, j) };
                    let tc = c.tanh();

                    let dh = dy[item * item_h + t * hidden + j] + dh_next[j];
                    let dc = dh * go * (1.0 - tc * tc) + dc_next[j];

                    dp[j] = dc * gg * gi * (1.0 - gi); // input gate
                    dp[hidden + j] = dc * c_prev * gf * (1.0 - gf); // forget gate
                    dp[2 * hidden + j] = dc * gi * (1.0 - gg * gg); // candidate
                    dp[3 * hidden + j] = dh * tc * go * (1.0 - go); // output gate
                    dc_next[j] = dc * gf;
                }
                // dh_{t-1} += dpre_t · Uᵀ
                for j in 0..hidden {
                    let ut_rows = &ut[..];
                    let mut acc = 0.0;
                    for p in 0..g4 {
                        acc += dp[p] * ut_rows[p * hidden + j];
                    }
                    dh_next[j] = acc;
                }
            }
        });

    // dx = dpre · Wᵀ
    let wt = transpose_last(w, 1, input, g4); // [4H×in]
    let dx = matmul2d(&dpre, &wt, batch * steps, g4, input);

    // dw = xᵀ · dpre, du = h_prevᵀ · dpre (h shifted one step; h_{-1} = 0).
    let xt = transpose_last(x, 1, batch * steps, input); // [in × b·s]
    let dw = matmul2d(&xt, &dpre, input, batch * steps, g4);

    let mut h_prev = vec![0.0; batch * steps * hidden];
    for item in 0..batch {
        for t in 1..steps {
            let src = item * item_h + (t - 1) * hidden;
            let dst = item * item_h + t * hidden;
            h_prev[dst..dst + hidden].copy_from_slice(&h_seq[src..src + hidden]);
        }
    }
    let hpt = transpose_last(&h_prev, 1, batch * steps, hidden);
    let du = matmul2d(&hpt, &dpre, hidden, batch * steps, g4);

    let db = column_sums(&dpre, g4);
    (dx, dw, du, db)
}

// ── batch normalization ─────────────────────────────────────────────────

/// Per-feature mean and biased variance over all leading rows (two-pass).
pub(crate) fn feature_mean_var(x: &[f64], rows: usize, feat: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; feat];
    for row in x.chunks(feat) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; feat];
    for row in x.chunks(feat) {
        for ((vr, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *vr += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    (mean, var)
}

/// `y = gamma·(x − mean)/√(var+eps) + beta`; also returns x̂ when requested.
pub(crate) fn batchnorm_apply(
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    keep_xhat: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let feat = mean.len();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = if keep_xhat { Some(vec![0.0; x.len()]) } else { None };
    for (r, row) in x.chunks(feat).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean[j]) * inv_std[j];
            if let Some(xh_buf) = xhat.as_mut() {
                xh_buf[r * feat + j] = xh;
            }
            y[r * feat + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, xhat)
}

/// Backward of train-mode batch normalization; returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_bwd(
    dy: &[f64],
    xhat: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    rows: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let feat = gamma.len();
    let n = rows as f64;
    let mut dgamma = vec![0.0; feat];
    let mut dbeta = vec![0.0; feat];
    for (dy_row, xh_row) in dy.chunks(feat).zip(xhat.chunks(feat)) {
        for j in 0..feat {
            dgamma[j] += dy_row[j] * xh_row[j];
            dbeta[j] += dy_row[j];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for j in 0..feat {
        let inv_std = 1.0 / (var[j] + eps).sqrt();
        let scale = gamma[j] * inv_std / n;
        for r in 0..rows {
            let idx = r * feat + j;
            dx[idx] = scale * (n * dy[idx] - dbeta[j] - xhat[idx] * dgamma[j]);
        }
    }
    (dx, dgamma, dbeta)
}

// ── max pooling ─────────────────────────────────────────────────────────

/// Non-overlapping 1-D max pooling over the step axis; returns the pooled
/// tensor and the flat source step index of each maximum (first max wins).
pub(crate) fn maxpool1d_fwd(
    x: &[f64],
    batch: usize,
    steps: usize,
    ch: usize,
    width: usize,
) -> (Vec<f64>, Vec<u32>) {
    let so = steps / width;
    let mut out = vec![0.0; batch * so * ch];
    let mut arg = vec![0u32; batch * so * ch];
    for item in 0..batch {
        let x_item = &x[item * steps * ch..];
        for t in 0..so {
            for j in 0..ch {
                let mut best = t * width;
                let mut best_v = x_item[best * ch + j];
                for d in 1..width {
                    let s = t * width + d;
                    let v = x_item[s * ch + j];
                    if v > best_v {
                        best_v = v;
                        best = s;
                    }
                }
                out[(item * so + t) * ch + j] = best_v;
                arg[(item * so + t) * ch + j] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool1d_bwd(
    dy: &[f64],
    arg: &[u32],
    batch: usize,
    steps: usize,
    ch: usize,
    steps_out: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * steps * ch];
    for item in 0..batch {
        for t in 0..steps_out {
            for j in 0..ch {
                let idx = (item * steps_out + t) * ch + j;
                dx[(item * steps + arg[idx] as usize) * ch + j] += dy[idx];
            }
        }
    }
    dx
}

// ── concatenation ───────────────────────────────────────────────────────

/// Concatenates same-rank blocks along `axis`; shapes must agree elsewhere.
/// `shapes[i]` describes `parts[i]`.
pub(crate) fn concat(parts: &[&[f64]], shapes: &[&[usize]], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let rank = shapes[0].len();
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut out_shape = shapes[0].to_vec();
    out_shape[axis] = total_axis;
    debug_assert!(axis < rank);

    let mut out = vec![0.0; outer * total_axis * inner];
    for o in 0..outer {
        let mut offset = 0;
        for (part, shape) in parts.iter().zip(shapes) {
            let len = shape[axis] * inner;
            let src = &part[o * len..(o + 1) * len];
            let dst_base = o * total_axis * inner + offset * inner;
            out[dst_base..dst_base + len].copy_from_slice(src);
            offset += shape[axis];
        }
    }
    (out, out_shape)
}

/// Splits a gradient back into the concatenated parts (inverse of [`concat`]).
pub(crate) fn concat_split(dy: &[f64], shapes: &[&[usize]], axis: usize) -> Vec<Vec<f64>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut parts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| vec![0.0; s.iter().product::<usize>()])
        .collect();
    for o in 0..outer {
        let mut offset = 0;
        for (part, shape) in parts.iter_mut().zip(shapes) {
            let len = shape[axis] * inner;
            let src_base = o * total_axis * inner + offset * inner;
            part[o * len..(o + 1) * len].copy_from_slice(&dy[src_base..src_base + len]);
            offset += shape[axis];
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop_on_odd_shapes() {
        let m = 5;
        let k = 7;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let fast = matmul2d(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert!((fast[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_parallel_paths_agree_with_serial() {
        // Large enough to trigger both the row-block and column-block paths.
        for (m, k, n) in [(64, 96, 80), (1, 512, 512)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 97) as f64 - 48.0) * 0.03).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 89) as f64 - 44.0) * 0.05).collect();
            let mut serial = vec![0.0; m * n];
            matmul_serial(&a, &b, m, k, n, &mut serial);
            let fast = matmul2d(&a, &b, m, k, n);
            assert!(fast.iter().zip(&serial).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn transpose_last_round_trips() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let t = transpose_last(&x, 2, 3, 4);
        let back = transpose_last(&t, 2, 4, 3);
        assert_eq!(x, back);
    }

    #[test]
    fn conv_dims_same_padding_puts_extra_on_right() {
        // Even width: asymmetric padding with the extra zero on the right.
        let d = conv1d_dims(5, 2, 1, true).unwrap();
        assert_eq!((d.steps_out, d.pad_left, d.pad_right), (5, 0, 1));
        let d = conv1d_dims(5, 3, 1, true).unwrap();
        assert_eq!((d.steps_out, d.pad_left, d.pad_right), (5, 1, 1));
        assert!(conv1d_dims(2, 3, 1, false).is_none());
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // [2×3]
        let b: Vec<f64> = (10..14).map(|i| i as f64).collect(); // [2×2]
        let (joined, shape) = concat(&[&a, &b], &[&[2, 3], &[2, 2]], 1);
        assert_eq!(shape, vec![2, 5]);
        assert_eq!(joined, vec![0., 1., 2., 10., 11., 3., 4., 5., 12., 13.]);
        let parts = concat_split(&joined, &[&[2, 3], &[2, 2]], 1);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
