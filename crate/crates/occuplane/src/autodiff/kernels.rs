//! Forward and backward kernels behind the tape ops.
//!
//! Every kernel accumulates each output cell in a fixed sequential order, so
//! the rayon-parallel paths (which split work by output cell) produce bits
//! identical to the sequential ones.

use rayon::prelude::*;

use super::{OpRecord, Real, Rule, TensorEntry, TensorId};

/// Below this many multiply-accumulates a parallel dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
pub(super) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

// ---- broadcasting ----

pub(super) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for offset in 0..rank {
        let da = dim_from_right(a, offset);
        let db = dim_from_right(b, offset);
        out[rank - 1 - offset] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

#[inline]
fn dim_from_right(shape: &[usize], offset_from_right: usize) -> usize {
    if offset_from_right < shape.len() {
        shape[shape.len() - 1 - offset_from_right]
    } else {
        1
    }
}

/// Strides into `shape` for an index expressed in `out_shape` coordinates,
/// with zero stride on broadcast (size-1 or missing) axes.
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        let off = rank - 1 - i;
        if off < shape.len() {
            let j = shape.len() - 1 - off;
            strides[rank - 1 - off] = if shape[j] == 1 { 0 } else { natural[j] };
        }
    }
    strides
}

fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let stride_a = broadcast_strides(out_shape, sa);
    let stride_b = broadcast_strides(out_shape, sb);
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coord = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..total {
        f(flat, ia, ib);
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            ia += stride_a[axis];
            ib += stride_b[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            ia -= stride_a[axis] * out_shape[axis];
            ib -= stride_b[axis] * out_shape[axis];
            coord[axis] = 0;
        }
    }
}

pub(super) fn broadcast_apply<T: Real>(
    out_shape: &[usize],
    sa: &[usize],
    va: &[T],
    sb: &[usize],
    vb: &[T],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); total];
    for_each_broadcast(out_shape, sa, sb, |flat, ia, ib| {
        out[flat] = f(va[ia], vb[ib]);
    });
    out
}

// ---- dense linear algebra ----

pub(super) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |out_row: &mut [T], i: usize| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
    out
}

/// dA = dC * B^T for C = A * B.
fn matmul_grad_a<T: Real>(gout: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    let row = |da_row: &mut [T], i: usize| {
        for l in 0..k {
            let mut acc = T::zero();
            let brow = &b[l * n..(l + 1) * n];
            let grow = &gout[i * n..(i + 1) * n];
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            da_row[l] = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        da.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in da.chunks_mut(k).enumerate() {
            row(r, i);
        }
    }
    da
}

/// dB = A^T * dC for C = A * B.
fn matmul_grad_b<T: Real>(gout: &[T], a: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    let row = |db_row: &mut [T], l: usize| {
        for i in 0..m {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let grow = &gout[i * n..(i + 1) * n];
            for (o, &g) in db_row.iter_mut().zip(grow) {
                *o += av * g;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        db.par_chunks_mut(n).enumerate().for_each(|(l, r)| row(r, l));
    } else {
        for (l, r) in db.chunks_mut(n).enumerate() {
            row(r, l);
        }
    }
    db
}

// ---- convolution ----

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    si: &[usize],
    sk: &[usize],
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (c_out, k) = (sk[0], sk[2]);
    let mut out = vec![T::zero(); c_out * out_h * out_w];
    let channel = |out_c: &mut [T], o: usize| {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = T::zero();
                for c in 0..c_in {
                    for ki in 0..k {
                        let y = (oy * stride + ki) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let x = (ox * stride + kj) as isize - padding as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += input[(c * h + y as usize) * w + x as usize]
                                * kernel[((o * c_in + c) * k + ki) * k + kj];
                        }
                    }
                }
                out_c[oy * out_w + ox] = acc;
            }
        }
    };
    if c_out * out_h * out_w * c_in * k * k >= PAR_THRESHOLD {
        out.par_chunks_mut(out_h * out_w)
            .enumerate()
            .for_each(|(o, ch)| channel(ch, o));
    } else {
        for (o, ch) in out.chunks_mut(out_h * out_w).enumerate() {
            channel(ch, o);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input<T: Real>(
    gout: &[T],
    kernel: &[T],
    si: &[usize],
    sk: &[usize],
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (c_out, k) = (sk[0], sk[2]);
    let mut din = vec![T::zero(); c_in * h * w];
    let channel = |din_c: &mut [T], c: usize| {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for o in 0..c_out {
                    for ki in 0..k {
                        let num_y = y + padding;
                        if num_y < ki || (num_y - ki) % stride != 0 {
                            continue;
                        }
                        let oy = (num_y - ki) / stride;
                        if oy >= out_h {
                            continue;
                        }
                        for kj in 0..k {
                            let num_x = x + padding;
                            if num_x < kj || (num_x - kj) % stride != 0 {
                                continue;
                            }
                            let ox = (num_x - kj) / stride;
                            if ox >= out_w {
                                continue;
                            }
                            acc += gout[(o * out_h + oy) * out_w + ox]
                                * kernel[((o * c_in + c) * k + ki) * k + kj];
                        }
                    }
                }
                din_c[y * w + x] = acc;
            }
        }
    };
    if c_in * h * w * c_out * k * k >= PAR_THRESHOLD {
        din.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(c, ch)| channel(ch, c));
    } else {
        for (c, ch) in din.chunks_mut(h * w).enumerate() {
            channel(ch, c);
        }
    }
    din
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_kernel<T: Real>(
    gout: &[T],
    input: &[T],
    si: &[usize],
    sk: &[usize],
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (c_out, k) = (sk[0], sk[2]);
    let mut dk = vec![T::zero(); c_out * c_in * k * k];
    let filter = |dk_f: &mut [T], oc: usize| {
        let (o, c) = (oc / c_in, oc % c_in);
        for ki in 0..k {
            for kj in 0..k {
                let mut acc = T::zero();
                for oy in 0..out_h {
                    let y = (oy * stride + ki) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let x = (ox * stride + kj) as isize - padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += gout[(o * out_h + oy) * out_w + ox]
                            * input[(c * h + y as usize) * w + x as usize];
                    }
                }
                dk_f[ki * k + kj] = acc;
            }
        }
    };
    if c_out * c_in * k * k * out_h * out_w >= PAR_THRESHOLD {
        dk.par_chunks_mut(k * k)
            .enumerate()
            .for_each(|(oc, f)| filter(f, oc));
    } else {
        for (oc, f) in dk.chunks_mut(k * k).enumerate() {
            filter(f, oc);
        }
    }
    dk
}

// ---- pooling and upsampling ----

pub(super) fn max_pool2d_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                        // Strictly-greater keeps the first (row-major) index on ties.
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
                argmax[(ch * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub(super) fn avg_pool2d_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Vec<T> {
    let (oh, ow) = (h / window, w / window);
    let inv = T::one() / T::of((window * window) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..window {
                    for dx in 0..window {
                        acc += input[(ch * h + oy * window + dy) * w + ox * window + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(super) fn upsample2d_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / factor) * w + x / factor];
            }
        }
    }
    out
}

// ---- scatter / gather ----

pub(super) fn scatter_max_forward<T: Real>(
    features: &[T],
    cell_index: &[usize],
    num_cells: usize,
    d: usize,
) -> (Vec<T>, Vec<Option<u32>>) {
    let mut out = vec![T::zero(); num_cells * d];
    let mut argmax: Vec<Option<u32>> = vec![None; num_cells * d];
    // Single ascending pass; strictly-greater comparison keeps the lowest
    // point row on ties.
    for (row, &cell) in cell_index.iter().enumerate() {
        for ch in 0..d {
            let v = features[row * d + ch];
            let slot = cell * d + ch;
            match argmax[slot] {
                None => {
                    out[slot] = v;
                    argmax[slot] = Some(row as u32);
                }
                Some(_) if v > out[slot] => {
                    out[slot] = v;
                    argmax[slot] = Some(row as u32);
                }
                _ => {}
            }
        }
    }
    (out, argmax)
}

/// Four (flat cell, weight) taps per query for bilinear lookup with border
/// replication. The first coordinate runs over H, the second over W; cell
/// centers sit at `(i + 0.5) / H` and `(j + 0.5) / W`.
pub(super) fn bilinear_taps<T: Real>(uv: &[T], q: usize, h: usize, w: usize) -> Vec<[(usize, T); 4]> {
    let mut taps = Vec::with_capacity(q);
    for i in 0..q {
        let u = uv[i * 2].as_f64().clamp(0.0, 1.0);
        let v = uv[i * 2 + 1].as_f64().clamp(0.0, 1.0);
        let y = u * h as f64 - 0.5;
        let x = v * w as f64 - 0.5;
        let y0f = y.floor();
        let x0f = x.floor();
        let fy = y - y0f;
        let fx = x - x0f;
        let clamp_i = |iv: f64, n: usize| -> usize { (iv.max(0.0) as usize).min(n - 1) };
        let (y0, y1) = (clamp_i(y0f, h), clamp_i(y0f + 1.0, h));
        let (x0, x1) = (clamp_i(x0f, w), clamp_i(x0f + 1.0, w));
        let (wy0, wy1) = (1.0 - fy, fy);
        let (wx0, wx1) = (1.0 - fx, fx);
        taps.push([
            (y0 * w + x0, T::of(wy0 * wx0)),
            (y0 * w + x1, T::of(wy0 * wx1)),
            (y1 * w + x0, T::of(wy1 * wx0)),
            (y1 * w + x1, T::of(wy1 * wx1)),
        ]);
    }
    taps
}

pub(super) fn gather_bilinear_forward<T: Real>(
    grid: &[T],
    taps: &[[(usize, T); 4]],
    d: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let plane = h * w;
    let q = taps.len();
    let mut out = vec![T::zero(); q * d];
    for (i, tap) in taps.iter().enumerate() {
        for ch in 0..d {
            let base = ch * plane;
            let mut acc = T::zero();
            for &(cell, weight) in tap {
                acc += grid[base + cell] * weight;
            }
            out[i * d + ch] = acc;
        }
    }
    out
}

// ---- pairwise cosine penalty ----

const NORM_FLOOR: f64 = 1e-8;

pub(super) fn pairwise_cos_penalty_forward<T: Real>(rows: &[T], k: usize, d: usize, exponent: u32) -> T {
    let units = normalized_rows(rows, k, d);
    let pairs = (k * (k - 1) / 2) as f64;
    let mut acc = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let c = dot(&units[i * d..(i + 1) * d], &units[j * d..(j + 1) * d]);
            acc += c.abs().powi(exponent as i32);
        }
    }
    T::of(acc / pairs)
}

fn pairwise_cos_penalty_grad<T: Real>(rows: &[T], k: usize, d: usize, exponent: u32, gout: T) -> Vec<T> {
    let units = normalized_rows(rows, k, d);
    let norms: Vec<f64> = (0..k)
        .map(|i| {
            let r = &rows[i * d..(i + 1) * d];
            dot_t(r, r).sqrt().max(NORM_FLOOR)
        })
        .collect();
    let pairs = (k * (k - 1) / 2) as f64;
    let scale = gout.as_f64() / pairs;
    let mut du = vec![0.0f64; k * d];
    for i in 0..k {
        for j in (i + 1)..k {
            let ui = &units[i * d..(i + 1) * d];
            let uj = &units[j * d..(j + 1) * d];
            let c = dot(ui, uj);
            if c == 0.0 && exponent > 1 {
                continue;
            }
            let w = scale * exponent as f64 * c.abs().powi(exponent as i32 - 1) * c.signum();
            for ch in 0..d {
                du[i * d + ch] += w * uj[ch];
                du[j * d + ch] += w * ui[ch];
            }
        }
    }
    // Chain through normalization: dr = (du - u (u . du)) / |r|.
    let mut grad = vec![T::zero(); k * d];
    for i in 0..k {
        let u = &units[i * d..(i + 1) * d];
        let dui = &du[i * d..(i + 1) * d];
        let radial = dot(u, dui);
        for ch in 0..d {
            grad[i * d + ch] = T::of((dui[ch] - u[ch] * radial) / norms[i]);
        }
    }
    grad
}

fn normalized_rows<T: Real>(rows: &[T], k: usize, d: usize) -> Vec<f64> {
    let mut units = vec![0.0f64; k * d];
    for i in 0..k {
        let r = &rows[i * d..(i + 1) * d];
        let norm = dot_t(r, r).sqrt().max(NORM_FLOOR);
        for ch in 0..d {
            units[i * d + ch] = r[ch].as_f64() / norm;
        }
    }
    units
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_t<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

// ---- backward dispatch ----

fn accumulate<T: Real>(
    flowing: &mut [Option<Vec<T>>],
    id: TensorId,
    len: usize,
    contribution: impl FnOnce(&mut [T]),
) {
    let slot = &mut flowing[id.index()];
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    contribution(buf);
}

pub(super) fn backward_op<T: Real>(
    entries: &[TensorEntry<T>],
    op: &OpRecord<T>,
    gout: &[T],
    flowing: &mut [Option<Vec<T>>],
) {
    let needs = |i: usize| entries[op.inputs[i].index()].requires_grad;
    let vals = |i: usize| entries[op.inputs[i].index()].values.as_slice();
    let shape_of = |i: usize| entries[op.inputs[i].index()].shape.as_slice();
    let len_of = |i: usize| entries[op.inputs[i].index()].values.len();
    let out_shape = entries[op.output.index()].shape.as_slice();
    let out_vals = entries[op.output.index()].values.as_slice();

    match &op.rule {
        Rule::Leaf => {}
        Rule::Add | Rule::Sub => {
            for side in 0..2 {
                if !needs(side) {
                    continue;
                }
                let sign = if side == 1 && matches!(op.rule, Rule::Sub) {
                    -T::one()
                } else {
                    T::one()
                };
                let (sa, sb) = (shape_of(0).to_vec(), shape_of(1).to_vec());
                let target = if side == 0 { &sa } else { &sb };
                let target_len = len_of(side);
                accumulate(flowing, op.inputs[side], target_len, |dst| {
                    reduce_broadcast(gout, out_shape, target, dst, |g| g * sign);
                });
            }
        }
        Rule::Mul => {
            let (sa, sb) = (shape_of(0).to_vec(), shape_of(1).to_vec());
            for side in 0..2 {
                if !needs(side) {
                    continue;
                }
                let other = vals(1 - side);
                let other_shape = if side == 0 { &sb } else { &sa };
                let target = if side == 0 { &sa } else { &sb };
                // g * other, evaluated in output coordinates, reduced to the
                // input shape.
                let stride_other = broadcast_strides(out_shape, other_shape);
                let mut weighted = vec![T::zero(); gout.len()];
                iterate_with_strides(out_shape, &stride_other, |flat, io| {
                    weighted[flat] = gout[flat] * other[io];
                });
                accumulate(flowing, op.inputs[side], len_of(side), |dst| {
                    reduce_broadcast(&weighted, out_shape, target, dst, |g| g);
                });
            }
        }
        Rule::Relu => {
            if needs(0) {
                let x = vals(0);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        if x[i] > T::zero() {
                            *d += gout[i];
                        }
                    }
                });
            }
        }
        Rule::Sin => {
            if needs(0) {
                let x = vals(0);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += gout[i] * x[i].cos();
                    }
                });
            }
        }
        Rule::Cos => {
            if needs(0) {
                let x = vals(0);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d -= gout[i] * x[i].sin();
                    }
                });
            }
        }
        Rule::Sigmoid => {
            if needs(0) {
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        let s = out_vals[i];
                        *d += gout[i] * s * (T::one() - s);
                    }
                });
            }
        }
        Rule::Scale(k) => {
            if needs(0) {
                let k = *k;
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += gout[i] * k;
                    }
                });
            }
        }
        Rule::Matmul => {
            let (m, k) = (shape_of(0)[0], shape_of(0)[1]);
            let n = shape_of(1)[1];
            if needs(0) {
                let da = matmul_grad_a(gout, vals(1), m, k, n);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (d, s) in dst.iter_mut().zip(&da) {
                        *d += *s;
                    }
                });
            }
            if needs(1) {
                let db = matmul_grad_b(gout, vals(0), m, k, n);
                accumulate(flowing, op.inputs[1], len_of(1), |dst| {
                    for (d, s) in dst.iter_mut().zip(&db) {
                        *d += *s;
                    }
                });
            }
        }
        Rule::Conv2d { stride, padding } => {
            let si = shape_of(0).to_vec();
            let sk = shape_of(1).to_vec();
            let (out_h, out_w) = (out_shape[1], out_shape[2]);
            if needs(0) {
                let din = conv2d_grad_input(gout, vals(1), &si, &sk, *stride, *padding, out_h, out_w);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (d, s) in dst.iter_mut().zip(&din) {
                        *d += *s;
                    }
                });
            }
            if needs(1) {
                let dk = conv2d_grad_kernel(gout, vals(0), &si, &sk, *stride, *padding, out_h, out_w);
                accumulate(flowing, op.inputs[1], len_of(1), |dst| {
                    for (d, s) in dst.iter_mut().zip(&dk) {
                        *d += *s;
                    }
                });
            }
        }
        Rule::MaxPool2d { argmax } => {
            if needs(0) {
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (cell, &src) in argmax.iter().enumerate() {
                        dst[src] += gout[cell];
                    }
                });
            }
        }
        Rule::AvgPool2d { window } => {
            if needs(0) {
                let si = shape_of(0).to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (oh, ow) = (h / window, w / window);
                let inv = T::one() / T::of((window * window) as f64);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let g = gout[(ch * oh + y / window) * ow + x / window];
                                dst[(ch * h + y) * w + x] += g * inv;
                            }
                        }
                    }
                });
            }
        }
        Rule::Upsample2d { factor } => {
            if needs(0) {
                let si = shape_of(0).to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (oh, ow) = (h * factor, w * factor);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                dst[(ch * h + y / factor) * w + x / factor] +=
                                    gout[(ch * oh + y) * ow + x];
                            }
                        }
                    }
                });
            }
        }
        Rule::ScatterMax { argmax } => {
            if needs(0) {
                let d = shape_of(0)[1];
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (slot, winner) in argmax.iter().enumerate() {
                        if let Some(row) = winner {
                            let ch = slot % d;
                            dst[*row as usize * d + ch] += gout[slot];
                        }
                    }
                });
            }
        }
        Rule::GatherBilinear { taps } => {
            if needs(0) {
                let sg = shape_of(0).to_vec();
                let (d, h, w) = (sg[0], sg[1], sg[2]);
                let plane = h * w;
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, tap) in taps.iter().enumerate() {
                        for ch in 0..d {
                            let g = gout[i * d + ch];
                            for &(cell, weight) in tap {
                                dst[ch * plane + cell] += g * weight;
                            }
                        }
                    }
                });
            }
        }
        Rule::GatherRows { indices } => {
            if needs(0) {
                let d = shape_of(0)[1];
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, &r) in indices.iter().enumerate() {
                        for ch in 0..d {
                            dst[r * d + ch] += gout[i * d + ch];
                        }
                    }
                });
            }
        }
        Rule::ConcatCols => {
            let (d1, d2) = (shape_of(0)[1], shape_of(1)[1]);
            let n = shape_of(0)[0];
            if needs(0) {
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for i in 0..n {
                        for ch in 0..d1 {
                            dst[i * d1 + ch] += gout[i * (d1 + d2) + ch];
                        }
                    }
                });
            }
            if needs(1) {
                accumulate(flowing, op.inputs[1], len_of(1), |dst| {
                    for i in 0..n {
                        for ch in 0..d2 {
                            dst[i * d2 + ch] += gout[i * (d1 + d2) + d1 + ch];
                        }
                    }
                });
            }
        }
        Rule::Transpose2 => {
            if needs(0) {
                let (m, n) = (shape_of(0)[0], shape_of(0)[1]);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
        }
        Rule::Reshape => {
            if needs(0) {
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (d, &g) in dst.iter_mut().zip(gout) {
                        *d += g;
                    }
                });
            }
        }
        Rule::Sum => {
            if needs(0) {
                let g = gout[0];
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
        }
        Rule::Mean => {
            if needs(0) {
                let g = gout[0] / T::of(len_of(0) as f64);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
        }
        Rule::BceWithLogits { labels } => {
            if needs(0) {
                let z = vals(0);
                let g = gout[0] / T::of(labels.len() as f64);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        let y = if labels[i] { T::one() } else { T::zero() };
                        *d += g * (sigmoid(z[i]) - y);
                    }
                });
            }
        }
        Rule::PairwiseCosPenalty { exponent } => {
            if needs(0) {
                let s = shape_of(0).to_vec();
                let grad = pairwise_cos_penalty_grad(vals(0), s[0], s[1], *exponent, gout[0]);
                accumulate(flowing, op.inputs[0], len_of(0), |dst| {
                    for (d, s) in dst.iter_mut().zip(&grad) {
                        *d += *s;
                    }
                });
            }
        }
    }
}

/// Accumulates `map(g)` over the broadcast axes of `out_shape` into a buffer
/// shaped like `target`.
fn reduce_broadcast<T: Real>(
    gout: &[T],
    out_shape: &[usize],
    target: &[usize],
    dst: &mut [T],
    map: impl Fn(T) -> T,
) {
    let strides = broadcast_strides(out_shape, target);
    iterate_with_strides(out_shape, &strides, |flat, it| {
        dst[it] += map(gout[flat]);
    });
}

fn iterate_with_strides(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    for flat in 0..total {
        f(flat, idx);
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            idx += strides[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            idx -= strides[axis] * out_shape[axis];
            coord[axis] = 0;
        }
    }
}
