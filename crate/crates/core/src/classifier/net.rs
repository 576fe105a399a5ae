//! Forward and reverse passes of the fixed 2.5D network, generic over float width.
//!
//! Layout of every activation tensor is `[channel][z][y][x]`, x fastest.
//! Convolutions are 3x3x3 with one voxel of zero padding in-plane and no
//! padding in depth, so depth shrinks 7 -> 5 -> 3.

use num_traits::Float;

use super::Architecture;

/// Borrowed parameter tensors in a given precision.
#[derive(Debug, Clone)]
pub(crate) struct Weights<T> {
    /// `[c1][3][3][3]`
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    /// `[c2][c1][3][3][3]`
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    /// `[c2][depth_out]`
    pub lin_w: Vec<T>,
    pub lin_b: T,
}

impl<T: Float> Weights<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let (c1, c2) = (arch.c1, arch.c2);
        Self {
            conv1_w: vec![T::zero(); c1 * 27],
            conv1_b: vec![T::zero(); c1],
            conv2_w: vec![T::zero(); c2 * c1 * 27],
            conv2_b: vec![T::zero(); c2],
            lin_w: vec![T::zero(); c2 * arch.feature_depth()],
            lin_b: T::zero(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1_w.len()
            + self.conv1_b.len()
            + self.conv2_w.len()
            + self.conv2_b.len()
            + self.lin_w.len()
            + 1
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.conv1_w);
        v.extend_from_slice(&self.conv1_b);
        v.extend_from_slice(&self.conv2_w);
        v.extend_from_slice(&self.conv2_b);
        v.extend_from_slice(&self.lin_w);
        v.push(self.lin_b);
        v
    }

    pub fn unflatten(arch: &Architecture, flat: &[T]) -> Option<Self> {
        let mut w = Self::zeros(arch);
        if flat.len() != w.param_count() {
            return None;
        }
        let mut rest = flat;
        for dst in [
            &mut w.conv1_w,
            &mut w.conv1_b,
            &mut w.conv2_w,
            &mut w.conv2_b,
            &mut w.lin_w,
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        w.lin_b = rest[0];
        Some(w)
    }

    pub fn cast<U: Float>(&self) -> Weights<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::from(x).unwrap()).collect::<Vec<U>>();
        Weights {
            conv1_w: c(&self.conv1_w),
            conv1_b: c(&self.conv1_b),
            conv2_w: c(&self.conv2_w),
            conv2_b: c(&self.conv2_b),
            lin_w: c(&self.lin_w),
            lin_b: U::from(self.lin_b).unwrap(),
        }
    }
}

/// Shape bookkeeping for one input size.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Shapes {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Shapes {
    pub fn d1(&self) -> usize {
        self.d - 2
    }
    pub fn d2(&self) -> usize {
        self.d - 4
    }
    pub fn conv1_len(&self) -> usize {
        self.c1 * self.d1() * self.h * self.w
    }
    pub fn pool1_len(&self) -> usize {
        self.c1 * self.d1() * (self.h / 2) * (self.w / 2)
    }
    pub fn conv2_len(&self) -> usize {
        self.c2 * self.d2() * (self.h / 2) * (self.w / 2)
    }
}

/// Everything the reverse pass needs from a forward pass.
pub(crate) struct Cache<T> {
    pub shapes: Shapes,
    pub conv1_pre: Vec<T>,
    pub pool1: Vec<T>,
    /// Index into conv1 activations chosen by each pool1 cell.
    pub pool1_arg: Vec<u32>,
    pub conv2_pre: Vec<T>,
    pub pool2_arg: Vec<u32>,
    pub features: Vec<T>,
    /// Index into pool2 chosen by each feature.
    pub feature_arg: Vec<u32>,
    pub logit: T,
}

/// 3x3x3 convolution, zero padding in-plane, valid in depth, bias added.
fn conv3d<T: Float>(
    input: &[T],
    in_ch: usize,
    (w, h, d): (usize, usize, usize),
    kernel: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let out_ch = bias.len();
    let d_out = d - 2;
    let plane = w * h;
    for o in 0..out_ch {
        for zo in 0..d_out {
            let out_plane = &mut out[(o * d_out + zo) * plane..(o * d_out + zo + 1) * plane];
            for y in 0..h {
                let out_row = &mut out_plane[y * w..(y + 1) * w];
                out_row.iter_mut().for_each(|v| *v = bias[o]);
                for c in 0..in_ch {
                    for kz in 0..3 {
                        let in_plane = &input[(c * d + zo + kz) * plane..][..plane];
                        let kbase = ((o * in_ch + c) * 3 + kz) * 9;
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[yy as usize * w..(yy as usize + 1) * w];
                            for kx in 0..3 {
                                let wv = kernel[kbase + ky * 3 + kx];
                                match kx {
                                    0 => axpy(&mut out_row[1..], wv, &in_row[..w - 1]),
                                    1 => axpy(out_row, wv, in_row),
                                    _ => axpy(&mut out_row[..w - 1], wv, &in_row[1..]),
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Float>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// ReLU then 2x2 in-plane max pooling. Ties keep the lowest linear index.
fn relu_pool<T: Float>(pre: &[T], planes: usize, w: usize, h: usize) -> (Vec<T>, Vec<u32>) {
    let (pw, ph) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(planes * pw * ph);
    let mut arg = Vec::with_capacity(planes * pw * ph);
    for p in 0..planes {
        let base = p * w * h;
        for y in 0..ph {
            for x in 0..pw {
                let mut best_i = base + 2 * y * w + 2 * x;
                let mut best = pre[best_i].max(T::zero());
                for i in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    let v = pre[i].max(T::zero());
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn forward<T: Float>(wts: &Weights<T>, arch: &Architecture, input: &[T], w: usize, h: usize) -> Cache<T> {
    let s = Shapes {
        w,
        h,
        d: arch.depth,
        c1: arch.c1,
        c2: arch.c2,
    };
    debug_assert_eq!(input.len(), w * h * s.d);
    let mut conv1_pre = vec![T::zero(); s.conv1_len()];
    conv3d(input, 1, (w, h, s.d), &wts.conv1_w, &wts.conv1_b, &mut conv1_pre);
    let (pool1, pool1_arg) = relu_pool(&conv1_pre, s.c1 * s.d1(), w, h);

    let (w2, h2) = (w / 2, h / 2);
    let mut conv2_pre = vec![T::zero(); s.conv2_len()];
    conv3d(&pool1, s.c1, (w2, h2, s.d1()), &wts.conv2_w, &wts.conv2_b, &mut conv2_pre);
    let (pool2, pool2_arg) = relu_pool(&conv2_pre, s.c2 * s.d2(), w2, h2);

    // in-plane global max per (channel, depth)
    let plane = (w / 4) * (h / 4);
    let mut features = Vec::with_capacity(s.c2 * s.d2());
    let mut feature_arg = Vec::with_capacity(s.c2 * s.d2());
    for p in 0..s.c2 * s.d2() {
        let slab = &pool2[p * plane..(p + 1) * plane];
        let mut best_i = 0;
        let mut best = slab[0];
        for (i, &v) in slab.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        features.push(best);
        feature_arg.push((p * plane + best_i) as u32);
    }
    let logit = features
        .iter()
        .zip(&wts.lin_w)
        .fold(wts.lin_b, |acc, (&f, &lw)| acc + f * lw);
    Cache {
        shapes: s,
        conv1_pre,
        pool1,
        pool1_arg,
        conv2_pre,
        pool2_arg,
        features,
        feature_arg,
        logit,
    }
}

/// Gradient of the logit with respect to inputs and/or parameters, scaled by `dlogit`.
pub(crate) fn backward<T: Float>(
    wts: &Weights<T>,
    cache: &Cache<T>,
    input: &[T],
    dlogit: T,
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<T>>, Option<Weights<T>>) {
    let s = cache.shapes;
    let (w, h) = (s.w, s.h);
    let (w2, h2) = (w / 2, h / 2);
    let (d1, d2) = (s.d1(), s.d2());
    let mut grads = want_params.then(|| Weights {
        conv1_w: vec![T::zero(); wts.conv1_w.len()],
        conv1_b: vec![T::zero(); wts.conv1_b.len()],
        conv2_w: vec![T::zero(); wts.conv2_w.len()],
        conv2_b: vec![T::zero(); wts.conv2_b.len()],
        lin_w: vec![T::zero(); wts.lin_w.len()],
        lin_b: T::zero(),
    });
    if let Some(g) = grads.as_mut() {
        g.lin_b = dlogit;
        for (gw, &f) in g.lin_w.iter_mut().zip(&cache.features) {
            *gw = dlogit * f;
        }
    }

    // features -> pool2 -> conv2 pre-activations (one routed cell per feature)
    let mut d_pool1 = vec![T::zero(); s.pool1_len()];
    let plane2 = w2 * h2;
    let plane1 = w2 * h2;
    for (f, &parg) in cache.feature_arg.iter().enumerate() {
        let delta = dlogit * wts.lin_w[f];
        let q = cache.pool2_arg[parg as usize] as usize;
        if !(cache.conv2_pre[q] > T::zero()) || delta == T::zero() {
            continue;
        }
        let o = q / (d2 * plane2);
        let zo = (q / plane2) % d2;
        let y = (q % plane2) / w2;
        let x = q % w2;
        if let Some(g) = grads.as_mut() {
            g.conv2_b[o] = g.conv2_b[o] + delta;
        }
        for c in 0..s.c1 {
            for kz in 0..3 {
                let zi = zo + kz;
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h2 as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= w2 as isize {
                            continue;
                        }
                        let pi = (c * d1 + zi) * plane1 + yy as usize * w2 + xx as usize;
                        let ki = (((o * s.c1 + c) * 3 + kz) * 3 + ky) * 3 + kx;
                        d_pool1[pi] = d_pool1[pi] + delta * wts.conv2_w[ki];
                        if let Some(g) = grads.as_mut() {
                            g.conv2_w[ki] = g.conv2_w[ki] + delta * cache.pool1[pi];
                        }
                    }
                }
            }
        }
    }

    // pool1 -> conv1 pre-activations -> input
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let plane = w * h;
    for (pi, &dp) in d_pool1.iter().enumerate() {
        if dp == T::zero() {
            continue;
        }
        let r = cache.pool1_arg[pi] as usize;
        if !(cache.conv1_pre[r] > T::zero()) {
            continue;
        }
        let o = r / (d1 * plane);
        let zo = (r / plane) % d1;
        let y = (r % plane) / w;
        let x = r % w;
        if let Some(g) = grads.as_mut() {
            g.conv1_b[o] = g.conv1_b[o] + dp;
        }
        for kz in 0..3 {
            let zi = zo + kz;
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let ii = zi * plane + yy as usize * w + xx as usize;
                    let ki = ((o * 3 + kz) * 3 + ky) * 3 + kx;
                    if let Some(di) = d_input.as_mut() {
                        di[ii] = di[ii] + dp * wts.conv1_w[ki];
                    }
                    if let Some(g) = grads.as_mut() {
                        g.conv1_w[ki] = g.conv1_w[ki] + dp * input[ii];
                    }
                }
            }
        }
    }
    (d_input, grads)
}

/// Hash of every ReLU sign and pooling choice; equal hashes mean the same linear piece.
pub(crate) fn activation_pattern<T: Float>(cache: &Cache<T>) -> u64 {
    let mut hsh: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        hsh ^= v;
        hsh = hsh.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for &v in &cache.conv1_pre {
        mix((v > T::zero()) as u64);
    }
    for &a in &cache.pool1_arg {
        mix(a as u64);
    }
    for &v in &cache.conv2_pre {
        mix((v > T::zero()) as u64);
    }
    for &a in cache.pool2_arg.iter().chain(&cache.feature_arg) {
        mix(a as u64);
    }
    hsh
}
