//! Forward and backward kernels on single-sample `(C, H, W)` feature maps.

/// `c = op(a) * op(b) (+ c)` with row-major storage.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`.
/// `op(b)` is `k x n`; when `b_t` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods: `col[(ci*9 + ky*3 + kx), r*w + c]`.
pub fn im2col3(x: &[f32], cin: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for r in 0..h {
                    let out = &mut row[r * w..(r + 1) * w];
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: folds columns back, accumulating into `dx`.
pub fn col2im3(col: &[f32], cin: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for r in 0..h {
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = &row[r * w..(r + 1) * w];
                    let dst = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Weight layout `[cout, cin * k * k]` with `k` in {1, 3}; stride 1, same padding.
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv_forward(s: &ConvShape, x: &[f32], weight: &[f32], bias: &[f32], col: &mut Vec<f32>) -> Vec<f32> {
    let hw = s.h * s.w;
    let mut y = vec![0.0; s.cout * hw];
    for (co, b) in bias.iter().enumerate() {
        y[co * hw..(co + 1) * hw].fill(*b);
    }
    let input: &[f32] = if s.k == 3 {
        col.resize(s.patch() * hw, 0.0);
        im2col3(x, s.cin, s.h, s.w, col);
        col
    } else {
        x
    };
    gemm(s.cout, s.patch(), hw, weight, false, input, false, &mut y, true);
    y
}

/// Accumulates weight and bias gradients; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    s: &ConvShape,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_dx: bool,
    col: &mut Vec<f32>,
) -> Option<Vec<f32>> {
    let hw = s.h * s.w;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy[co * hw..(co + 1) * hw].iter().sum::<f32>();
    }
    if s.k == 3 {
        col.resize(s.patch() * hw, 0.0);
        im2col3(x, s.cin, s.h, s.w, col);
        gemm(s.cout, hw, s.patch(), dy, false, col, true, dweight, true);
    } else {
        gemm(s.cout, hw, s.patch(), dy, false, x, true, dweight, true);
    }
    if !need_dx {
        return None;
    }
    if s.k == 3 {
        gemm(s.patch(), s.cout, hw, weight, true, dy, false, col, false);
        let mut dx = vec![0.0; s.cin * hw];
        col2im3(col, s.cin, s.h, s.w, &mut dx);
        Some(dx)
    } else {
        let mut dx = vec![0.0; s.cin * hw];
        gemm(s.patch(), s.cout, hw, weight, true, dy, false, &mut dx, false);
        Some(dx)
    }
}

pub const GN_EPS: f32 = 1e-5;

pub struct GroupNormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub fn group_norm_forward(
    x: &[f32],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, GroupNormCache) {
    let per = c / groups * hw;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let xs = &x[g * per..(g + 1) * per];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let inv = 1.0 / (var + GN_EPS as f64).sqrt();
        inv_std[g] = inv as f32;
        for (o, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(xs) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let (gm, bt) = (gamma[ch], beta[ch]);
        for (o, &v) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(&xhat[ch * hw..(ch + 1) * hw]) {
            *o = gm * v + bt;
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    dy: &[f32],
    cache: &GroupNormCache,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let mut dxhat = vec![0.0; dy.len()];
    for ch in 0..c {
        let range = ch * hw..(ch + 1) * hw;
        let (mut sg, mut sb) = (0.0f32, 0.0f32);
        for ((d, &g), &xh) in dxhat[range.clone()]
            .iter_mut()
            .zip(&dy[range.clone()])
            .zip(&cache.xhat[range])
        {
            sg += g * xh;
            sb += g;
            *d = g * gamma[ch];
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
    }
    let per = c / groups * hw;
    let mut dx = vec![0.0; dy.len()];
    for g in 0..groups {
        let range = g * per..(g + 1) * per;
        let dxh = &dxhat[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let sum: f64 = dxh.iter().map(|&v| v as f64).sum();
        let dot: f64 = dxh.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
        let n = per as f64;
        let inv = cache.inv_std[g] as f64;
        for ((o, &d), &x) in dx[range].iter_mut().zip(dxh).zip(xh) {
            *o = (inv / n * (n * d as f64 - sum - x as f64 * dot)) as f32;
        }
    }
    dx
}

pub fn prelu_forward(x: &[f32], c: usize, hw: usize, slope: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let a = slope[ch];
        for (o, &v) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *o = if v > 0.0 { v } else { a * v };
        }
    }
    y
}

pub fn prelu_backward(x: &[f32], dy: &[f32], c: usize, hw: usize, slope: &[f32], dslope: &mut [f32]) -> Vec<f32> {
    let mut dx = vec![0.0; x.len()];
    for ch in 0..c {
        let a = slope[ch];
        let mut ds = 0.0f32;
        let range = ch * hw..(ch + 1) * hw;
        for ((o, &v), &g) in dx[range.clone()].iter_mut().zip(&x[range.clone()]).zip(&dy[range]) {
            if v > 0.0 {
                *o = g;
            } else {
                *o = a * g;
                ds += g * v;
            }
        }
        dslope[ch] += ds;
    }
    dx
}

/// 2x2 max pooling; returns the pooled map and the winning flat input index per output.
pub fn maxpool2_forward(x: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let cands = [
                    base + 2 * r * w + 2 * col,
                    base + 2 * r * w + 2 * col + 1,
                    base + (2 * r + 1) * w + 2 * col,
                    base + (2 * r + 1) * w + 2 * col + 1,
                ];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = (ch * oh + r) * ow + col;
                y[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &[f32], idx: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

/// 2x2 stride-2 transposed convolution. Weight layout `[cout * 4, cin]`.
pub fn convt2_forward(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut tmp = vec![0.0; cout * 4 * hw];
    gemm(cout * 4, cin, hw, weight, false, x, false, &mut tmp, false);
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; cout * oh * ow];
    for oc in 0..cout {
        for q in 0..4 {
            let (di, dj) = (q / 2, q % 2);
            let src = &tmp[(oc * 4 + q) * hw..(oc * 4 + q + 1) * hw];
            for i in 0..h {
                let out_row = &mut y[(oc * oh + 2 * i + di) * ow..(oc * oh + 2 * i + di + 1) * ow];
                for j in 0..w {
                    out_row[2 * j + dj] = src[i * w + j] + bias[oc];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn convt2_backward(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    dy: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Vec<f32> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dtmp = vec![0.0; cout * 4 * hw];
    for oc in 0..cout {
        dbias[oc] += dy[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f32>();
        for q in 0..4 {
            let (di, dj) = (q / 2, q % 2);
            let dst = &mut dtmp[(oc * 4 + q) * hw..(oc * 4 + q + 1) * hw];
            for i in 0..h {
                let row = &dy[(oc * oh + 2 * i + di) * ow..(oc * oh + 2 * i + di + 1) * ow];
                for j in 0..w {
                    dst[i * w + j] = row[2 * j + dj];
                }
            }
        }
    }
    gemm(cout * 4, hw, cin, &dtmp, false, x, true, dweight, true);
    let mut dx = vec![0.0; cin * hw];
    gemm(cin, cout * 4, hw, weight, true, &dtmp, false, &mut dx, false);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
    }

    /// Direct 3x3 same convolution.
    fn conv3_direct(x: &[f32], cin: usize, h: usize, w: usize, wt: &[f32], b: &[f32], cout: usize) -> Vec<f32> {
        let mut y = vec![0.0; cout * h * w];
        for co in 0..cout {
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sr, sc) = (r + ky - 1, c + kx - 1);
                                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                    continue;
                                }
                                acc += wt[co * cin * 9 + ci * 9 + (ky * 3 + kx) as usize]
                                    * x[(ci * h + sr as usize) * w + sc as usize];
                            }
                        }
                    }
                    y[(co * h + r as usize) * w + c as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cin, cout, h, w) = (3, 4, 5, 6);
        let x = rand_vec(cin * h * w, &mut rng);
        let wt = rand_vec(cout * cin * 9, &mut rng);
        let b = rand_vec(cout, &mut rng);
        let s = ConvShape { cin, cout, k: 3, h, w };
        let y = conv_forward(&s, &x, &wt, &b, &mut Vec::new());
        let yd = conv3_direct(&x, cin, h, w, &wt, &b, cout);
        for (a, b) in y.iter().zip(&yd) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, h, w) = (2, 4, 3);
        let x = rand_vec(cin * h * w, &mut rng);
        let c = rand_vec(cin * 9 * h * w, &mut rng);
        let mut col = vec![0.0; c.len()];
        im2col3(&x, cin, h, w, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut dx = vec![0.0; x.len()];
        col2im3(&c, cin, h, w, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    fn fd_check(f: &dyn Fn(&[f32]) -> f64, x: &[f32], analytic: &[f32]) {
        let eps = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let mut xm = x.to_vec();
            xm[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps as f64);
            let a = analytic[i] as f64;
            assert!(
                (num - a).abs() <= 2e-2 * (1.0 + num.abs().max(a.abs())),
                "index {i}: numeric {num} analytic {a}"
            );
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, hw, groups) = (4, 6, 2);
        let x = rand_vec(c * hw, &mut rng);
        let gamma = rand_vec(c, &mut rng);
        let beta = rand_vec(c, &mut rng);
        let proj = rand_vec(c * hw, &mut rng);
        let loss = |x: &[f32]| -> f64 {
            let (y, _) = group_norm_forward(x, c, hw, groups, &gamma, &beta);
            y.iter().zip(&proj).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = group_norm_forward(&x, c, hw, groups, &gamma, &beta);
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        let dx = group_norm_backward(&proj, &cache, c, hw, groups, &gamma, &mut dg, &mut db);
        fd_check(&loss, &x, &dx);
    }

    #[test]
    fn convt_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, cout, h, w) = (3, 2, 2, 3);
        let x = rand_vec(cin * h * w, &mut rng);
        let wt = rand_vec(cout * 4 * cin, &mut rng);
        let b = rand_vec(cout, &mut rng);
        let proj = rand_vec(cout * 4 * h * w, &mut rng);
        let loss = |x: &[f32]| -> f64 {
            convt2_forward(x, cin, h, w, &wt, &b, cout)
                .iter()
                .zip(&proj)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut dbias = vec![0.0; cout];
        let dx = convt2_backward(&x, cin, h, w, &wt, cout, &proj, &mut dw, &mut dbias);
        fd_check(&loss, &x, &dx);
        let wloss = |wv: &[f32]| -> f64 {
            convt2_forward(&x, cin, h, w, wv, &b, cout)
                .iter()
                .zip(&proj)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        fd_check(&wloss, &wt, &dw);

        let px = rand_vec(2 * 4 * 4, &mut rng);
        let (py, idx) = maxpool2_forward(&px, 2, 4, 4);
        assert_eq!(py.len(), 8);
        let dpx = maxpool2_backward(&vec![1.0; 8], &idx, px.len());
        assert_eq!(dpx.iter().sum::<f32>(), 8.0);
    }

    #[test]
    fn conv_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ConvShape {
            cin: 2,
            cout: 3,
            k: 3,
            h: 4,
            w: 4,
        };
        let x = rand_vec(2 * 16, &mut rng);
        let wt = rand_vec(3 * 18, &mut rng);
        let b = rand_vec(3, &mut rng);
        let proj = rand_vec(3 * 16, &mut rng);
        let loss = |wv: &[f32]| -> f64 {
            conv_forward(&s, &x, wv, &b, &mut Vec::new())
                .iter()
                .zip(&proj)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = conv_backward(&s, &x, &wt, &proj, &mut dw, &mut db, true, &mut Vec::new()).unwrap();
        fd_check(&loss, &wt, &dw);
        let xloss = |xv: &[f32]| -> f64 {
            conv_forward(&s, xv, &wt, &b, &mut Vec::new())
                .iter()
                .zip(&proj)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        fd_check(&xloss, &x, &dx);
    }
}
