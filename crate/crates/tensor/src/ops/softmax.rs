//! Softmax across the channel axis of `[N, C, ...]`.

pub(crate) fn forward(x: &[f64], n: usize, c: usize, area: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * area;
        for p in 0..area {
            let idx = |k: usize| base + k * area + p;
            let max = (0..c).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..c {
                out[idx(k)] /= total;
            }
        }
    }
    out
}

/// `dx = s * (g - sum_k g_k s_k)` per pixel.
pub(crate) fn backward(s: &[f64], g: &[f64], n: usize, c: usize, area: usize) -> Vec<f64> {
    let mut dx = vec![0.0; s.len()];
    for b in 0..n {
        let base = b * c * area;
        for p in 0..area {
            let idx = |k: usize| base + k * area + p;
            let inner: f64 = (0..c).map(|k| g[idx(k)] * s[idx(k)]).sum();
            for k in 0..c {
                dx[idx(k)] = s[idx(k)] * (g[idx(k)] - inner);
            }
        }
    }
    dx
}
