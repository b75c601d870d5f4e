//! Bilinear resampling with the half-pixel (align-corners = false) convention.

/// Interpolation taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) struct BilinearPlan {
    pub in_w: usize,
    pub rows: Vec<Tap>,
    pub cols: Vec<Tap>,
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }

    pub fn forward_plane(&self, src: &[f64], dst: &mut [f64]) {
        let out_w = self.cols.len();
        for (oy, r) in self.rows.iter().enumerate() {
            let lo = &src[r.lo * self.in_w..(r.lo + 1) * self.in_w];
            let hi = &src[r.hi * self.in_w..(r.hi + 1) * self.in_w];
            for (ox, c) in self.cols.iter().enumerate() {
                let top = c.w_lo * lo[c.lo] + c.w_hi * lo[c.hi];
                let bottom = c.w_lo * hi[c.lo] + c.w_hi * hi[c.hi];
                dst[oy * out_w + ox] = r.w_lo * top + r.w_hi * bottom;
            }
        }
    }

    pub fn backward_plane(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let out_w = self.cols.len();
        for (oy, r) in self.rows.iter().enumerate() {
            for (ox, c) in self.cols.iter().enumerate() {
                let g = grad_out[oy * out_w + ox];
                grad_in[r.lo * self.in_w + c.lo] += g * r.w_lo * c.w_lo;
                grad_in[r.lo * self.in_w + c.hi] += g * r.w_lo * c.w_hi;
                grad_in[r.hi * self.in_w + c.lo] += g * r.w_hi * c.w_lo;
                grad_in[r.hi * self.in_w + c.hi] += g * r.w_hi * c.w_hi;
            }
        }
    }
}
