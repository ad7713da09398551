//! Dense loops behind the graph ops. All buffers are row-major.

/// `out[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Geometry of a valid-padding 1-D convolution over `[batch, len, c_in]`
/// with kernel `[width, c_in, c_out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub width: usize,
    pub c_out: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        self.len + 1 - self.width
    }
}

pub(crate) fn conv1d(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let out_len = d.out_len();
    let mut out = vec![0.0; d.batch * out_len * d.c_out];
    for b in 0..d.batch {
        for t in 0..out_len {
            let orow = &mut out[(b * out_len + t) * d.c_out..(b * out_len + t + 1) * d.c_out];
            for k in 0..d.width {
                let xrow = &x[(b * d.len + t + k) * d.c_in..(b * d.len + t + k + 1) * d.c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(k * d.c_in + c) * d.c_out..(k * d.c_in + c + 1) * d.c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a valid 1-D convolution with respect to input and kernel.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let out_len = d.out_len();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for b in 0..d.batch {
        for t in 0..out_len {
            let grow = &g[(b * out_len + t) * d.c_out..(b * out_len + t + 1) * d.c_out];
            for k in 0..d.width {
                let xbase = (b * d.len + t + k) * d.c_in;
                for c in 0..d.c_in {
                    let wbase = (k * d.c_in + c) * d.c_out;
                    let wrow = &w[wbase..wbase + d.c_out];
                    if let Some(gx) = gx.as_mut() {
                        gx[xbase + c] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xv = x[xbase + c];
                        for (o, &gv) in gw[wbase..wbase + d.c_out].iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
