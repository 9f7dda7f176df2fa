//! 3³ convolution with zero padding 1, computed as 27 shifted GEMMs so the
//! working set stays at one `Cin × Nout` gather buffer.

use crate::grid::Dims;

pub(crate) const TAPS: usize = 27;

pub(crate) fn output_dims(input: Dims, stride: usize) -> Dims {
    input.map(|d| d.div_ceil(stride))
}

/// Fills `buf` (`cin × nout`, row-major) with the input samples seen by tap
/// `(kd, kh, kw)`; out-of-range positions are zero.
fn gather(input: &[f64], cin: usize, dims: Dims, out_dims: Dims, stride: usize, tap: [usize; 3], buf: &mut [f64]) {
    let nin = dims[0] * dims[1] * dims[2];
    let nout = out_dims[0] * out_dims[1] * out_dims[2];
    let src_coord = |o: usize, k: usize, d: usize| -> Option<usize> {
        let s = (o * stride + k) as isize - 1;
        (s >= 0 && (s as usize) < d).then_some(s as usize)
    };
    for c in 0..cin {
        let plane = &input[c * nin..(c + 1) * nin];
        let row = &mut buf[c * nout..(c + 1) * nout];
        let mut o = 0;
        for od in 0..out_dims[0] {
            let sd = src_coord(od, tap[0], dims[0]);
            for oh in 0..out_dims[1] {
                let sh = src_coord(oh, tap[1], dims[1]);
                match (sd, sh) {
                    (Some(sd), Some(sh)) => {
                        let base = (sd * dims[1] + sh) * dims[2];
                        for ow in 0..out_dims[2] {
                            row[o] = match src_coord(ow, tap[2], dims[2]) {
                                Some(sw) => plane[base + sw],
                                None => 0.0,
                            };
                            o += 1;
                        }
                    }
                    _ => {
                        row[o..o + out_dims[2]].fill(0.0);
                        o += out_dims[2];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: accumulates `buf` back into `grad_input`.
fn scatter_add(grad_input: &mut [f64], cin: usize, dims: Dims, out_dims: Dims, stride: usize, tap: [usize; 3], buf: &[f64]) {
    let nin = dims[0] * dims[1] * dims[2];
    let nout = out_dims[0] * out_dims[1] * out_dims[2];
    let src_coord = |o: usize, k: usize, d: usize| -> Option<usize> {
        let s = (o * stride + k) as isize - 1;
        (s >= 0 && (s as usize) < d).then_some(s as usize)
    };
    for c in 0..cin {
        let plane = &mut grad_input[c * nin..(c + 1) * nin];
        let row = &buf[c * nout..(c + 1) * nout];
        let mut o = 0;
        for od in 0..out_dims[0] {
            let sd = src_coord(od, tap[0], dims[0]);
            for oh in 0..out_dims[1] {
                let sh = src_coord(oh, tap[1], dims[1]);
                if let (Some(sd), Some(sh)) = (sd, sh) {
                    let base = (sd * dims[1] + sh) * dims[2];
                    for ow in 0..out_dims[2] {
                        if let Some(sw) = src_coord(ow, tap[2], dims[2]) {
                            plane[base + sw] += row[o];
                        }
                        o += 1;
                    }
                } else {
                    o += out_dims[2];
                }
            }
        }
    }
}

fn taps() -> impl Iterator<Item = (usize, [usize; 3])> {
    (0..TAPS).map(|t| (t, [t / 9, (t / 3) % 3, t % 3]))
}

/// `C[m×n] = alpha·A·B + beta·C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the strided views, so the unsafe call can't read or write
    // past the slices.
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `input` is `cin × dims`, `weight` is `cout × cin × 27`, output is
/// `cout × output_dims(dims, stride)`.
pub(crate) fn conv3d_forward(input: &[f64], cin: usize, dims: Dims, weight: &[f64], bias: &[f64], cout: usize, stride: usize) -> Vec<f64> {
    let out_dims = output_dims(dims, stride);
    let nout = out_dims[0] * out_dims[1] * out_dims[2];
    let mut out = vec![0.0; cout * nout];
    for (co, b) in bias.iter().enumerate() {
        out[co * nout..(co + 1) * nout].fill(*b);
    }
    let mut buf = vec![0.0; cin * nout];
    for (t, tap) in taps() {
        gather(input, cin, dims, out_dims, stride, tap, &mut buf);
        gemm(cout, cin, nout, &weight[t..], cin * TAPS, TAPS, &buf, nout, 1, 1.0, &mut out, nout, 1);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    input: &[f64],
    cin: usize,
    dims: Dims,
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let out_dims = output_dims(dims, stride);
    let nout = out_dims[0] * out_dims[1] * out_dims[2];
    let nin = dims[0] * dims[1] * dims[2];
    let mut gw = vec![0.0; cout * cin * TAPS];
    let gb = (0..cout).map(|co| grad_out[co * nout..(co + 1) * nout].iter().sum()).collect();
    let mut gi = need_input.then(|| vec![0.0; cin * nin]);
    let mut buf = vec![0.0; cin * nout];
    for (t, tap) in taps() {
        gather(input, cin, dims, out_dims, stride, tap, &mut buf);
        // dW[:, :, t] += dOut · Xᵀ
        gemm(cout, nout, cin, grad_out, nout, 1, &buf, 1, nout, 1.0, &mut gw[t..], cin * TAPS, TAPS);
        if let Some(gi) = gi.as_mut() {
            // dX = W[:, :, t]ᵀ · dOut
            gemm(cin, cout, nout, &weight[t..], TAPS, cin * TAPS, grad_out, nout, 1, 0.0, &mut buf, nout, 1);
            scatter_add(gi, cin, dims, out_dims, stride, tap, &buf);
        }
    }
    ConvGrads { input: gi, weight: gw, bias: gb }
}
