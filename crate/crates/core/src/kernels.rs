//! Raw numeric kernels over flat row-major buffers. No shape bookkeeping
//! happens here; callers in `autograd` validate geometry first.

/// `c = a·b + beta·c` for logical `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches, given
    // the strides derived from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Images per chunk so the column buffer stays around 8M values.
    fn chunk(&self, n: usize) -> usize {
        let per = self.patch_len() * self.out_len();
        (8_000_000 / per.max(1)).clamp(1, n.max(1))
    }
}

/// Unfolds one image into columns `[c_in·kh·kw, out_h·out_w]`, writing at
/// column offset `col0` of a buffer with `ld` columns.
fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, col0: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
fn col2im(cols: &[f64], g: &ConvGeom, ld: usize, col0: usize, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `input: [n, c_in, h, w]`,
/// `kernels: [c_out, c_in, kh, kw]`, `bias: [c_out]` → `[n, c_out, oh, ow]`.
pub fn conv2d_forward(input: &[f64], n: usize, g: &ConvGeom, kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let (plen, olen) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * g.c_out * olen];
    let chunk = g.chunk(n);
    let mut cols = vec![0.0; plen * chunk * olen];
    let mut tmp = vec![0.0; g.c_out * chunk * olen];
    let mut start = 0;
    while start < n {
        let cn = chunk.min(n - start);
        let ld = cn * olen;
        for j in 0..cn {
            let img = &input[(start + j) * in_len..(start + j + 1) * in_len];
            im2col(img, g, &mut cols, ld, j * olen);
        }
        gemm(g.c_out, plen, ld, kernels, false, &cols[..plen * ld], false, 0.0, &mut tmp[..g.c_out * ld]);
        for j in 0..cn {
            for o in 0..g.c_out {
                let dst = &mut out[((start + j) * g.c_out + o) * olen..][..olen];
                let src = &tmp[o * ld + j * olen..][..olen];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        start += cn;
    }
    out
}

/// Gradients of [`conv2d_forward`]: returns `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward(
    input: &[f64],
    n: usize,
    g: &ConvGeom,
    kernels: &[f64],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (plen, olen) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let mut d_in = vec![0.0; n * in_len];
    let mut d_k = vec![0.0; g.c_out * plen];
    let mut d_b = vec![0.0; g.c_out];
    let chunk = g.chunk(n);
    let mut cols = vec![0.0; plen * chunk * olen];
    let mut dy = vec![0.0; g.c_out * chunk * olen];
    let mut start = 0;
    while start < n {
        let cn = chunk.min(n - start);
        let ld = cn * olen;
        for j in 0..cn {
            let img = &input[(start + j) * in_len..(start + j + 1) * in_len];
            im2col(img, g, &mut cols, ld, j * olen);
            for o in 0..g.c_out {
                let src = &d_out[((start + j) * g.c_out + o) * olen..][..olen];
                dy[o * ld + j * olen..][..olen].copy_from_slice(src);
                d_b[o] += src.iter().sum::<f64>();
            }
        }
        // dK += dY · colsᵀ
        gemm(g.c_out, ld, plen, &dy[..g.c_out * ld], false, &cols[..plen * ld], true, 1.0, &mut d_k);
        // dcols = Kᵀ · dY
        gemm(plen, g.c_out, ld, kernels, true, &dy[..g.c_out * ld], false, 0.0, &mut cols[..plen * ld]);
        for j in 0..cn {
            let img = &mut d_in[(start + j) * in_len..(start + j + 1) * in_len];
            col2im(&cols, g, ld, j * olen, img);
        }
        start += cn;
    }
    (d_in, d_k, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·bᵀ
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn chunking_matches_single_pass() {
        let g = ConvGeom { c_in: 2, h: 5, w: 4, c_out: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
        let n = 3;
        let input: Vec<f64> = (0..n * 2 * 20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let out = conv2d_forward(&input, n, &g, &k, &[0.5, -1.0, 0.0]);
        for i in 0..n {
            let single = conv2d_forward(&input[i * 40..(i + 1) * 40], 1, &g, &k, &[0.5, -1.0, 0.0]);
            assert_eq!(&out[i * 60..(i + 1) * 60], &single[..]);
        }
    }
}
