//! Numeric kernels behind the graph ops.

use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row-major `a` (m×k) and `b` (k×n), with explicit
/// strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
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
            n as isize,
            1,
        );
    }
}

/// Gradients `(dx, dw, db)` of a convolution, each present only when requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if h < w[2] || wd < w[3] {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            height: x[2],
            width: x[3],
            out_ch: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }

    /// For each `(patch row, position)` the offset into one input image, or
    /// `None` where the patch reads padding.
    fn gather_index(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.patch_len() * self.positions());
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    for oi in 0..self.out_h {
                        for oj in 0..self.out_w {
                            idx.push(match (self.src(oi, ki, self.height), self.src(oj, kj, self.width)) {
                                (Some(i), Some(j)) => Some((c * self.height + i) * self.width + j),
                                _ => None,
                            });
                        }
                    }
                }
            }
        }
        idx
    }

    /// Patches of the whole batch as a `[patch_len, batch · positions]` matrix.
    fn im2col(&self, x: &[f64], idx: &[Option<usize>]) -> Vec<f64> {
        let (kl, pl) = (self.patch_len(), self.positions());
        let in_len = self.in_ch * self.height * self.width;
        let mut cols = Vec::with_capacity(kl * self.batch * pl);
        for row_idx in idx.chunks_exact(pl) {
            for img in x.chunks_exact(in_len) {
                cols.extend(row_idx.iter().map(|i| i.map_or(0.0, |i| img[i])));
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], idx: &[Option<usize>], dx: &mut [f64]) {
        let (kl, pl) = (self.patch_len(), self.positions());
        let in_len = self.in_ch * self.height * self.width;
        let cols_n = self.batch * pl;
        for r in 0..kl {
            let row_idx = &idx[r * pl..(r + 1) * pl];
            for n in 0..self.batch {
                let img = &mut dx[n * in_len..(n + 1) * in_len];
                let src = &cols[r * cols_n + n * pl..r * cols_n + (n + 1) * pl];
                for (s, i) in src.iter().zip(row_idx) {
                    if let Some(i) = *i {
                        img[i] += s;
                    }
                }
            }
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (kl, pl) = (self.patch_len(), self.positions());
        let cols_n = self.batch * pl;
        let cols = self.im2col(x, &self.gather_index());
        let mut prod = vec![0.0; self.out_ch * cols_n];
        gemm(self.out_ch, kl, cols_n, w, (kl, 1), &cols, (cols_n, 1), 0.0, &mut prod);
        let out_len = self.out_ch * pl;
        let mut out = vec![0.0; self.batch * out_len];
        for o in 0..self.out_ch {
            let b = bias.map_or(0.0, |b| b[o]);
            for n in 0..self.batch {
                let src = &prod[o * cols_n + n * pl..o * cols_n + (n + 1) * pl];
                let dst = &mut out[n * out_len + o * pl..n * out_len + (o + 1) * pl];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        out
    }

    /// Returns `(dx, dw, db)`; each only when requested.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        want: (bool, bool, bool),
    ) -> ConvGrads {
        let (kl, pl) = (self.patch_len(), self.positions());
        let in_len = self.in_ch * self.height * self.width;
        let out_len = self.out_ch * pl;
        let cols_n = self.batch * pl;
        // dout rearranged to [out_ch, batch · positions].
        let mut g = vec![0.0; self.out_ch * cols_n];
        for n in 0..self.batch {
            for o in 0..self.out_ch {
                g[o * cols_n + n * pl..o * cols_n + (n + 1) * pl]
                    .copy_from_slice(&dout[n * out_len + o * pl..n * out_len + (o + 1) * pl]);
            }
        }
        let idx = (want.0 || want.1).then(|| self.gather_index());
        let dw = want.1.then(|| {
            let cols = self.im2col(x, idx.as_deref().expect("index built"));
            let mut dw = vec![0.0; self.out_ch * kl];
            gemm(self.out_ch, cols_n, kl, &g, (cols_n, 1), &cols, (1, cols_n), 0.0, &mut dw);
            dw
        });
        let dx = want.0.then(|| {
            let mut dcols = vec![0.0; kl * cols_n];
            gemm(kl, self.out_ch, cols_n, w, (1, kl), &g, (cols_n, 1), 0.0, &mut dcols);
            let mut dx = vec![0.0; self.batch * in_len];
            self.col2im(&dcols, idx.as_deref().expect("index built"), &mut dx);
            dx
        });
        let db = want.2.then(|| (0..self.out_ch).map(|o| g[o * cols_n..(o + 1) * cols_n].iter().sum()).collect());
        (dx, dw, db)
    }
}

/// Numpy-style broadcast of two shapes.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    pub trivial: bool,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - shape.len()];
    s.extend_from_slice(shape);
    s
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_strides: Vec::new(),
                b_strides: Vec::new(),
                trivial: true,
            });
        }
        let rank = a.len().max(b.len());
        let (pa, pb) = (padded(a, rank), padded(b, rank));
        let mut out = Vec::with_capacity(rank);
        for (&da, &db) in pa.iter().zip(&pb) {
            out.push(match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
                }
            });
        }
        let stride_for = |p: &[usize]| {
            let base = contiguous_strides(p);
            p.iter()
                .zip(base)
                .map(|(&d, s)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: stride_for(&pa),
            b_strides: stride_for(&pb),
            out_shape: out,
            trivial: false,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        if self.trivial {
            (0..n).for_each(|i| f(i, i, i));
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
