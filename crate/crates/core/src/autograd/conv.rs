//! 2-D convolution kernels (im2col + GEMM), tiled over output positions so the
//! column buffer stays bounded for large feature maps.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer entries per tile.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < k || wp < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (hp - k) / stride + 1,
            w_out: (wp - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn tile(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, self.positions().max(1))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, p0: usize, p1: usize, col: &mut [T]) {
    let width = p1 - p0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * width..(row + 1) * width];
                for (j, p) in (p0..p1).enumerate() {
                    let oy = p / g.w_out;
                    let ox = p % g.w_out;
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    dst[j] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, p0: usize, p1: usize, dx: &mut [T]) {
    let width = p1 - p0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * width..(row + 1) * width];
                for (j, p) in (p0..p1).enumerate() {
                    let oy = p / g.w_out;
                    let ox = p % g.w_out;
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize] += src[j];
                    }
                }
            }
        }
    }
}

/// `x: [N, C_in, H, W]`, `w: [C_out, C_in, K, K]`, `b: [C_out]`.
pub fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let (n, _, _, _) = x.dims4();
    let c_out = w.shape()[0];
    let rows = g.rows();
    let positions = g.positions();
    let tile = g.tile();
    let mut out = Tensor::zeros(&[n, c_out, g.h_out, g.w_out]);
    let mut col = vec![T::zero(); rows * tile];
    let in_len = g.c_in * g.h * g.w;
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let ys = &mut out.data_mut()[s * c_out * positions..(s + 1) * c_out * positions];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + tile).min(positions);
            let width = p1 - p0;
            im2col(xs, g, p0, p1, &mut col[..rows * width]);
            gemm(
                T::one(),
                MatRef::row_major(w.data(), c_out, rows),
                MatRef::row_major(&col[..rows * width], rows, width),
                T::zero(),
                &mut ys[p0..],
                positions,
            );
            p0 = p1;
        }
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut ys[co * positions..(co + 1) * positions] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, _, _, _) = x.dims4();
    let c_out = w.shape()[0];
    let rows = g.rows();
    let positions = g.positions();
    let tile = g.tile();
    let in_len = g.c_in * g.h * g.w;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let db = need_db.then(|| {
        let mut db = Tensor::zeros(&[c_out]);
        for s in 0..n {
            for co in 0..c_out {
                let off = (s * c_out + co) * positions;
                db.data_mut()[co] += dy.data()[off..off + positions].iter().copied().sum();
            }
        }
        db
    });
    if need_dx || need_dw {
        let mut col = vec![T::zero(); rows * tile];
        for s in 0..n {
            let dys = &dy.data()[s * c_out * positions..(s + 1) * c_out * positions];
            let mut p0 = 0;
            while p0 < positions {
                let p1 = (p0 + tile).min(positions);
                let width = p1 - p0;
                let dy_tile = MatRef::strided(&dys[p0..], c_out, width, positions);
                if let Some(dw) = dw.as_mut() {
                    let xs = &x.data()[s * in_len..(s + 1) * in_len];
                    im2col(xs, g, p0, p1, &mut col[..rows * width]);
                    gemm(
                        T::one(),
                        dy_tile,
                        MatRef::row_major(&col[..rows * width], rows, width).t(),
                        T::one(),
                        dw.data_mut(),
                        rows,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        T::one(),
                        MatRef::row_major(w.data(), c_out, rows).t(),
                        dy_tile,
                        T::zero(),
                        &mut col[..rows * width],
                        width,
                    );
                    let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                    col2im(&col[..rows * width], g, p0, p1, dxs);
                }
                p0 = p1;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (n, _, _, _) = x.dims4();
        let c_out = w.shape()[0];
        let mut out = Tensor::zeros(&[n, c_out, g.h_out, g.w_out]);
        for s in 0..n {
            for co in 0..c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w.data()[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (4, 1, 1), (9, 1, 4)] {
            let x = Tensor::<f64>::randn(&[2, 3, 11, 9], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[5, 3, k, k], 1.0, &mut rng);
            let g = ConvGeom::new(3, 11, 9, k, stride, pad).unwrap();
            let got = forward(&x, &w, None, &g);
            let want = naive(&x, &w, &g);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={stride}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> must equal <dx, x> and <dw, w> (bilinearity).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 2, 7, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let g = ConvGeom::new(2, 7, 6, 3, 2, 1).unwrap();
        let y = forward(&x, &w, None, &g);
        let dy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let grads = backward(&x, &w, &dy, &g, true, true, true);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&dy, &y);
        assert!((lhs - dot(&grads.dx.unwrap(), &x)).abs() < 1e-9);
        assert!((lhs - dot(&grads.dw.unwrap(), &w)).abs() < 1e-9);
        assert!((grads.db.unwrap().sum() - dy.sum()).abs() < 1e-9);
    }
}
