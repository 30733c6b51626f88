//! 2-D convolution via im2col + gemm.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = crate::tensor::dims4(input, "conv2d")?;
        let (cout, wcin, kh, kw) = crate::tensor::dims4(weight, "conv2d")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin} (input {input:?}, weight {weight:?})"),
            ));
        }
        if bias != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bias:?} does not match {cout} output channels"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, plane) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for i in 0..g.n {
        let xi = &x[i * g.in_image()..(i + 1) * g.in_image()];
        let yi = &mut out[i * g.cout * plane..(i + 1) * g.cout * plane];
        for (co, chunk) in yi.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let b: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            k,
            plane,
            T::one(),
            weight,
            (k as isize, 1),
            b,
            (plane as isize, 1),
            T::one(),
            yi,
            (plane as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, plane) = (g.patch(), g.out_plane());
    let mut dx = want.0.then(|| vec![T::zero(); g.n * g.in_image()]);
    let mut dw = want.1.then(|| vec![T::zero(); g.cout * k]);
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for i in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (i * g.cout + co) * plane;
                *acc += dy[off..off + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); k * plane];
    for i in 0..g.n {
        let xi = &x[i * g.in_image()..(i + 1) * g.in_image()];
        let dyi = &dy[i * g.cout * plane..(i + 1) * g.cout * plane];
        if let Some(dw) = dw.as_mut() {
            let b: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                g.cout,
                plane,
                k,
                T::one(),
                dyi,
                (plane as isize, 1),
                b,
                (1, plane as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * g.in_image()..(i + 1) * g.in_image()];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::one(),
                    dxi,
                    (plane as isize, 1),
                );
            } else {
                // dcols = W^T * dY
                T::gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols,
                    (plane as isize, 1),
                );
                col2im_add(&cols, g, dxi);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
