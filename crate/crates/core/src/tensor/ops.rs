// Forward/backward kernels over raw NHWC buffers.

use super::{Real, Shape};

pub(crate) fn bcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let sd = s.dims();
    let od = out.dims();
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if sd[d] == od[d] { st[d] } else { 0 };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` over every output coordinate.
pub(crate) fn for_each_bcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out.n {
        for h in 0..out.h {
            for w in 0..out.w {
                let ia = n * sa[0] + h * sa[1] + w * sa[2];
                let ib = n * sb[0] + h * sb[1] + w * sb[2];
                for c in 0..out.c {
                    f(o, ia + c * sa[3], ib + c * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Geometry of a "same"-padded convolution evaluated on the padded grid.
///
/// The input is zero-padded once; each kernel tap `(dy, dx)` is then a
/// single GEMM between a row-shifted view of the padded input and the
/// `cin×cout` slice of the kernel. Rows that wrap across image borders only
/// land on padded output positions, which are cropped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub s: Shape,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvGeom {
    fn padded(&self) -> (usize, usize, usize, usize) {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        (ph, pw, self.s.h + 2 * ph, self.s.w + 2 * pw)
    }

    fn rows(&self) -> usize {
        let (_, _, hp, wp) = self.padded();
        self.s.n * hp * wp
    }

    /// `(row range, shift)` for kernel tap `(dy, dx)` over padded rows.
    fn tap(&self, dy: usize, dx: usize) -> (usize, usize, isize) {
        let (ph, pw, _, wp) = self.padded();
        let off = (dy as isize - ph as isize) * wp as isize + (dx as isize - pw as isize);
        let m = self.rows() as isize;
        let lo = (-off).max(0);
        let hi = (m - off).min(m);
        (lo as usize, hi.max(lo) as usize, off)
    }

    pub fn pad_input<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (ph, pw, hp, wp) = self.padded();
        let c = self.s.c;
        let mut xp = vec![T::zero(); self.rows() * c];
        for b in 0..self.s.n {
            for y in 0..self.s.h {
                let src = self.s.index(b, y, 0, 0);
                let dst = ((b * hp + y + ph) * wp + pw) * c;
                xp[dst..dst + self.s.w * c].copy_from_slice(&x[src..src + self.s.w * c]);
            }
        }
        xp
    }

    /// Output values (without bias) given the padded input.
    pub fn forward<T: Real>(&self, xp: &[T], kernel: &[T], out: &mut [T]) {
        let (ph, pw, hp, wp) = self.padded();
        let (cin, cout) = (self.s.c, self.cout);
        let mut outp = vec![T::zero(); self.rows() * cout];
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (lo, hi, off) = self.tap(dy, dx);
                let k = &kernel[(dy * self.kw + dx) * cin * cout..][..cin * cout];
                let a = &xp[((lo as isize + off) as usize) * cin..];
                T::gemm_acc(hi - lo, cin, cout, a, cin as isize, 1, k, cout as isize, 1, &mut outp[lo * cout..], cout as isize, 1);
            }
        }
        for b in 0..self.s.n {
            for y in 0..self.s.h {
                let src = ((b * hp + y + ph) * wp + pw) * cout;
                let dst = (b * self.s.h + y) * self.s.w * cout;
                for (o, &v) in out[dst..dst + self.s.w * cout].iter_mut().zip(&outp[src..src + self.s.w * cout]) {
                    *o = *o + v;
                }
            }
        }
    }

    /// Upstream gradient scattered onto the padded output grid.
    pub fn pad_grad<T: Real>(&self, g: &[T]) -> Vec<T> {
        let (ph, pw, hp, wp) = self.padded();
        let cout = self.cout;
        let mut gp = vec![T::zero(); self.rows() * cout];
        for b in 0..self.s.n {
            for y in 0..self.s.h {
                let dst = ((b * hp + y + ph) * wp + pw) * cout;
                let src = (b * self.s.h + y) * self.s.w * cout;
                gp[dst..dst + self.s.w * cout].copy_from_slice(&g[src..src + self.s.w * cout]);
            }
        }
        gp
    }

    pub fn kernel_grad<T: Real>(&self, xp: &[T], gp: &[T], dk: &mut [T]) {
        let (cin, cout) = (self.s.c, self.cout);
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (lo, hi, off) = self.tap(dy, dx);
                let a = &xp[((lo as isize + off) as usize) * cin..];
                let dkt = &mut dk[(dy * self.kw + dx) * cin * cout..][..cin * cout];
                T::gemm_acc(cin, hi - lo, cout, a, 1, cin as isize, &gp[lo * cout..], cout as isize, 1, dkt, cout as isize, 1);
            }
        }
    }

    pub fn input_grad<T: Real>(&self, gp: &[T], kernel: &[T], dx_out: &mut [T]) {
        let (ph, pw, hp, wp) = self.padded();
        let (cin, cout) = (self.s.c, self.cout);
        let mut dxp = vec![T::zero(); self.rows() * cin];
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (lo, hi, off) = self.tap(dy, dx);
                let k = &kernel[(dy * self.kw + dx) * cin * cout..][..cin * cout];
                let c = &mut dxp[((lo as isize + off) as usize) * cin..];
                T::gemm_acc(hi - lo, cout, cin, &gp[lo * cout..], cout as isize, 1, k, 1, cout as isize, c, cin as isize, 1);
            }
        }
        for b in 0..self.s.n {
            for y in 0..self.s.h {
                let src = ((b * hp + y + ph) * wp + pw) * cin;
                let dst = self.s.index(b, y, 0, 0);
                for (d, &v) in dx_out[dst..dst + self.s.w * cin].iter_mut().zip(&dxp[src..src + self.s.w * cin]) {
                    *d = *d + v;
                }
            }
        }
    }
}

/// Max over non-overlapping `p×p` windows. Returns values and the flat input
/// index of each winner (first maximum in row-major scan order).
pub(crate) fn maxpool_forward<T: Real>(x: &[T], s: Shape, p: usize) -> (Vec<T>, Vec<u32>) {
    let out = Shape::new(s.n, s.h / p, s.w / p, s.c);
    let mut vals = Vec::with_capacity(out.numel());
    let mut idx = Vec::with_capacity(out.numel());
    for b in 0..out.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                for c in 0..out.c {
                    let mut best_i = s.index(b, y * p, xx * p, c);
                    let mut best = x[best_i];
                    for dy in 0..p {
                        for dx in 0..p {
                            let i = s.index(b, y * p + dy, xx * p + dx, c);
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (vals, idx)
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], s: Shape, f: usize) -> Vec<T> {
    let out = Shape::new(s.n, s.h * f, s.w * f, s.c);
    let mut v = Vec::with_capacity(out.numel());
    for b in 0..out.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let src = s.index(b, y / f, xx / f, 0);
                v.extend_from_slice(&x[src..src + s.c]);
            }
        }
    }
    v
}

pub(crate) fn upsample_backward_acc<T: Real>(g: &[T], s: Shape, f: usize, dx: &mut [T]) {
    let out = Shape::new(s.n, s.h * f, s.w * f, s.c);
    let mut o = 0;
    for b in 0..out.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let dst = s.index(b, y / f, xx / f, 0);
                for c in 0..s.c {
                    dx[dst + c] = dx[dst + c] + g[o];
                    o += 1;
                }
            }
        }
    }
}
