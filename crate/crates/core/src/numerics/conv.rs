use super::element::{gemm, Element, Mat};
use super::graph::{Graph, Var};
use super::tensor::Shape;
use crate::error::{Error, Result};

/// Geometry of one 3D correlation, shared by forward and backward.
#[derive(Clone, Copy, Debug)]
struct Conv3dGeom {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Conv3dGeom {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Unfolds `x` into a (K, P) matrix of receptive fields.
    fn im2col<E: Element>(&self, x: &[E]) -> Vec<E> {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [ot, oh, ow] = self.output;
        let p = self.positions();
        let mut cols = vec![E::zero(); self.k() * p];
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * t * h * w..(c + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for a in 0..ot {
                            let it = (a * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for b in 0..oh {
                                let ih = (b * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let src = &xc[(it as usize * h + ih as usize) * w..][..w];
                                let d = &mut dst[(a * oh + b) * ow..][..ow];
                                for (cc, v) in d.iter_mut().enumerate() {
                                    let iw = (cc * sw + dw) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        *v = src[iw as usize];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds columns back into `dx`.
    fn col2im<E: Element>(&self, cols: &[E], dx: &mut [E]) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [ot, oh, ow] = self.output;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &mut dx[c * t * h * w..(c + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        for a in 0..ot {
                            let it = (a * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for b in 0..oh {
                                let ih = (b * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = (it as usize * h + ih as usize) * w;
                                let s = &src[(a * oh + b) * ow..][..ow];
                                for (cc, &v) in s.iter().enumerate() {
                                    let iw = (cc * sw + dw) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        xc[base + iw as usize] = xc[base + iw as usize] + v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

impl<E: Element> Graph<'_, E> {
    /// 3D cross-correlation of x (C_in, T, H, W) with w (C_out, C_in, kt, kh, kw).
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xs = self.dims(x).to_vec();
        let ws = self.dims(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input {} and weight {} must be rank 4 and 5", self.shape(x), self.shape(w)),
            ));
        }
        if xs[0] != ws[1] {
            return Err(Error::shape(
                "conv3d",
                format!("input {} has {} channels, weight {} expects {}", self.shape(x), xs[0], self.shape(w), ws[1]),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d: zero stride"));
        }
        let cout = ws[0];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = xs[a + 1] + 2 * pad[a];
            if ws[a + 2] > padded {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel {} larger than padded input {} on axis {a}", ws[a + 2], padded),
                ));
            }
            output[a] = (padded - ws[a + 2]) / stride[a] + 1;
        }
        let geom = Conv3dGeom {
            cin: xs[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad,
            output,
        };
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(Error::shape(
                    "conv3d",
                    format!("bias {} vs {cout} output channels", self.shape(b)),
                ));
            }
        }
        let (k, p) = (geom.k(), geom.positions());
        let cols = geom.im2col(self.value(x));
        let mut value = vec![E::zero(); cout * p];
        if let Some(b) = bias {
            for (r, &bv) in value.chunks_mut(p).zip(self.value(b)) {
                r.fill(bv);
            }
        }
        gemm(
            Mat::new(self.value(w), cout, k),
            Mat::new(&cols, k, p),
            &mut value,
            E::one(),
        );
        drop(cols);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let shape = Shape(vec![cout, output[0], output[1], output[2]]);
        Ok(self.push_op(shape, value, &inputs, move |ctx, grads| {
            let g = Mat::new(ctx.gout, cout, p);
            if grads.wants(w) {
                let cols = geom.im2col(ctx.val(x));
                let gw = grads.slot(w).expect("wanted");
                gemm(g, Mat::new(&cols, k, p).t(), gw, E::one());
            }
            if grads.wants(x) {
                let mut dcols = vec![E::zero(); k * p];
                gemm(Mat::new(ctx.val(w), cout, k).t(), g, &mut dcols, E::zero());
                let gx = grads.slot(x).expect("wanted");
                geom.col2im(&dcols, gx);
            }
            if let Some(b) = bias {
                if let Some(gb) = grads.slot(b) {
                    for (d, r) in gb.iter_mut().zip(ctx.gout.chunks(p)) {
                        *d = *d + r.iter().copied().sum();
                    }
                }
            }
        }))
    }

    /// Nearest-neighbour upsampling of (C, T, H, W) by integer factors.
    pub fn upsample_nearest3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let xs = self.dims(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample", format!("expected rank 4, got {}", self.shape(x))));
        }
        if factor.contains(&0) {
            return Err(Error::invalid("upsample: zero factor"));
        }
        let (c, t, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let [ft, fh, fw] = factor;
        let (t2, h2, w2) = (t * ft, h * fh, w * fw);
        let src = self.value(x);
        let mut value = vec![E::zero(); c * t2 * h2 * w2];
        for ci in 0..c {
            for a in 0..t2 {
                for b in 0..h2 {
                    let s = &src[((ci * t + a / ft) * h + b / fh) * w..][..w];
                    let d = &mut value[((ci * t2 + a) * h2 + b) * w2..][..w2];
                    for (j, v) in d.iter_mut().enumerate() {
                        *v = s[j / fw];
                    }
                }
            }
        }
        let shape = Shape(vec![c, t2, h2, w2]);
        Ok(self.push_op(shape, value, &[x], move |ctx, grads| {
            if let Some(gx) = grads.slot(x) {
                for ci in 0..c {
                    for a in 0..t2 {
                        for b in 0..h2 {
                            let s = &ctx.gout[((ci * t2 + a) * h2 + b) * w2..][..w2];
                            let d = &mut gx[((ci * t + a / ft) * h + b / fh) * w..][..w];
                            for (j, &v) in s.iter().enumerate() {
                                d[j / fw] = d[j / fw] + v;
                            }
                        }
                    }
                }
            }
        }))
    }
}
