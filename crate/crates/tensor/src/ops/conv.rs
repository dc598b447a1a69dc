//! 2-D cross-correlation over channels-last maps.

use crate::{Result, Tape, Tensor, TensorError, Var};

impl Tape {
    /// Convolution (cross-correlation, zero-padded) of `x: [H, W, Cin]` with
    /// `w: [kh, kw, Cin, Cout]` and optional bias `[Cout]`. Output extent per
    /// axis is `(len + 2*pad - k) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.owned("conv2d", &[x, w])?;
        if let Some(b) = bias {
            self.owned("conv2d", &[b])?;
        }
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.rank() != 3 || wt.rank() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", xt.shape(), wt.shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        let (h, wd, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (kh, kw, kcin, cout) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if kcin != cin {
            return Err(TensorError::shape("conv2d", format!("kernel expects {} input channels, map has {}", kcin, cin)));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {}x{} does not fit padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [cout] {
                return Err(TensorError::shape("conv2d", format!("bias {:?} for {} outputs", bt.shape(), cout)));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let xs = xt.data();
        let ws = wt.data();
        let mut data = vec![0.0f32; oh * ow * cout];
        let mut acc = vec![0.0f32; cout];
        for oy in 0..oh {
            for ox in 0..ow {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = (iy as usize * wd + ix as usize) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &ws[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (a, wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                let obase = (oy * ow + ox) * cout;
                if let Some(b) = bias {
                    let bs = self.value(b).data();
                    for co in 0..cout {
                        data[obase + co] = acc[co] + bs[co];
                    }
                } else {
                    data[obase..obase + cout].copy_from_slice(&acc);
                }
            }
        }
        let out = Tensor::new(&[oh, ow, cout], data)?;

        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push("conv2d", &inputs, out, move |bp| {
            if let Some(b) = bias {
                if bp.needs(b) {
                    let g = bp.out_grad();
                    let mut db = vec![0.0f32; cout];
                    for p in 0..oh * ow {
                        for co in 0..cout {
                            db[co] += g[p * cout + co];
                        }
                    }
                    bp.add_grad(b, &db);
                }
            }
            let (vals, g, mut bufs) = bp.split();
            let xs = vals.get(x).data();
            let ws = vals.get(w).data();
            let (dx, dw) = bufs.get2(x, w);
            let (mut dx, mut dw) = (dx, dw);
            if dx.is_none() && dw.is_none() {
                return;
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = (iy as usize * wd + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let wrow = &ws[wbase + ci * cout..wbase + (ci + 1) * cout];
                                if let Some(dw) = dw.as_deref_mut() {
                                    let xv = xs[xbase + ci];
                                    if xv != 0.0 {
                                        let dwrow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        for (d, gv) in dwrow.iter_mut().zip(grow) {
                                            *d += xv * gv;
                                        }
                                    }
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    let mut acc = 0.0f32;
                                    for (wv, gv) in wrow.iter().zip(grow) {
                                        acc += wv * gv;
                                    }
                                    dx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        })
    }
}
