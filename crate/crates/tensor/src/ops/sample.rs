//! Bilinear map sampling, differentiable in both the map and the
//! sampling coordinates.

use crate::{Result, Tape, Tensor, TensorError, Var};

/// Interpolation footprint of one (possibly clamped) 2-D sample point.
struct Taps {
    i0: usize,
    j0: usize,
    du: f32,
    dv: f32,
    // Zero when the raw coordinate was outside the map: the clamp makes
    // the output constant there, so no gradient flows to that coordinate.
    active_u: f32,
    active_v: f32,
}

fn taps(u: f32, v: f32, h: usize, w: usize) -> Taps {
    let max_u = (h - 1) as f32;
    let max_v = (w - 1) as f32;
    let cu = u.clamp(0.0, max_u);
    let cv = v.clamp(0.0, max_v);
    let i0 = if h >= 2 { (cu.floor() as usize).min(h - 2) } else { 0 };
    let j0 = if w >= 2 { (cv.floor() as usize).min(w - 2) } else { 0 };
    Taps {
        i0,
        j0,
        du: if h >= 2 { cu - i0 as f32 } else { 0.0 },
        dv: if w >= 2 { cv - j0 as f32 } else { 0.0 },
        active_u: if (0.0..=max_u).contains(&u) && h >= 2 { 1.0 } else { 0.0 },
        active_v: if (0.0..=max_v).contains(&v) && w >= 2 { 1.0 } else { 0.0 },
    }
}

impl Tape {
    /// Samples `f: [H, W, C]` at `coords: [P, 2]` (row, col in cell units),
    /// border-clamped, producing `[P, C]`. Gradients flow to both `f` and
    /// `coords`.
    pub fn bilinear_sample(&mut self, f: Var, coords: Var) -> Result<Var> {
        self.owned("bilinear_sample", &[f, coords])?;
        let (ft, ct) = (self.value(f), self.value(coords));
        if ft.rank() != 3 {
            return Err(TensorError::shape("bilinear_sample", format!("map {:?}", ft.shape())));
        }
        if ct.rank() != 2 || ct.shape()[1] != 2 {
            return Err(TensorError::shape("bilinear_sample", format!("coords {:?}", ct.shape())));
        }
        let (h, w, c) = (ft.shape()[0], ft.shape()[1], ft.shape()[2]);
        if h == 0 || w == 0 {
            return Err(TensorError::invalid("bilinear_sample", "empty map"));
        }
        let p = ct.shape()[0];
        let fs = ft.data();
        let cs = ct.data();
        let mut data = vec![0.0f32; p * c];
        for r in 0..p {
            let t = taps(cs[2 * r], cs[2 * r + 1], h, w);
            let base00 = (t.i0 * w + t.j0) * c;
            let base01 = base00 + if w >= 2 { c } else { 0 };
            let base10 = base00 + if h >= 2 { w * c } else { 0 };
            let base11 = base10 + if w >= 2 { c } else { 0 };
            let (w00, w01) = ((1.0 - t.du) * (1.0 - t.dv), (1.0 - t.du) * t.dv);
            let (w10, w11) = (t.du * (1.0 - t.dv), t.du * t.dv);
            for ch in 0..c {
                data[r * c + ch] = w00 * fs[base00 + ch]
                    + w01 * fs[base01 + ch]
                    + w10 * fs[base10 + ch]
                    + w11 * fs[base11 + ch];
            }
        }
        let out = Tensor::new(&[p, c], data)?;
        self.push("bilinear_sample", &[f, coords], out, move |bp| {
            let (vals, g, mut bufs) = bp.split();
            let fs = vals.get(f).data();
            let cs = vals.get(coords).data();
            if let Some(df) = bufs.get(f) {
                for r in 0..p {
                    let t = taps(cs[2 * r], cs[2 * r + 1], h, w);
                    let base00 = (t.i0 * w + t.j0) * c;
                    let base01 = base00 + if w >= 2 { c } else { 0 };
                    let base10 = base00 + if h >= 2 { w * c } else { 0 };
                    let base11 = base10 + if w >= 2 { c } else { 0 };
                    let (w00, w01) = ((1.0 - t.du) * (1.0 - t.dv), (1.0 - t.du) * t.dv);
                    let (w10, w11) = (t.du * (1.0 - t.dv), t.du * t.dv);
                    for ch in 0..c {
                        let gv = g[r * c + ch];
                        df[base00 + ch] += w00 * gv;
                        df[base01 + ch] += w01 * gv;
                        df[base10 + ch] += w10 * gv;
                        df[base11 + ch] += w11 * gv;
                    }
                }
            }
            if let Some(dc) = bufs.get(coords) {
                for r in 0..p {
                    let t = taps(cs[2 * r], cs[2 * r + 1], h, w);
                    let base00 = (t.i0 * w + t.j0) * c;
                    let base01 = base00 + if w >= 2 { c } else { 0 };
                    let base10 = base00 + if h >= 2 { w * c } else { 0 };
                    let base11 = base10 + if w >= 2 { c } else { 0 };
                    let mut gu = 0.0f32;
                    let mut gv_acc = 0.0f32;
                    for ch in 0..c {
                        let gv = g[r * c + ch];
                        // d/du at fixed dv, and vice versa
                        gu += gv
                            * ((1.0 - t.dv) * (fs[base10 + ch] - fs[base00 + ch])
                                + t.dv * (fs[base11 + ch] - fs[base01 + ch]));
                        gv_acc += gv
                            * ((1.0 - t.du) * (fs[base01 + ch] - fs[base00 + ch])
                                + t.du * (fs[base11 + ch] - fs[base10 + ch]));
                    }
                    dc[2 * r] += gu * t.active_u;
                    dc[2 * r + 1] += gv_acc * t.active_v;
                }
            }
        })
    }
}
