//! Forward ops and their backward closures. Reductions accumulate in f64
//! (fixed order, so results stay bit-deterministic) while storage is f32.

use crate::{Result, Tape, Tensor, TensorError, Var};

mod conv;
mod sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    fn unary_op(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f32) -> f32,
        // derivative as a function of (input, output)
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        self.owned(op, &[x])?;
        let xt = self.value(x);
        let out = Tensor::new(xt.shape(), xt.data().iter().map(|&v| f(v)).collect())?;
        self.push(op, &[x], out, move |bp| {
            let xs = bp.val(x).data();
            let ys = bp.out_val().data();
            let contrib: Vec<f32> =
                bp.out_grad().iter().zip(xs.iter().zip(ys)).map(|(&g, (&xv, &yv))| g * df(xv, yv)).collect();
            bp.add_grad(x, &contrib);
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_op("relu", x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_op(
            "sigmoid",
            x,
            |v| {
                // Branch keeps exp() off large positive arguments.
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, yv| yv * (1.0 - yv),
        )
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary_op("abs", x, f32::abs, |xv, _| {
            if xv > 0.0 {
                1.0
            } else if xv < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Wraps angles to (-pi, pi]. Derivative is 1 almost everywhere (the
    /// wrap is a piecewise-constant shift).
    pub fn wrap_angle(&mut self, x: Var) -> Result<Var> {
        self.unary_op("wrap_angle", x, wrap_angle_f32, |_, _| 1.0)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        self.unary_op("scale", x, move |v| v * k, move |_, _| k)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("add", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("add", at, bt)?;
        let out = Tensor::new(at.shape(), at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect())?;
        self.push("add", &[a, b], out, move |bp| {
            let g = bp.out_grad().to_vec();
            bp.add_grad(a, &g);
            bp.add_grad(b, &g);
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("sub", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("sub", at, bt)?;
        let out = Tensor::new(at.shape(), at.data().iter().zip(bt.data()).map(|(x, y)| x - y).collect())?;
        self.push("sub", &[a, b], out, move |bp| {
            bp.add_grad(a, &bp.out_grad().to_vec());
            let neg: Vec<f32> = bp.out_grad().iter().map(|g| -g).collect();
            bp.add_grad(b, &neg);
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("mul", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("mul", at, bt)?;
        let out = Tensor::new(at.shape(), at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect())?;
        self.push("mul", &[a, b], out, move |bp| {
            let da: Vec<f32> = bp.out_grad().iter().zip(bp.val(b).data()).map(|(g, y)| g * y).collect();
            bp.add_grad(a, &da);
            let db: Vec<f32> = bp.out_grad().iter().zip(bp.val(a).data()).map(|(g, x)| g * x).collect();
            bp.add_grad(b, &db);
        })
    }

    /// Elementwise `atan2(y, x)` in (-pi, pi]. The gradient denominator is
    /// floored to avoid the 0/0 singularity at the origin.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.owned("atan2", &[y, x])?;
        let (yt, xt) = (self.value(y), self.value(x));
        same_shape("atan2", yt, xt)?;
        let out = Tensor::new(yt.shape(), yt.data().iter().zip(xt.data()).map(|(a, b)| a.atan2(*b)).collect())?;
        self.push("atan2", &[y, x], out, move |bp| {
            let ys = bp.val(y).data();
            let xs = bp.val(x).data();
            let g = bp.out_grad();
            let mut dy = vec![0.0f32; ys.len()];
            let mut dx = vec![0.0f32; xs.len()];
            for i in 0..ys.len() {
                let denom = (ys[i] * ys[i] + xs[i] * xs[i]).max(1e-12);
                dy[i] = g[i] * xs[i] / denom;
                dx[i] = -g[i] * ys[i] / denom;
            }
            bp.add_grad(y, &dy);
            bp.add_grad(x, &dx);
        })
    }

    /// `a + b` with `b` broadcast over all leading axes of `a`
    /// (`b.shape() == [a.last_dim]`): the bias-add pattern.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("add_channel", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        let c = channel_broadcast("add_channel", at, bt)?;
        let out = Tensor::new(
            at.shape(),
            at.data().iter().enumerate().map(|(i, x)| x + bt.data()[i % c]).collect(),
        )?;
        self.push("add_channel", &[a, b], out, move |bp| {
            bp.add_grad(a, &bp.out_grad().to_vec());
            let mut db = vec![0.0f32; c];
            for (i, g) in bp.out_grad().iter().enumerate() {
                db[i % c] += g;
            }
            bp.add_grad(b, &db);
        })
    }

    /// `a * b` with `b` broadcast over all leading axes of `a`: the
    /// channel-gating pattern.
    pub fn mul_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("mul_channel", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        let c = channel_broadcast("mul_channel", at, bt)?;
        let out = Tensor::new(
            at.shape(),
            at.data().iter().enumerate().map(|(i, x)| x * bt.data()[i % c]).collect(),
        )?;
        self.push("mul_channel", &[a, b], out, move |bp| {
            let bs = bp.val(b).data();
            let da: Vec<f32> = bp.out_grad().iter().enumerate().map(|(i, g)| g * bs[i % c]).collect();
            bp.add_grad(a, &da);
            let xs = bp.val(a).data();
            let mut db = vec![0.0f32; c];
            for (i, g) in bp.out_grad().iter().enumerate() {
                db[i % c] += g * xs[i];
            }
            bp.add_grad(b, &db);
        })
    }

    /// Matrix product of 2-D tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.owned("matmul", &[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", at.shape(), bt.shape())));
        }
        let (m, k) = (at.shape()[0], at.shape()[1]);
        let (k2, n) = (bt.shape()[0], bt.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let out = Tensor::new(&[m, n], mm(at.data(), bt.data(), m, k, n))?;
        self.push("matmul", &[a, b], out, move |bp| {
            let g = bp.out_grad();
            if bp.needs(a) {
                // dA = g . B^T
                let da = mm_nt(g, bp.val(b).data(), m, n, k);
                bp.add_grad(a, &da);
            }
            if bp.needs(b) {
                // dB = A^T . g
                let db = mm_tn(bp.val(a).data(), g, m, k, n);
                bp.add_grad(b, &db);
            }
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.owned("transpose", &[x])?;
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(TensorError::shape("transpose", format!("{:?}", xt.shape())));
        }
        let (m, n) = (xt.shape()[0], xt.shape()[1]);
        let out = Tensor::new(&[n, m], transpose_raw(xt.data(), m, n))?;
        self.push("transpose", &[x], out, move |bp| {
            let dx = transpose_raw(bp.out_grad(), n, m);
            bp.add_grad(x, &dx);
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.owned("reshape", &[x])?;
        let out = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", &[x], out, move |bp| {
            bp.add_grad(x, &bp.out_grad().to_vec());
        })
    }

    /// Concatenation along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        self.owned("concat_last", parts)?;
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_last", "no inputs"));
        }
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[..t.rank() - 1] != lead[..] {
                return Err(TensorError::shape(
                    "concat_last",
                    format!("{:?} vs leading {:?}", t.shape(), lead),
                ));
            }
            chans.push(*t.shape().last().unwrap());
        }
        let total: usize = chans.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead.clone();
        shape.push(total);
        let mut data = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&chans) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let out = Tensor::new(&shape, data)?;
        let parts_owned = parts.to_vec();
        self.push("concat_last", parts, out, move |bp| {
            let g = bp.out_grad();
            let mut offset = 0;
            for (&p, &c) in parts_owned.iter().zip(&chans) {
                let mut dp = vec![0.0f32; rows * c];
                for r in 0..rows {
                    dp[r * c..(r + 1) * c].copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                bp.add_grad(p, &dp);
                offset += c;
            }
        })
    }

    /// Slice `len` channels starting at `start` along the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.owned("narrow_last", &[x])?;
        let xt = self.value(x);
        let rank = xt.rank();
        if rank == 0 {
            return Err(TensorError::shape("narrow_last", "rank-0 input"));
        }
        let c = xt.shape()[rank - 1];
        if start + len > c || len == 0 {
            return Err(TensorError::invalid(
                "narrow_last",
                format!("slice {}..{} out of {} channels", start, start + len, c),
            ));
        }
        let rows = xt.numel() / c;
        let mut shape = xt.shape().to_vec();
        shape[rank - 1] = len;
        let src = xt.data();
        let mut data = vec![0.0f32; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push("narrow_last", &[x], out, move |bp| {
            let g = bp.out_grad();
            let mut dx = vec![0.0f32; rows * c];
            for r in 0..rows {
                dx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            bp.add_grad(x, &dx);
        })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.owned("softmax", &[x])?;
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: xt.rank() });
        }
        let shape = xt.shape().to_vec();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = xt.data();
        let mut data = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut maxv = f32::NEG_INFINITY;
                for j in 0..n {
                    maxv = maxv.max(src[base + j * inner]);
                }
                let mut sum = 0.0f64;
                for j in 0..n {
                    let e = (src[base + j * inner] - maxv).exp();
                    data[base + j * inner] = e;
                    sum += e as f64;
                }
                let inv = (1.0 / sum) as f32;
                for j in 0..n {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push("softmax", &[x], out, move |bp| {
            let y = bp.out_val().data();
            let g = bp.out_grad();
            let mut dx = vec![0.0f32; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        let idx = base + j * inner;
                        dot += (g[idx] * y[idx]) as f64;
                    }
                    for j in 0..n {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (g[idx] - dot as f32);
                    }
                }
            }
            bp.add_grad(x, &dx);
        })
    }

    /// Layer normalisation over the last axis with learnable gain/bias.
    /// Uses the population variance (divide by C).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.owned("layer_norm", &[x, gamma, beta])?;
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let rank = xt.rank();
        if rank == 0 {
            return Err(TensorError::shape("layer_norm", "rank-0 input"));
        }
        let c = xt.shape()[rank - 1];
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gain/bias {:?}/{:?} for {} channels", gt.shape(), bt.shape(), c),
            ));
        }
        let rows = xt.numel() / c;
        let src = xt.data();
        let (gs, bs) = (gt.data(), bt.data());
        let mut data = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let (mean, inv) = row_stats(row, eps);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                data[r * c + j] = gs[j] * xhat + bs[j];
            }
        }
        let out = Tensor::new(xt.shape(), data)?;
        self.push("layer_norm", &[x, gamma, beta], out, move |bp| {
            let src = bp.val(x).data();
            let gs = bp.val(gamma).data();
            let g = bp.out_grad();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; src.len()];
            for r in 0..rows {
                let row = &src[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let (mean, inv) = row_stats(row, eps);
                // h = dL/dxhat; dx = inv * (h - mean(h) - xhat * mean(h*xhat))
                let mut mean_h = 0.0f64;
                let mut mean_hx = 0.0f64;
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv;
                    let h = grow[j] * gs[j];
                    dgamma[j] += grow[j] * xhat;
                    dbeta[j] += grow[j];
                    mean_h += h as f64;
                    mean_hx += (h * xhat) as f64;
                }
                let mean_h = (mean_h / c as f64) as f32;
                let mean_hx = (mean_hx / c as f64) as f32;
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv;
                    let h = grow[j] * gs[j];
                    dx[r * c + j] = inv * (h - mean_h - xhat * mean_hx);
                }
            }
            bp.add_grad(x, &dx);
            bp.add_grad(gamma, &dgamma);
            bp.add_grad(beta, &dbeta);
        })
    }

    /// Global spatial pooling of an `[H, W, C]` map down to `[1, 1, C]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        self.owned("global_pool", &[x])?;
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(TensorError::shape("global_pool", format!("{:?}", xt.shape())));
        }
        let (h, w, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let hw = h * w;
        let src = xt.data();
        let mut data = vec![0.0f32; c];
        match kind {
            PoolKind::Avg => {
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for p in 0..hw {
                        sum += src[p * c + ch] as f64;
                    }
                    data[ch] = (sum / hw as f64) as f32;
                }
            }
            PoolKind::Max => {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for p in 0..hw {
                        best = best.max(src[p * c + ch]);
                    }
                    data[ch] = best;
                }
            }
        }
        let out = Tensor::new(&[1, 1, c], data)?;
        self.push("global_pool", &[x], out, move |bp| {
            let g = bp.out_grad();
            let src = bp.val(x).data();
            let mut dx = vec![0.0f32; src.len()];
            match kind {
                PoolKind::Avg => {
                    let inv = 1.0 / hw as f32;
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[p * c + ch] = g[ch] * inv;
                        }
                    }
                }
                PoolKind::Max => {
                    // Route to the first argmax: deterministic tie-break.
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut arg = 0;
                        for p in 0..hw {
                            if src[p * c + ch] > best {
                                best = src[p * c + ch];
                                arg = p;
                            }
                        }
                        dx[arg * c + ch] = g[ch];
                    }
                }
            }
            bp.add_grad(x, &dx);
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.owned("sum_all", &[x])?;
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(total as f32);
        let numel = self.value(x).numel();
        self.push("sum_all", &[x], out, move |bp| {
            let g = bp.out_grad()[0];
            bp.add_grad(x, &vec![g; numel]);
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.owned("mean_all", &[x])?;
        let numel = self.value(x).numel();
        if numel == 0 {
            return Err(TensorError::invalid("mean_all", "empty tensor"));
        }
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((total / numel as f64) as f32);
        self.push("mean_all", &[x], out, move |bp| {
            let g = bp.out_grad()[0] / numel as f32;
            bp.add_grad(x, &vec![g; numel]);
        })
    }

    /// Column means of an `[N, M]` matrix: output `[M]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.owned("mean_rows", &[x])?;
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(TensorError::shape("mean_rows", format!("{:?}", xt.shape())));
        }
        let (n, m) = (xt.shape()[0], xt.shape()[1]);
        let src = xt.data();
        let mut data = vec![0.0f32; m];
        for j in 0..m {
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += src[i * m + j] as f64;
            }
            data[j] = (sum / n as f64) as f32;
        }
        let out = Tensor::new(&[m], data)?;
        self.push("mean_rows", &[x], out, move |bp| {
            let g = bp.out_grad();
            let inv = 1.0 / n as f32;
            let mut dx = vec![0.0f32; n * m];
            for i in 0..n {
                for j in 0..m {
                    dx[i * m + j] = g[j] * inv;
                }
            }
            bp.add_grad(x, &dx);
        })
    }
}

fn channel_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let rank = a.rank();
    if rank == 0 || b.rank() != 1 || b.shape()[0] != a.shape()[rank - 1] {
        return Err(TensorError::shape(
            op,
            format!("cannot broadcast {:?} over last axis of {:?}", b.shape(), a.shape()),
        ));
    }
    Ok(b.shape()[0])
}

fn row_stats(row: &[f32], eps: f32) -> (f32, f32) {
    let c = row.len();
    let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32;
    let var = (row.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>() / c as f64) as f32;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn wrap_angle_f32(x: f32) -> f32 {
    let tau = std::f32::consts::TAU;
    let mut r = x % tau;
    if r > std::f32::consts::PI {
        r -= tau;
    } else if r <= -std::f32::consts::PI {
        r += tau;
    }
    r
}

/// `a[m,k] . b[k,n]`, accumulating along rows of `b` for cache locality.
pub(crate) fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m,n] . b[k,n]^T -> [m,k]` (dot products of rows).
fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// `a[m,k]^T . b[m,n] -> [k,n]`.
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
