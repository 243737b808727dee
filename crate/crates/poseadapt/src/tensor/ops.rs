//! Forward and backward rules for every differentiable op.

use super::{Tensor, MASK_NEG};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2, got {s:?}"))),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(op, format!("expected rank-3, got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>())
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.add_grad(g);
                pb.add_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.add_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.add_grad(&neg);
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
        });
        let (pa, pb) = (self.clone(), other.clone());
        let (sa, sb) = (self.to_vec(), other.to_vec());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&sb).map(|(gv, bv)| gv * bv).collect();
                pa.add_grad(&da);
                let db: Vec<f64> = g.iter().zip(&sa).map(|(gv, av)| gv * av).collect();
                pb.add_grad(&db);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect::<Vec<_>>());
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                pa.add_grad(&da);
            }),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect::<Vec<_>>());
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| pa.add_grad(g)),
        ))
    }

    /// Matrix product of rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {k} vs {k2}"),
            ));
        }
        let data = self.with_data(|a| other.with_data(|b| matmul_raw(a, b, m, k, n)));
        let (pa, pb) = (self.clone(), other.clone());
        let (sa, sb) = (self.to_vec(), other.to_vec());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    // dA = G . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &sb[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    pa.add_grad(&da);
                }
                if pb.requires_grad() {
                    // dB = A^T . G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &sa[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                    pb.add_grad(&db);
                }
            }),
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose2")?;
        let data = self.with_data(|a| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                pa.add_grad(&da);
            }),
        ))
    }

    /// Copy into a new shape with the same number of elements.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| pa.add_grad(g)),
        ))
    }

    /// Row softmax over the last axis of a rank-2 tensor, with an optional
    /// additive bias of the same shape.
    ///
    /// Bias entries equal to [`MASK_NEG`] mark hard-masked positions: they
    /// take weight exactly zero and receive no gradient. Finite bias values
    /// are added to the logits. A row whose entries are all masked is an
    /// error. The bias is treated as a constant (no gradient flows into it).
    pub fn softmax_rows(&self, bias: Option<&Tensor>) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "softmax_rows")?;
        if cols == 0 {
            return Err(Error::shape("softmax_rows", "empty rows"));
        }
        if let Some(b) = bias {
            same_shape(self, b, "softmax_rows")?;
        }
        let bias_data = bias.map(|b| b.to_vec());
        let mut out = vec![0.0; rows * cols];
        self.with_data(|x| -> Result<()> {
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                let br = bias_data.as_ref().map(|b| &b[r * cols..(r + 1) * cols]);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..cols {
                    let bj = br.map_or(0.0, |b| b[j]);
                    if bj != MASK_NEG {
                        mx = mx.max(xr[j] + bj);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(Error::AllMaskedRow { row: r });
                }
                let orow = &mut out[r * cols..(r + 1) * cols];
                let mut z = 0.0;
                for j in 0..cols {
                    let bj = br.map_or(0.0, |b| b[j]);
                    if bj != MASK_NEG {
                        let e = (xr[j] + bj - mx).exp();
                        orow[j] = e;
                        z += e;
                    }
                }
                for v in orow.iter_mut() {
                    *v /= z;
                }
            }
            Ok(())
        })?;
        let pa = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                pa.add_grad(&dx);
            }),
        ))
    }

    /// 2-D cross-correlation of `[c_in,h,w]` with kernel `[c_out,c_in,k,k]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (ci, h, w) = dims3(self, "conv2d")?;
        let (co, ci2, kh, kw) = match weight.shape() {
            [co, ci2, kh, kw] => (*co, *ci2, *kh, *kw),
            s => return Err(Error::shape("conv2d", format!("kernel rank {s:?}"))),
        };
        if ci != ci2 || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {ci} channels vs kernel {ci2}, taps {kh}x{kw}"),
            ));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel length {k} is even")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {co} output channels", b.shape()),
                ));
            }
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                "conv2d",
                format!("non-positive output extent for {h}x{w}, k={k}, pad={pad}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let x = self.to_vec();
        let wv = weight.to_vec();
        let mut out = vec![0.0; co * oh * ow];
        conv2d_raw(&x, &wv, &mut out, ci, h, w, co, k, stride, pad, oh, ow);
        if let Some(b) = bias {
            b.with_data(|bd| {
                for oc in 0..co {
                    for v in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut() {
                        *v += bd[oc];
                    }
                }
            });
        }

        let px = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![co, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let need_dx = px.requires_grad();
                let need_dw = pw.requires_grad();
                let mut dx = if need_dx { vec![0.0; ci * h * w] } else { Vec::new() };
                let mut dw = if need_dw { vec![0.0; co * ci * k * k] } else { Vec::new() };
                if need_dx || need_dw {
                    conv2d_backward(
                        &x, &wv, g, &mut dx, &mut dw, need_dx, need_dw, ci, h, w, co, k, stride,
                        pad, oh, ow,
                    );
                }
                if need_dx {
                    px.add_grad(&dx);
                }
                if need_dw {
                    pw.add_grad(&dw);
                }
                if let Some(b) = &pb {
                    if b.requires_grad() {
                        let mut db = vec![0.0; co];
                        for oc in 0..co {
                            db[oc] = g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
                        }
                        b.add_grad(&db);
                    }
                }
            }),
        ))
    }

    /// `x * sigmoid(x)` elementwise.
    pub fn silu(&self) -> Result<Tensor> {
        let x = self.to_vec();
        let data: Vec<f64> = x.iter().map(|&v| v * sigmoid(v)).collect();
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let s = sigmoid(v);
                        gv * (s * (1.0 + v * (1.0 - s)))
                    })
                    .collect();
                pa.add_grad(&da);
            }),
        ))
    }

    pub fn relu(&self) -> Result<Tensor> {
        let x = self.to_vec();
        let data: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                pa.add_grad(&da);
            }),
        ))
    }

    /// Layer normalization over the last axis of a `[t,d]` tensor with
    /// learned gain and shift of shape `[d]`.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let (t, d) = dims2(self, "layer_norm")?;
        if gain.shape() != [d] || shift.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} vs feature dim {d}",
                    gain.shape(),
                    shift.shape()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let x = self.to_vec();
        let gv = gain.to_vec();
        let sv = shift.to_vec();
        let mut out = vec![0.0; t * d];
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xr[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + sv[j];
            }
        }
        let (px, pg, ps) = (self.clone(), gain.clone(), shift.clone());
        Ok(Tensor::from_op(
            vec![t, d],
            out,
            vec![self.clone(), gain.clone(), shift.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; t * d];
                let mut dgain = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                for r in 0..t {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for j in 0..d {
                        let hj = gr[j] * gv[j];
                        mean_h += hj;
                        mean_hx += hj * xh[j];
                        dgain[j] += gr[j] * xh[j];
                        dshift[j] += gr[j];
                    }
                    mean_h /= d as f64;
                    mean_hx /= d as f64;
                    for j in 0..d {
                        let hj = gr[j] * gv[j];
                        dx[r * d + j] = inv_std[r] * (hj - mean_h - xh[j] * mean_hx);
                    }
                }
                px.add_grad(&dx);
                pg.add_grad(&dgain);
                ps.add_grad(&dshift);
            }),
        ))
    }

    /// Inverted dropout: in training, kept entries are scaled by `1/(1-p)`;
    /// outside training this is the identity.
    pub fn dropout(&self, p: f64, rng: &mut SeedRng, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p}")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let factors: Vec<f64> = (0..self.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data = self.with_data(|x| {
            x.iter()
                .zip(&factors)
                .map(|(v, f)| v * f)
                .collect::<Vec<_>>()
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&factors).map(|(gv, f)| gv * f).collect();
                pa.add_grad(&da);
            }),
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.with_data(|x| x.iter().sum::<f64>());
        let n = self.len();
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let da = vec![g[0]; n];
                pa.add_grad(&da);
            }),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Split `[c,h,w]` into non-overlapping `p x p` patches, flattened to a
    /// `[l, p*p*c]` token matrix. Token order is row-major over the patch
    /// grid; features are channel-major within a patch.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(
                "patchify",
                format!("patch size {p} does not divide {h}x{w}"),
            ));
        }
        let (gh, gw) = (h / p, w / p);
        let l = gh * gw;
        let f = c * p * p;
        let mut out = vec![0.0; l * f];
        self.with_data(|x| {
            for py in 0..gh {
                for px in 0..gw {
                    let tok = py * gw + px;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                out[tok * f + (ch * p + dy) * p + dx] =
                                    x[ch * h * w + (py * p + dy) * w + px * p + dx];
                            }
                        }
                    }
                }
            }
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![l, f],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for py in 0..gh {
                    for px in 0..gw {
                        let tok = py * gw + px;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx_ in 0..p {
                                    dx[ch * h * w + (py * p + dy) * w + px * p + dx_] +=
                                        g[tok * f + (ch * p + dy) * p + dx_];
                                }
                            }
                        }
                    }
                }
                pa.add_grad(&dx);
            }),
        ))
    }

    /// Inverse of [`patchify`](Tensor::patchify): `[l, p*p*c] -> [c,h,w]`.
    pub fn unpatchify(&self, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
        let (l, f) = dims2(self, "unpatchify")?;
        if p == 0 || h % p != 0 || w % p != 0 || l != (h / p) * (w / p) || f != c * p * p {
            return Err(Error::shape(
                "unpatchify",
                format!("[{l},{f}] does not reassemble to [{c},{h},{w}] with p={p}"),
            ));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = vec![0.0; c * h * w];
        self.with_data(|t| {
            for py in 0..gh {
                for px in 0..gw {
                    let tok = py * gw + px;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                out[ch * h * w + (py * p + dy) * w + px * p + dx] =
                                    t[tok * f + (ch * p + dy) * p + dx];
                            }
                        }
                    }
                }
            }
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![c, h, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; l * f];
                for py in 0..gh {
                    for px in 0..gw {
                        let tok = py * gw + px;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    dt[tok * f + (ch * p + dy) * p + dx] +=
                                        g[ch * h * w + (py * p + dy) * w + px * p + dx];
                                }
                            }
                        }
                    }
                }
                pa.add_grad(&dt);
            }),
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of {c} columns", start + len),
            ));
        }
        let data = self.with_data(|x| {
            let mut out = vec![0.0; r * len];
            for i in 0..r {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&x[i * c + start..i * c + start + len]);
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![r, len],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                pa.add_grad(&dx);
            }),
        ))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no tensors"));
        }
        let (r, _) = dims2(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for t in parts {
            let (ri, ci) = dims2(t, "concat_cols")?;
            if ri != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (t, &ci) in parts.iter().zip(&widths) {
            t.with_data(|x| {
                for i in 0..r {
                    out[i * total + off..i * total + off + ci]
                        .copy_from_slice(&x[i * ci..(i + 1) * ci]);
                }
            });
            off += ci;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let widths_b = widths.clone();
        let owned_b = owned.clone();
        Ok(Tensor::from_op(
            vec![r, total],
            out,
            owned,
            Box::new(move |g| {
                let mut off = 0;
                for (t, &ci) in owned_b.iter().zip(&widths_b) {
                    if t.requires_grad() {
                        let mut dt = vec![0.0; r * ci];
                        for i in 0..r {
                            dt[i * ci..(i + 1) * ci]
                                .copy_from_slice(&g[i * total + off..i * total + off + ci]);
                        }
                        t.add_grad(&dt);
                    }
                    off += ci;
                }
            }),
        ))
    }

    /// Add a `[d]` bias vector to every row of a `[t,d]` tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (t, d) = dims2(self, "add_row_broadcast")?;
        if bias.shape() != [d] {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("bias {:?} vs row width {d}", bias.shape()),
            ));
        }
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..d {
                        out[i * d + j] = x[i * d + j] + b[j];
                    }
                }
                out
            })
        });
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![t, d],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                px.add_grad(g);
                if pb.requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..t {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    pb.add_grad(&db);
                }
            }),
        ))
    }

    /// Add a per-channel `[c]` bias to a `[c,h,w]` feature map.
    pub fn add_chan_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "add_chan_broadcast")?;
        if bias.shape() != [c] {
            return Err(Error::shape(
                "add_chan_broadcast",
                format!("bias {:?} vs {c} channels", bias.shape()),
            ));
        }
        let hw = h * w;
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = vec![0.0; c * hw];
                for ch in 0..c {
                    for i in 0..hw {
                        out[ch * hw + i] = x[ch * hw + i] + b[ch];
                    }
                }
                out
            })
        });
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                px.add_grad(g);
                if pb.requires_grad() {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    pb.add_grad(&db);
                }
            }),
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[c,h,w]`.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let (c, h, w) = dims3(self, "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let data = self.with_data(|x| {
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xq in 0..ow {
                        out[ch * oh * ow + y * ow + xq] = x[ch * h * w + (y / 2) * w + xq / 2];
                    }
                }
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xq in 0..ow {
                            dx[ch * h * w + (y / 2) * w + xq / 2] +=
                                g[ch * oh * ow + y * ow + xq];
                        }
                    }
                }
                pa.add_grad(&dx);
            }),
        ))
    }

    /// Row `idx` of a `[n,d]` table as a `[d]` vector. Backward scatters
    /// into that row only, which is what embedding lookups need.
    pub fn embed_row(&self, idx: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "embed_row")?;
        if idx >= n {
            return Err(Error::invalid(
                "embed_row",
                format!("row {idx} out of {n}"),
            ));
        }
        let data = self.with_data(|x| x[idx * d..(idx + 1) * d].to_vec());
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![d],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; n * d];
                dt[idx * d..(idx + 1) * d].copy_from_slice(g);
                pa.add_grad(&dt);
            }),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for oc in 0..co {
        let out_c = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let x_c = &x[ic * h * wdt..(ic + 1) * h * wdt];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wdt, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_i = iy as usize * wdt;
                        let row_o = oy * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            out_c[row_o + ox] += wv * x_c[row_i + ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    need_dx: bool,
    need_dw: bool,
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for oc in 0..co {
        let g_c = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let x_c = &x[ic * h * wdt..(ic + 1) * h * wdt];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * ci + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wdt, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_i = iy as usize * wdt;
                        let row_o = oy * ow;
                        if need_dx && need_dw {
                            let dx_c = &mut dx[ic * h * wdt..(ic + 1) * h * wdt];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                let gv = g_c[row_o + ox];
                                dx_c[row_i + ix] += wv * gv;
                                acc += gv * x_c[row_i + ix];
                            }
                        } else if need_dx {
                            let dx_c = &mut dx[ic * h * wdt..(ic + 1) * h * wdt];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                dx_c[row_i + ix] += wv * g_c[row_o + ox];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                acc += g_c[row_o + ox] * x_c[row_i + ix];
                            }
                        }
                    }
                    if need_dw {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Output-column range for which `ox*stride + kx - pad` lands inside `[0, w)`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_num = w as isize - 1 - kx as isize + pad as isize;
    if hi_num < 0 {
        return (lo.min(ow), lo.min(ow));
    }
    let hi = (hi_num as usize) / stride + 1;
    (lo.min(ow), hi.min(ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;

    fn rng(seed: u64) -> SeedRng {
        SeedRng::new(seed)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let proj = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let v = Tensor::from_vec(vec![5.0, 7.0], &[2, 1]).unwrap();
        assert_eq!(proj.matmul(&v).unwrap().to_vec(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(11);
        let a = Tensor::randn(&[3, 4], &mut r);
        let b = Tensor::randn(&[4, 2], &mut r);
        let got = a.matmul(&b).unwrap().to_vec();
        // Independent naive triple loop.
        let (av, bv) = (a.to_vec(), b.to_vec());
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += av[i * 4 + p] * bv[p * 2 + j];
                }
                assert!((got[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let y = x.softmax_rows(None).unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_allowed_key() {
        for (a, b) in [(0.3, -2.0), (100.0, 250.0), (-7.5, 0.0)] {
            let x = Tensor::from_vec(vec![a, b], &[1, 2]).unwrap();
            let bias = Tensor::from_vec(vec![0.0, MASK_NEG], &[1, 2]).unwrap();
            let y = x.softmax_rows(Some(&bias)).unwrap().to_vec();
            assert_eq!(y, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // exp([1,2,3]) / sum, evaluated at 40 decimal digits and frozen.
        let expect = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = x.softmax_rows(None).unwrap().to_vec();
        for (got, want) in y.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let bias = Tensor::from_vec(vec![MASK_NEG, MASK_NEG], &[1, 2]).unwrap();
        assert!(matches!(
            x.softmax_rows(Some(&bias)),
            Err(Error::AllMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(3);
        for _ in 0..50 {
            let x = Tensor::randn(&[4, 6], &mut r);
            // Random mask, at least one finite per row.
            let mut bias = vec![0.0; 24];
            for row in 0..4 {
                let keep = r.below(6);
                for col in 0..6 {
                    if col != keep && r.uniform() < 0.5 {
                        bias[row * 6 + col] = MASK_NEG;
                    }
                }
            }
            let bias = Tensor::from_vec(bias, &[4, 6]).unwrap();
            let y = x.softmax_rows(Some(&bias)).unwrap().to_vec();
            for row in 0..4 {
                let s: f64 = y[row * 6..(row + 1) * 6].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut r = rng(5);
        let x = Tensor::randn(&[1, 3, 3], &mut r);
        let w = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert_eq!(y.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut r = rng(6);
        let x = Tensor::randn(&[2, 4, 4], &mut r);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut r = rng(7);
        let x = Tensor::randn(&[2, 5, 5], &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let y = x.conv2d(&w, None, stride, pad).unwrap();
            let oh = (5 + 2 * pad - 3) / stride + 1;
            let ow = oh;
            let (xv, wv) = (x.to_vec(), w.to_vec());
            // Six nested loops, no shared helpers with the implementation.
            for oc in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += xv[ic * 25 + iy as usize * 5 + ix as usize]
                                            * wv[((oc * 2 + ic) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = y.to_vec()[(oc * oh + oy) * ow + ox];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "stride {stride} pad {pad}: {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(x.conv2d(&w, None, 1, 0).is_err()); // output would be empty
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(x.conv2d(&w, None, 1, 1).is_err()); // even kernel
    }

    #[test]
    fn silu_and_layer_norm_fixed_points() {
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert_eq!(x.silu().unwrap().to_vec(), vec![0.0]);

        let row = Tensor::from_vec(vec![3.5; 8], &[1, 8]).unwrap();
        let gain = Tensor::from_vec(vec![1.0; 8], &[8]).unwrap();
        let shift = Tensor::from_vec(vec![0.0; 8], &[8]).unwrap();
        let y = row.layer_norm(&gain, &shift, 1e-5).unwrap().to_vec();
        for v in y {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_monte_carlo_mean() {
        let n = 16;
        let mut r = rng(123);
        let x_vals: Vec<f64> = (0..n).map(|_| r.uniform_in(-1.0, 1.0)).collect();
        let x_mean = x_vals.iter().sum::<f64>() / n as f64;
        let x = Tensor::from_vec(x_vals, &[n]).unwrap();

        let draws = 100_000;
        let mut means = Vec::with_capacity(draws);
        for _ in 0..draws {
            let y = x.dropout(0.5, &mut r, true).unwrap();
            means.push(y.to_vec().iter().sum::<f64>() / n as f64);
        }
        let emp_mean = means.iter().sum::<f64>() / draws as f64;
        let var = means.iter().map(|m| (m - emp_mean) * (m - emp_mean)).sum::<f64>()
            / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            (emp_mean - x_mean).abs() < 3.0 * se,
            "empirical {emp_mean} vs {x_mean}, se {se}"
        );
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut r = rng(9);
        let x = Tensor::randn(&[10], &mut r);
        let y = x.dropout(0.9, &mut r, false).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let run = || {
            let mut r = rng(77);
            let x = Tensor::randn(&[3, 4], &mut r);
            let w = Tensor::randn(&[4, 4], &mut r);
            let y = x
                .matmul(&w)
                .unwrap()
                .silu()
                .unwrap()
                .softmax_rows(None)
                .unwrap();
            y.to_vec()
        };
        let a = run();
        let b = run();
        let bits_a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    /// Gradient checks over randomized small shapes for every
    /// differentiable op, 20 seeds each.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut r = rng(1000 + seed);

            // matmul + add + mul + scale chain
            let a = Tensor::randn_param(&[3, 4], 0.8, &mut r);
            let b = Tensor::randn_param(&[4, 2], 0.8, &mut r);
            let c = Tensor::randn_param(&[3, 2], 0.8, &mut r);
            let err = grad_check(
                || {
                    let y = a.matmul(&b)?;
                    y.add(&c)?.mul(&y)?.scale(0.5)?.sum_all()
                },
                &[a.clone(), b.clone(), c.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "matmul chain seed {seed}: {err}");

            // softmax with a mask
            let x = Tensor::randn_param(&[2, 5], 1.0, &mut r);
            let mut bias = vec![0.0; 10];
            bias[r.below(10)] = MASK_NEG;
            let bias = Tensor::from_vec(bias, &[2, 5]).unwrap();
            let t = Tensor::randn(&[2, 5], &mut r);
            let err = grad_check(
                || x.softmax_rows(Some(&bias))?.mul(&t)?.sum_all(),
                &[x.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "softmax seed {seed}: {err}");

            // conv2d with bias, stride 2
            let xc = Tensor::randn_param(&[2, 6, 6], 0.7, &mut r);
            let wc = Tensor::randn_param(&[3, 2, 3, 3], 0.7, &mut r);
            let bc = Tensor::randn_param(&[3], 0.7, &mut r);
            let err = grad_check(
                || xc.conv2d(&wc, Some(&bc), 2, 1)?.silu()?.sum_all(),
                &[xc.clone(), wc.clone(), bc.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "conv2d seed {seed}: {err}");

            // layer_norm + relu
            let xn = Tensor::randn_param(&[3, 6], 1.0, &mut r);
            let gn = Tensor::randn_param(&[6], 0.5, &mut r);
            let sn = Tensor::randn_param(&[6], 0.5, &mut r);
            let t2 = Tensor::randn(&[3, 6], &mut r);
            let err = grad_check(
                || xn.layer_norm(&gn, &sn, 1e-5)?.relu()?.mul(&t2)?.sum_all(),
                &[xn.clone(), gn.clone(), sn.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "layer_norm seed {seed}: {err}");

            // data movement: patchify/unpatchify, slice/concat, transpose,
            // upsample, broadcasts, embedding
            let xp = Tensor::randn_param(&[2, 4, 4], 0.9, &mut r);
            let rowb = Tensor::randn_param(&[8], 0.9, &mut r);
            let chb = Tensor::randn_param(&[2], 0.9, &mut r);
            let table = Tensor::randn_param(&[3, 4], 0.9, &mut r);
            let idx = r.below(3);
            let err = grad_check(
                || {
                    let toks = xp.patchify(2)?.add_row_broadcast(&rowb)?;
                    let left = toks.slice_cols(0, 3)?;
                    let right = toks.slice_cols(3, 5)?;
                    let back = Tensor::concat_cols(&[left, right])?
                        .unpatchify(2, 4, 4, 2)?
                        .add_chan_broadcast(&chb)?
                        .upsample_nearest2()?;
                    let e = table.embed_row(idx)?.reshape(&[1, 4])?;
                    let s = e.transpose2()?.matmul(&e)?.sum_all()?;
                    back.sum_all()?.add(&s)
                },
                &[
                    xp.clone(),
                    rowb.clone(),
                    chb.clone(),
                    table.clone(),
                ],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "data movement seed {seed}: {err}");

            // dropout with a reseeded stream per call
            let xd = Tensor::randn_param(&[12], 1.0, &mut r);
            let dseed = r.next_u64();
            let err = grad_check(
                || {
                    let mut dr = SeedRng::new(dseed);
                    xd.dropout(0.3, &mut dr, true)?.sum_all()
                },
                &[xd.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "dropout seed {seed}: {err}");
        }
    }
}
