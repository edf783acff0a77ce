//! The operation set of the tape: exactly what the detectors and the
//! distillation losses need, nothing more.

use std::rc::Rc;

use super::{Result, Tensor, TensorError};

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn binary_ew(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // d/da and d/db as functions of (a, b).
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let tape = Tensor::tape_of(&[self, other], op)?;
        let out: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (ia, ib) = (self.node_id(), other.node_id());
        let (xa, xb) = (Rc::clone(&self.data), Rc::clone(&other.data));
        let len = out.len();
        Ok(Tensor::make_output(
            self.shape.clone(),
            out,
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = ia {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[i] * da(xa[i], xb[i]);
                    }
                }
                if let Some(id) = ib {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[i] * db(xa[i], xb[i]);
                    }
                }
            }),
        ))
    }

    fn unary_ew(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let tape = Tensor::tape_of(&[self], op).expect("single input");
        let out: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let id = self.node_id();
        let x = Rc::clone(&self.data);
        let len = out.len();
        Tensor::make_output(
            self.shape.clone(),
            out,
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = id {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[i] * df(x[i]);
                    }
                }
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_ew(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_ew(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_ew(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_ew(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary_ew("scale", move |x| x * s, move |_| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary_ew("add_scalar", move |x| x + s, |_| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// max(x, 0). Subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary_ew(
            "relu",
            |x| if x > 0.0 { x } else { 0.0 },
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_ew(
            "sigmoid",
            |x| 1.0 / (1.0 + (-x).exp()),
            |x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            },
        )
    }

    /// |x|. Subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        self.unary_ew("abs", |x| x.abs(), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn ln(&self) -> Tensor {
        self.unary_ew("ln", |x| x.ln(), |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary_ew("sqrt", |x| x.sqrt(), |x| 0.5 / x.sqrt())
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary_ew(
            "powf",
            move |x| x.powf(p),
            move |x| p * x.powf(p - 1.0),
        )
    }

    /// Clamp to [lo, hi]; gradient passes through strictly inside, 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary_ew(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let tape = Tensor::tape_of(&[self], "sum").expect("single input");
        let total: f64 = self.data.iter().sum();
        let id = self.node_id();
        let len = self.data.len();
        Tensor::make_output(
            vec![1],
            vec![total],
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = id {
                    let s = adj.slot(id, len);
                    for v in s.iter_mut() {
                        *v += g[0];
                    }
                }
            }),
        )
    }

    /// Inner product of two same-shape tensors, as a scalar.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "dot")?;
        let tape = Tensor::tape_of(&[self, other], "dot")?;
        let total: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum();
        let (ia, ib) = (self.node_id(), other.node_id());
        let (xa, xb) = (Rc::clone(&self.data), Rc::clone(&other.data));
        let len = self.data.len();
        Ok(Tensor::make_output(
            vec![1],
            vec![total],
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = ia {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[0] * xb[i];
                    }
                }
                if let Some(id) = ib {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[0] * xa[i];
                    }
                }
            }),
        ))
    }

    /// Same data viewed under a new shape. Gradient is the identity.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadReshape {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        let tape = Tensor::tape_of(&[self], "reshape")?;
        let id = self.node_id();
        let len = self.data.len();
        Ok(Tensor::make_output(
            shape.to_vec(),
            self.data.as_ref().clone(),
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = id {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[i];
                    }
                }
            }),
        ))
    }

    /// Concatenates rank-3 [C_i, H, W] maps along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let first = parts[0];
        if first.shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "concat_channels",
                expected: 3,
                shape: first.shape.clone(),
            });
        }
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut c_total = 0;
        for p in parts {
            if p.shape.len() != 3 || p.shape[1] != h || p.shape[2] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            c_total += p.shape[0];
        }
        let tape = Tensor::tape_of(parts, "concat_channels")?;
        let mut out = Vec::with_capacity(c_total * h * w);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        let segments: Vec<(Option<usize>, usize)> = parts
            .iter()
            .map(|p| (p.node_id(), p.data.len()))
            .collect();
        Ok(Tensor::make_output(
            vec![c_total, h, w],
            out,
            tape,
            Box::new(move |g, adj| {
                let mut off = 0;
                for &(id, len) in &segments {
                    if let Some(id) = id {
                        let s = adj.slot(id, len);
                        for i in 0..len {
                            s[i] += g[off + i];
                        }
                    }
                    off += len;
                }
            }),
        ))
    }

    /// Per-position channel maximum of a [C, H, W] map, yielding [H, W].
    /// The gradient routes to the argmax channel; first index wins ties.
    pub fn max_over_channel(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "max_over_channel",
                expected: 3,
                shape: self.shape.clone(),
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if c == 0 {
            return Err(TensorError::EmptyChannels);
        }
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; hw];
        let mut argmax = vec![0u32; hw];
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            for i in 0..hw {
                if plane[i] > out[i] {
                    out[i] = plane[i];
                    argmax[i] = ch as u32;
                }
            }
        }
        let tape = Tensor::tape_of(&[self], "max_over_channel")?;
        let id = self.node_id();
        let len = self.data.len();
        Ok(Tensor::make_output(
            vec![h, w],
            out,
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = id {
                    let s = adj.slot(id, len);
                    for i in 0..hw {
                        s[argmax[i] as usize * hw + i] += g[i];
                    }
                }
            }),
        ))
    }

    /// Weighted sum of absolute differences, as a scalar: sum(w * |a - b|).
    ///
    /// A weight of shape [H, W] broadcasts over the channel axis of rank-3
    /// operands; otherwise it must match the operand shape exactly. The
    /// weight is treated as a constant mask and receives no gradient.
    pub fn l1_sum(&self, other: &Tensor, weight: Option<&Tensor>) -> Result<Tensor> {
        self.check_same_shape(other, "l1_sum")?;
        let w_full: Option<Vec<f64>> = match weight {
            None => None,
            Some(w) if w.shape == self.shape => Some(w.data.as_ref().clone()),
            Some(w) => {
                if self.shape.len() == 3
                    && w.shape.len() == 2
                    && w.shape[0] == self.shape[1]
                    && w.shape[1] == self.shape[2]
                {
                    let hw = w.data.len();
                    let mut full = Vec::with_capacity(self.data.len());
                    for _ in 0..self.shape[0] {
                        full.extend_from_slice(&w.data);
                    }
                    debug_assert_eq!(full.len(), self.data.len());
                    let _ = hw;
                    Some(full)
                } else {
                    return Err(TensorError::ShapeMismatch {
                        op: "l1_sum weight",
                        left: self.shape.clone(),
                        right: w.shape.clone(),
                    });
                }
            }
        };
        let tape = Tensor::tape_of(&[self, other], "l1_sum")?;
        let total: f64 = match &w_full {
            None => self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .sum(),
            Some(w) => self
                .data
                .iter()
                .zip(other.data.iter())
                .zip(w.iter())
                .map(|((a, b), w)| w * (a - b).abs())
                .sum(),
        };
        let (ia, ib) = (self.node_id(), other.node_id());
        let (xa, xb) = (Rc::clone(&self.data), Rc::clone(&other.data));
        let len = self.data.len();
        Ok(Tensor::make_output(
            vec![1],
            vec![total],
            tape,
            Box::new(move |g, adj| {
                let sign = |i: usize| -> f64 {
                    let d = xa[i] - xb[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    match &w_full {
                        None => s,
                        Some(w) => s * w[i],
                    }
                };
                if let Some(id) = ia {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] += g[0] * sign(i);
                    }
                }
                if let Some(id) = ib {
                    let s = adj.slot(id, len);
                    for i in 0..len {
                        s[i] -= g[0] * sign(i);
                    }
                }
            }),
        ))
    }

    /// Same-padded stride-1 cross-correlation of a [C_in, H, W] input with a
    /// [C_out, C_in, k, k] kernel and a [C_out] bias.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "conv2d input",
                expected: 3,
                shape: self.shape.clone(),
            });
        }
        if kernel.shape.len() != 4 || kernel.shape[2] != kernel.shape[3] {
            return Err(TensorError::BadRank {
                op: "conv2d kernel",
                expected: 4,
                shape: kernel.shape.clone(),
            });
        }
        let (c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (c_out, kc, k) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
        if kc != c_in {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                expected: c_in,
                got: kc,
            });
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if bias.shape != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: vec![c_out],
                right: bias.shape.clone(),
            });
        }
        let pad = k / 2;
        let hw = h * w;
        let mut out = vec![0.0; c_out * hw];
        for co in 0..c_out {
            out[co * hw..(co + 1) * hw].fill(bias.data[co]);
        }
        conv_accumulate(
            &self.data, &kernel.data, &mut out, c_in, c_out, h, w, k, pad,
        );
        let tape = Tensor::tape_of(&[self, kernel, bias], "conv2d")?;
        let (ii, ik, ib) = (self.node_id(), kernel.node_id(), bias.node_id());
        let (xin, xk) = (Rc::clone(&self.data), Rc::clone(&kernel.data));
        Ok(Tensor::make_output(
            vec![c_out, h, w],
            out,
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = ib {
                    let s = adj.slot(id, c_out);
                    for co in 0..c_out {
                        s[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
                if let Some(id) = ik {
                    let s = adj.slot(id, xk.len());
                    conv_kernel_grad(&xin, g, s, c_in, c_out, h, w, k, pad);
                }
                if let Some(id) = ii {
                    let s = adj.slot(id, xin.len());
                    conv_input_grad(&xk, g, s, c_in, c_out, h, w, k, pad);
                }
            }),
        ))
    }

    /// Bilinear interpolation of a [C, H, W] map at continuous grid
    /// coordinates (row, col), clamped to the map. Yields [C].
    pub fn bilinear_sample(&self, row: f64, col: f64) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "bilinear_sample",
                expected: 3,
                shape: self.shape.clone(),
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let r = row.clamp(0.0, (h - 1) as f64);
        let cc = col.clamp(0.0, (w - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = cc.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = r - r0 as f64;
        let fc = cc - c0 as f64;
        let hw = h * w;
        // cell index, weight
        let taps = [
            (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
            (r0 * w + c1, (1.0 - fr) * fc),
            (r1 * w + c0, fr * (1.0 - fc)),
            (r1 * w + c1, fr * fc),
        ];
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            out[ch] = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
        }
        let tape = Tensor::tape_of(&[self], "bilinear_sample")?;
        let id = self.node_id();
        let len = self.data.len();
        Ok(Tensor::make_output(
            vec![c],
            out,
            tape,
            Box::new(move |g, adj| {
                if let Some(id) = id {
                    let s = adj.slot(id, len);
                    for ch in 0..c {
                        for &(i, wt) in &taps {
                            s[ch * hw + i] += g[ch] * wt;
                        }
                    }
                }
            }),
        ))
    }

    /// Folds a list of scalar tensors into their sum; empty list is 0.
    pub fn sum_scalars(parts: &[Tensor]) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for p in parts {
            acc = Some(match acc {
                None => p.clone(),
                Some(a) => a.add(p)?,
            });
        }
        Ok(acc.unwrap_or_else(|| Tensor::scalar(0.0)))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_accumulate(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * w;
    for co in 0..c_out {
        for ci in 0..c_in {
            for dy in 0..k {
                for dx in 0..k {
                    let wt = kernel[((co * c_in + ci) * k + dy) * k + dx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (y_lo, y_hi) = row_range(h, dy, pad);
                    let (x_lo, x_hi) = row_range(w, dx, pad);
                    for y in y_lo..y_hi {
                        let iy = y + dy - pad;
                        let in_row = &input[ci * hw + iy * w..ci * hw + iy * w + w];
                        let out_row = &mut out[co * hw + y * w..co * hw + y * w + w];
                        for x in x_lo..x_hi {
                            out_row[x] += wt * in_row[x + dx - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_kernel_grad(
    input: &[f64],
    g: &[f64],
    kg: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * w;
    for co in 0..c_out {
        for ci in 0..c_in {
            for dy in 0..k {
                for dx in 0..k {
                    let (y_lo, y_hi) = row_range(h, dy, pad);
                    let (x_lo, x_hi) = row_range(w, dx, pad);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = y + dy - pad;
                        let in_row = &input[ci * hw + iy * w..ci * hw + iy * w + w];
                        let g_row = &g[co * hw + y * w..co * hw + y * w + w];
                        for x in x_lo..x_hi {
                            acc += g_row[x] * in_row[x + dx - pad];
                        }
                    }
                    kg[((co * c_in + ci) * k + dy) * k + dx] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_input_grad(
    kernel: &[f64],
    g: &[f64],
    ig: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * w;
    for co in 0..c_out {
        for ci in 0..c_in {
            for dy in 0..k {
                for dx in 0..k {
                    let wt = kernel[((co * c_in + ci) * k + dy) * k + dx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (y_lo, y_hi) = row_range(h, dy, pad);
                    let (x_lo, x_hi) = row_range(w, dx, pad);
                    for y in y_lo..y_hi {
                        let iy = y + dy - pad;
                        let ig_row = &mut ig[ci * hw + iy * w..ci * hw + iy * w + w];
                        let g_row = &g[co * hw + y * w..co * hw + y * w + w];
                        for x in x_lo..x_hi {
                            ig_row[x + dx - pad] += wt * g_row[x];
                        }
                    }
                }
            }
        }
    }
}

/// Output coordinates y for which y + d - pad lands inside [0, extent).
fn row_range(extent: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (extent + pad - d).min(extent);
    (lo, hi)
}
