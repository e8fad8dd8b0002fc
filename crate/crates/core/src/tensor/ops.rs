//! Differentiable operations.
//!
//! Each operation computes its forward value eagerly and records whatever
//! it needs for the vector-Jacobian product in [`Op`].

use super::gemm::gemm;
use super::params::ParamId;
use super::tape::{accumulate, Node, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Cosine denominator guard: `cos = dot / (|f| |w| + COS_EPS)`.
pub const COS_EPS: f64 = 1e-8;

/// Similarity used to score a query against class representatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    NegSqEuclidean,
    Cosine,
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Bessel-corrected variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    MulScalar {
        a: Var,
        s: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    MaxAxis {
        a: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        a: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Cosine {
        f: Var,
        w: Var,
        dots: Vec<T>,
        fnorm: Vec<T>,
        wnorm: Vec<T>,
    },
    NegSqDist {
        q: Var,
        p: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2 {
        a: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        a: Var,
    },
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(op: &'static str, size: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < 3 || (padded - 3) % stride != 0 {
        return Err(Error::shape(
            op,
            format!(
                "spatial size {size} with pad {pad}, stride {stride} gives a non-integral output"
            ),
        ));
    }
    Ok((padded - 3) / stride + 1)
}

impl<'s, T: Real> Tape<'s, T> {
    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a + b`, where `b` either matches `a` or matches a trailing suffix of
    /// its shape and is repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::mismatch("add", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let out = Tensor::new(
            sa,
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % n])
                .collect(),
        )?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s }, &[a])
    }

    /// Multiply every entry of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        Ok(self.push(out, Op::MulScalar { a, s }, &[a, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            T::ONE,
            self.value(a).data(),
            self.value(b).data(),
            T::ZERO,
            &mut out,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Fully connected layer `x · wᵀ + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::mismatch("linear", sx, sw));
        }
        let (rows, inp, outp) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::mismatch("linear", sw, self.shape(b)));
            }
        }
        let mut out = vec![T::ZERO; rows * outp];
        gemm(
            false,
            true,
            rows,
            outp,
            inp,
            T::ONE,
            self.value(x).data(),
            self.value(w).data(),
            T::ZERO,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(outp) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::new(&[rows, outp], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p);
                let chunk = s[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(out, Op::Relu { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log { a }, &[a])
    }

    /// Maximum along `axis`, which is removed from the shape. Ties resolve
    /// to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "max_over_axis",
                format!("axis {axis} of shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let idx = base + k * inner;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let out = Tensor::new(&oshape, out)?;
        Ok(self.push(out, Op::MaxAxis { a, argmax }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(a, &shape)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(rows)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    /// Mean of the leading-axis rows sharing each group id in `0..num_groups`.
    pub fn group_mean(&mut self, a: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&groups.len()) {
            return Err(Error::shape(
                "group_mean",
                format!("{} group ids for shape {shape:?}", groups.len()),
            ));
        }
        let mut counts = vec![0usize; num_groups];
        for &g in groups {
            if g >= num_groups {
                return Err(Error::Contract(format!("group id {g} >= {num_groups}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("group {empty} has no members")));
        }
        let r: usize = shape[1..].iter().product();
        let x = self.value(a).data();
        let mut sums = vec![T::ZERO; num_groups * r];
        for (i, &g) in groups.iter().enumerate() {
            for (s, &v) in sums[g * r..(g + 1) * r]
                .iter_mut()
                .zip(&x[i * r..(i + 1) * r])
            {
                *s += v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let c = T::from_f64(c as f64);
            sums[g * r..(g + 1) * r].iter_mut().for_each(|s| *s /= c);
        }
        let mut oshape = shape;
        oshape[0] = num_groups;
        let out = Tensor::new(&oshape, sums)?;
        Ok(self.push(
            out,
            Op::GroupMean {
                a,
                groups: groups.to_vec(),
                counts,
            },
            &[a],
        ))
    }

    /// Row-wise softmax of a `[B, C]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(
                "softmax",
                format!("expected [B, C], got {s:?}"),
            ));
        }
        let c = s[1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(self.shape(a), out)?;
        Ok(self.push(out, Op::Softmax { a }, &[a]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let c = s[1];
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Label(format!(
                "target {t} of row {i} outside 0..{c}"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::ZERO;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            softmax_in_place(row);
        }
        let loss = total / T::from_f64(targets.len() as f64);
        let op = Op::SoftmaxXent {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `[B, N]` matrix of `dot(f_i, w_j) / (|f_i| |w_j| + 1e-8)`.
    pub fn cosine_similarity(&mut self, f: Var, w: Var) -> Result<Var> {
        let (sf, sw) = (self.shape(f), self.shape(w));
        if sf.len() != 2 || sw.len() != 2 || sf[1] != sw[1] {
            return Err(Error::mismatch("cosine_similarity", sf, sw));
        }
        let (b, n, d) = (sf[0], sw[0], sf[1]);
        let fv = self.value(f).data();
        let wv = self.value(w).data();
        let mut dots = vec![T::ZERO; b * n];
        gemm(false, true, b, n, d, T::ONE, fv, wv, T::ZERO, &mut dots);
        let fnorm = row_norms(fv, d);
        let wnorm = row_norms(wv, d);
        let eps = T::from_f64(COS_EPS);
        let mut out = dots.clone();
        for i in 0..b {
            for j in 0..n {
                out[i * n + j] /= fnorm[i] * wnorm[j] + eps;
            }
        }
        let out = Tensor::new(&[b, n], out)?;
        let op = Op::Cosine {
            f,
            w,
            dots,
            fnorm,
            wnorm,
        };
        Ok(self.push(out, op, &[f, w]))
    }

    /// `[B, N]` matrix of `-|q_i - p_j|²`.
    pub fn neg_sq_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (sq, sp) = (self.shape(q), self.shape(p));
        if sq.len() != 2 || sp.len() != 2 || sq[1] != sp[1] {
            return Err(Error::mismatch("neg_sq_dist", sq, sp));
        }
        let (b, n, d) = (sq[0], sp[0], sq[1]);
        let qv = self.value(q).data();
        let pv = self.value(p).data();
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..n {
                let pj = &pv[j * d..(j + 1) * d];
                let s: T = qi.iter().zip(pj).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(-s);
            }
        }
        let out = Tensor::new(&[b, n], out)?;
        Ok(self.push(out, Op::NegSqDist { q, p }, &[q, p]))
    }

    pub fn similarity(&mut self, q: Var, p: Var, sim: Similarity) -> Result<Var> {
        match sim {
            Similarity::NegSqEuclidean => self.neg_sq_dist(q, p),
            Similarity::Cosine => self.cosine_similarity(q, p),
        }
    }

    /// 3×3 cross-correlation of `[B, C, H, W]` with `[O, C, 3, 3]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sx[1] != sw[1] {
            return Err(Error::mismatch("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::mismatch("conv2d", &sw, self.shape(b)));
        }
        if !(1..=2).contains(&stride) || pad > 1 {
            return Err(Error::shape(
                "conv2d",
                format!("unsupported stride {stride} / pad {pad}"),
            ));
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let ho = conv_out("conv2d", h, pad, stride)?;
        let wo = conv_out("conv2d", wd, pad, stride)?;
        let geo = ConvGeometry {
            bsz,
            c,
            h,
            w: wd,
            ho,
            wo,
            stride,
            pad,
        };
        let cols = im2col(self.value(x).data(), &geo);
        let hw = ho * wo;
        let ncols = bsz * hw;
        let mut tmp = vec![T::ZERO; o * ncols];
        gemm(
            false,
            false,
            o,
            ncols,
            c * 9,
            T::ONE,
            self.value(w).data(),
            &cols,
            T::ZERO,
            &mut tmp,
        );
        let bias = self.value(b).data();
        let mut out = vec![T::ZERO; bsz * o * hw];
        for oc in 0..o {
            for bi in 0..bsz {
                let src = &tmp[oc * ncols + bi * hw..oc * ncols + (bi + 1) * hw];
                let dst = &mut out[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[oc];
                }
            }
        }
        let out = Tensor::new(&[bsz, o, ho, wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// Batch normalization over `[B, C, H, W]` or `[B, C]`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; otherwise the given `(mean, var)` are applied as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape(
                "batch_norm2d",
                format!("expected rank 2 or 4, got {s:?}"),
            ));
        }
        let (bsz, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::mismatch("batch_norm2d", &s, self.shape(scale)));
        }
        let count = bsz * hw;
        let xv = self.value(x).data();
        let eps_t = T::from_f64(eps);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(
                        "batch_norm2d",
                        "running statistics do not match channels",
                    ));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batch_norm2d",
                        count,
                    });
                }
                let n = T::from_f64(count as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for bi in 0..bsz {
                        acc += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let m = acc / n;
                    let mut sq = T::ZERO;
                    for bi in 0..bsz {
                        for &v in &xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / n;
                }
                let bessel = n / (n - T::ONE);
                let stats = BnStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * bessel).collect(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let gv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut out = vec![T::ZERO; xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for k in base..base + hw {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gv[ch] * h + bv[ch];
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        let train = stats.is_some();
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(out, op, &[x, scale, shift]), stats))
    }

    /// 2×2 max pooling with stride 2. Ties route to the first element in
    /// row-major window order. In `floor` mode a trailing odd row/column is
    /// dropped; otherwise odd sizes are rejected.
    pub fn max_pool2x2(&mut self, a: Var, floor: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "max_pool2x2",
                format!("expected [B, C, H, W], got {s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        if !floor && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::shape(
                "max_pool2x2",
                format!("odd spatial size {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(
                "max_pool2x2",
                format!("spatial size {h}x{w} too small"),
            ));
        }
        let planes = s[0] * s[1];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { a, argmax }, &[a]))
    }

    /// Spatial mean: `[B, C, H, W] -> [B, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [B, C, H, W], got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        let n = T::from_f64(hw as f64);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[s[0], s[1], 1, 1], out)?;
        Ok(self.push(out, Op::GlobalAvgPool { a }, &[a]))
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn row_norms<T: Real>(x: &[T], d: usize) -> Vec<T> {
    x.chunks(d)
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

struct ConvGeometry {
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// `[C·9, B·Ho·Wo]` patch matrix; row `c·9 + ki·3 + kj`.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncols = g.bsz * hw;
    let mut cols = vec![T::ZERO; g.c * 9 * ncols];
    for ch in 0..g.c {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &mut cols[(ch * 9 + ki * 3 + kj) * ncols..][..ncols];
                for bi in 0..g.bsz {
                    let plane = &x[(bi * g.c + ch) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..][..g.w];
                        let dst = &mut row[bi * hw + oh * g.wo..][..g.wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncols = g.bsz * hw;
    let mut x = vec![T::ZERO; g.bsz * g.c * g.h * g.w];
    for ch in 0..g.c {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &cols[(ch * 9 + ki * 3 + kj) * ncols..][..ncols];
                for bi in 0..g.bsz {
                    let plane = &mut x[(bi * g.c + ch) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.w..][..g.w];
                        let src = &row[bi * hw + oh * g.wo..][..g.wo];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Propagate `g` (the gradient of node `i`) into the gradients of its inputs.
pub(crate) fn backward_op<T: Real>(
    op: &Op<T>,
    nodes: &[Node<T>],
    i: usize,
    g: Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let out = &nodes[i].value;
    let gd = g.data();
    let mut acc = |v: Var, t: Tensor<T>| accumulate(nodes, grads, v, t);
    let like =
        |v: Var, data: Vec<T>| Tensor::new(nodes[v.0].value.shape(), data).expect("gradient shape");

    match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves are handled by the tape"),
        Op::Add { a, b } => {
            if needs(*b) {
                let n = val(*b).len().max(1);
                let mut gb = vec![T::ZERO; n];
                for (k, &v) in gd.iter().enumerate() {
                    gb[k % n] += v;
                }
                acc(*b, like(*b, gb));
            }
            acc(*a, g);
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(val(*b).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    ),
                );
            }
            if needs(*b) {
                acc(
                    *b,
                    like(
                        *b,
                        gd.iter()
                            .zip(val(*a).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    ),
                );
            }
        }
        Op::Scale { a, s } => acc(*a, g.map(|x| x * *s)),
        Op::MulScalar { a, s } => {
            let sv = val(*s).item();
            if needs(*s) {
                let ds: T = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                acc(*s, like(*s, vec![ds]));
            }
            if needs(*a) {
                acc(*a, g.map(|x| x * sv));
            }
        }
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if needs(*a) {
                let mut da = vec![T::ZERO; m * k];
                gemm(
                    false,
                    true,
                    m,
                    k,
                    n,
                    T::ONE,
                    gd,
                    val(*b).data(),
                    T::ZERO,
                    &mut da,
                );
                acc(*a, like(*a, da));
            }
            if needs(*b) {
                let mut db = vec![T::ZERO; k * n];
                gemm(
                    true,
                    false,
                    k,
                    n,
                    m,
                    T::ONE,
                    val(*a).data(),
                    gd,
                    T::ZERO,
                    &mut db,
                );
                acc(*b, like(*b, db));
            }
        }
        Op::Linear { x, w, b } => {
            let (rows, inp) = (val(*x).shape()[0], val(*x).shape()[1]);
            let outp = val(*w).shape()[0];
            if needs(*x) {
                let mut dx = vec![T::ZERO; rows * inp];
                gemm(
                    false,
                    false,
                    rows,
                    inp,
                    outp,
                    T::ONE,
                    gd,
                    val(*w).data(),
                    T::ZERO,
                    &mut dx,
                );
                acc(*x, like(*x, dx));
            }
            if needs(*w) {
                let mut dw = vec![T::ZERO; outp * inp];
                gemm(
                    true,
                    false,
                    outp,
                    inp,
                    rows,
                    T::ONE,
                    gd,
                    val(*x).data(),
                    T::ZERO,
                    &mut dw,
                );
                acc(*w, like(*w, dw));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![T::ZERO; outp];
                    for row in gd.chunks(outp) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = outer_inner(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    acc(p, like(p, dp));
                }
                offset += len;
            }
        }
        Op::Sum { a } => {
            let gs = gd[0];
            acc(*a, Tensor::full(val(*a).shape(), gs));
        }
        Op::Mean { a } => {
            let gs = gd[0] / T::from_f64(val(*a).len() as f64);
            acc(*a, Tensor::full(val(*a).shape(), gs));
        }
        Op::Relu { a } => {
            let dx = gd
                .iter()
                .zip(val(*a).data())
                .map(|(&gv, &x)| if x > T::ZERO { gv } else { T::ZERO })
                .collect();
            acc(*a, like(*a, dx));
        }
        Op::Exp { a } => {
            acc(
                *a,
                like(
                    *a,
                    gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect(),
                ),
            );
        }
        Op::Log { a } => {
            acc(
                *a,
                like(
                    *a,
                    gd.iter()
                        .zip(val(*a).data())
                        .map(|(&gv, &x)| gv / x)
                        .collect(),
                ),
            );
        }
        Op::MaxAxis { a, argmax } | Op::MaxPool2 { a, argmax } => {
            let mut dx = vec![T::ZERO; val(*a).len()];
            for (&idx, &gv) in argmax.iter().zip(gd) {
                dx[idx] += gv;
            }
            acc(*a, like(*a, dx));
        }
        Op::Reshape { a } => {
            let data = g.into_data();
            acc(*a, like(*a, data));
        }
        Op::SelectRows { a, rows } => {
            let r = val(*a).row_len();
            let mut dx = vec![T::ZERO; val(*a).len()];
            for (k, &row) in rows.iter().enumerate() {
                for (d, &v) in dx[row * r..(row + 1) * r]
                    .iter_mut()
                    .zip(&gd[k * r..(k + 1) * r])
                {
                    *d += v;
                }
            }
            acc(*a, like(*a, dx));
        }
        Op::GroupMean { a, groups, counts } => {
            let r = val(*a).row_len();
            let mut dx = vec![T::ZERO; val(*a).len()];
            for (k, &grp) in groups.iter().enumerate() {
                let c = T::from_f64(counts[grp] as f64);
                for (d, &v) in dx[k * r..(k + 1) * r]
                    .iter_mut()
                    .zip(&gd[grp * r..(grp + 1) * r])
                {
                    *d = v / c;
                }
            }
            acc(*a, like(*a, dx));
        }
        Op::Softmax { a } => {
            let c = out.shape()[1];
            let mut dx = Vec::with_capacity(out.len());
            for (p, gr) in out.data().chunks(c).zip(gd.chunks(c)) {
                let dot: T = p.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                dx.extend(p.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - dot)));
            }
            acc(*a, like(*a, dx));
        }
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => {
            let c = val(*logits).shape()[1];
            let scale = gd[0] / T::from_f64(targets.len() as f64);
            let mut dx = probs.clone();
            for (row, &t) in dx.chunks_mut(c).zip(targets) {
                row[t] -= T::ONE;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            acc(*logits, like(*logits, dx));
        }
        Op::Cosine {
            f,
            w,
            dots,
            fnorm,
            wnorm,
        } => {
            let (b, d) = (val(*f).shape()[0], val(*f).shape()[1]);
            let n = val(*w).shape()[0];
            let eps = T::from_f64(COS_EPS);
            // A = G / D and the per-entry scalar G·dot / D².
            let mut a_mat = vec![T::ZERO; b * n];
            let mut coef = vec![T::ZERO; b * n];
            for r in 0..b {
                for c in 0..n {
                    let den = fnorm[r] * wnorm[c] + eps;
                    let k = r * n + c;
                    a_mat[k] = gd[k] / den;
                    coef[k] = gd[k] * dots[k] / (den * den);
                }
            }
            if needs(*f) {
                let mut df = vec![T::ZERO; b * d];
                gemm(
                    false,
                    false,
                    b,
                    d,
                    n,
                    T::ONE,
                    &a_mat,
                    val(*w).data(),
                    T::ZERO,
                    &mut df,
                );
                let fv = val(*f).data();
                for r in 0..b {
                    if fnorm[r] > T::ZERO {
                        let s: T = (0..n).map(|c| coef[r * n + c] * wnorm[c]).sum::<T>() / fnorm[r];
                        for k in 0..d {
                            df[r * d + k] -= s * fv[r * d + k];
                        }
                    }
                }
                acc(*f, like(*f, df));
            }
            if needs(*w) {
                let mut dw = vec![T::ZERO; n * d];
                gemm(
                    true,
                    false,
                    n,
                    d,
                    b,
                    T::ONE,
                    &a_mat,
                    val(*f).data(),
                    T::ZERO,
                    &mut dw,
                );
                let wv = val(*w).data();
                for c in 0..n {
                    if wnorm[c] > T::ZERO {
                        let s: T = (0..b).map(|r| coef[r * n + c] * fnorm[r]).sum::<T>() / wnorm[c];
                        for k in 0..d {
                            dw[c * d + k] -= s * wv[c * d + k];
                        }
                    }
                }
                acc(*w, like(*w, dw));
            }
        }
        Op::NegSqDist { q, p } => {
            let (b, d) = (val(*q).shape()[0], val(*q).shape()[1]);
            let n = val(*p).shape()[0];
            let (qv, pv) = (val(*q).data(), val(*p).data());
            let two = T::from_f64(2.0);
            if needs(*q) {
                let mut dq = vec![T::ZERO; b * d];
                for i in 0..b {
                    for j in 0..n {
                        let gij = gd[i * n + j] * two;
                        for k in 0..d {
                            dq[i * d + k] -= gij * (qv[i * d + k] - pv[j * d + k]);
                        }
                    }
                }
                acc(*q, like(*q, dq));
            }
            if needs(*p) {
                let mut dp = vec![T::ZERO; n * d];
                for i in 0..b {
                    for j in 0..n {
                        let gij = gd[i * n + j] * two;
                        for k in 0..d {
                            dp[j * d + k] += gij * (qv[i * d + k] - pv[j * d + k]);
                        }
                    }
                }
                acc(*p, like(*p, dp));
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => {
            let sx = val(*x).shape();
            let o = val(*w).shape()[0];
            let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let hw = ho * wo;
            let ncols = bsz * hw;
            // [B, O, HW] -> [O, B·HW]
            let mut gp = vec![T::ZERO; o * ncols];
            for bi in 0..bsz {
                for oc in 0..o {
                    gp[oc * ncols + bi * hw..][..hw]
                        .copy_from_slice(&gd[(bi * o + oc) * hw..][..hw]);
                }
            }
            if needs(*b) {
                let db = gp.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
                acc(*b, like(*b, db));
            }
            if needs(*w) {
                let mut dw = vec![T::ZERO; o * c * 9];
                gemm(
                    false,
                    true,
                    o,
                    c * 9,
                    ncols,
                    T::ONE,
                    &gp,
                    cols,
                    T::ZERO,
                    &mut dw,
                );
                acc(*w, like(*w, dw));
            }
            if needs(*x) {
                let mut dcols = vec![T::ZERO; c * 9 * ncols];
                gemm(
                    true,
                    false,
                    c * 9,
                    ncols,
                    o,
                    T::ONE,
                    val(*w).data(),
                    &gp,
                    T::ZERO,
                    &mut dcols,
                );
                let geo = ConvGeometry {
                    bsz,
                    c,
                    h,
                    w: wd,
                    ho,
                    wo,
                    stride: *stride,
                    pad: *pad,
                };
                acc(*x, like(*x, col2im(&dcols, &geo)));
            }
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            train,
        } => {
            let s = val(*x).shape();
            let (bsz, c) = (s[0], s[1]);
            let hw: usize = s[2..].iter().product();
            let gamma = val(*scale).data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            for bi in 0..bsz {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for k in base..base + hw {
                        dgamma[ch] += gd[k] * xhat[k];
                        dbeta[ch] += gd[k];
                    }
                }
            }
            if needs(*x) {
                let mut dx = vec![T::ZERO; gd.len()];
                let n = T::from_f64((bsz * hw) as f64);
                for ch in 0..c {
                    let k_scale = gamma[ch] * inv_std[ch];
                    // With batch statistics, Σ dxhat = γ·dβ and Σ dxhat·xhat = γ·dγ.
                    let (m1, m2) = if *train {
                        (dbeta[ch] / n, dgamma[ch] / n)
                    } else {
                        (T::ZERO, T::ZERO)
                    };
                    for bi in 0..bsz {
                        let base = (bi * c + ch) * hw;
                        for k in base..base + hw {
                            dx[k] = k_scale * (gd[k] - m1 - xhat[k] * m2);
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            if needs(*scale) {
                acc(*scale, like(*scale, dgamma));
            }
            if needs(*shift) {
                acc(*shift, like(*shift, dbeta));
            }
        }
        Op::GlobalAvgPool { a } => {
            let s = val(*a).shape();
            let hw = s[2] * s[3];
            let n = T::from_f64(hw as f64);
            let mut dx = Vec::with_capacity(val(*a).len());
            for &gv in gd {
                dx.extend(std::iter::repeat(gv / n).take(hw));
            }
            acc(*a, like(*a, dx));
        }
    }
}
