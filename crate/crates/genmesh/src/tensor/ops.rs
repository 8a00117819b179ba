//! Differentiable primitive catalog.
//!
//! Broadcast rule: only scalar-vs-tensor broadcast is allowed; everything
//! else requires exactly matching shapes. `reduce_min`/`min_axis` route
//! gradient through the argmin element only, ties broken by lowest index.

use super::{BackwardCtx, Tensor, Var};
use crate::error::{Error, Result};

fn binary_shapes(op: &'static str, a: &Var, b: &Var) -> Result<(Vec<usize>, bool, bool)> {
    assert!(a.same_tape(b), "{op}: operands on different tapes");
    let sa = a.shape();
    let sb = b.shape();
    let a_scalar = sa.iter().product::<usize>() == 1;
    let b_scalar = sb.iter().product::<usize>() == 1;
    if sa == sb {
        Ok((sa, false, false))
    } else if a_scalar {
        Ok((sb, true, false))
    } else if b_scalar {
        Ok((sa, false, true))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        })
    }
}

fn sum_to_scalar(t: &Tensor) -> Tensor {
    Tensor::raw(vec![1], vec![t.data().iter().sum()])
}

/// Elementwise addition (scalar broadcast allowed).
pub fn add(a: &Var, b: &Var) -> Result<Var> {
    let (shape, a_sc, b_sc) = binary_shapes("add", a, b)?;
    let (va, vb) = (a.value().clone(), b.value().clone());
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if a_sc { va.item() } else { va.data()[i] };
            let y = if b_sc { vb.item() } else { vb.data()[i] };
            x + y
        })
        .collect();
    Ok(a.tape().record(
        Tensor::raw(shape, data),
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            let ga = if a_sc {
                sum_to_scalar(ctx.grad)
            } else {
                ctx.grad.clone()
            };
            let gb = if b_sc {
                sum_to_scalar(ctx.grad)
            } else {
                ctx.grad.clone()
            };
            vec![ga, gb]
        }),
    ))
}

/// Elementwise subtraction (scalar broadcast allowed).
pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    let (shape, a_sc, b_sc) = binary_shapes("sub", a, b)?;
    let (va, vb) = (a.value().clone(), b.value().clone());
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if a_sc { va.item() } else { va.data()[i] };
            let y = if b_sc { vb.item() } else { vb.data()[i] };
            x - y
        })
        .collect();
    Ok(a.tape().record(
        Tensor::raw(shape, data),
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            let ga = if a_sc {
                sum_to_scalar(ctx.grad)
            } else {
                ctx.grad.clone()
            };
            let gb = if b_sc {
                Tensor::raw(vec![1], vec![-ctx.grad.data().iter().sum::<f64>()])
            } else {
                Tensor::raw(
                    ctx.grad.shape().to_vec(),
                    ctx.grad.data().iter().map(|g| -g).collect(),
                )
            };
            vec![ga, gb]
        }),
    ))
}

/// Elementwise product (scalar broadcast allowed).
pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    let (shape, a_sc, b_sc) = binary_shapes("mul", a, b)?;
    let (va, vb) = (a.value().clone(), b.value().clone());
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if a_sc { va.item() } else { va.data()[i] };
            let y = if b_sc { vb.item() } else { vb.data()[i] };
            x * y
        })
        .collect();
    Ok(a.tape().record(
        Tensor::raw(shape, data),
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            let (xa, xb) = (ctx.inputs[0], ctx.inputs[1]);
            let n = ctx.grad.numel();
            let ga_full: Vec<f64> = (0..n)
                .map(|i| {
                    let y = if b_sc { xb.item() } else { xb.data()[i] };
                    ctx.grad.data()[i] * y
                })
                .collect();
            let gb_full: Vec<f64> = (0..n)
                .map(|i| {
                    let x = if a_sc { xa.item() } else { xa.data()[i] };
                    ctx.grad.data()[i] * x
                })
                .collect();
            let ga = if a_sc {
                Tensor::raw(vec![1], vec![ga_full.iter().sum()])
            } else {
                Tensor::raw(xa.shape().to_vec(), ga_full)
            };
            let gb = if b_sc {
                Tensor::raw(vec![1], vec![gb_full.iter().sum()])
            } else {
                Tensor::raw(xb.shape().to_vec(), gb_full)
            };
            vec![ga, gb]
        }),
    ))
}

/// Elementwise division (scalar broadcast allowed).
pub fn div(a: &Var, b: &Var) -> Result<Var> {
    let (shape, a_sc, b_sc) = binary_shapes("div", a, b)?;
    let (va, vb) = (a.value().clone(), b.value().clone());
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = if a_sc { va.item() } else { va.data()[i] };
            let y = if b_sc { vb.item() } else { vb.data()[i] };
            x / y
        })
        .collect();
    Ok(a.tape().record(
        Tensor::raw(shape, data),
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            let (xa, xb) = (ctx.inputs[0], ctx.inputs[1]);
            let n = ctx.grad.numel();
            let ga_full: Vec<f64> = (0..n)
                .map(|i| {
                    let y = if b_sc { xb.item() } else { xb.data()[i] };
                    ctx.grad.data()[i] / y
                })
                .collect();
            let gb_full: Vec<f64> = (0..n)
                .map(|i| {
                    let x = if a_sc { xa.item() } else { xa.data()[i] };
                    let y = if b_sc { xb.item() } else { xb.data()[i] };
                    -ctx.grad.data()[i] * x / (y * y)
                })
                .collect();
            let ga = if a_sc {
                Tensor::raw(vec![1], vec![ga_full.iter().sum()])
            } else {
                Tensor::raw(xa.shape().to_vec(), ga_full)
            };
            let gb = if b_sc {
                Tensor::raw(vec![1], vec![gb_full.iter().sum()])
            } else {
                Tensor::raw(xb.shape().to_vec(), gb_full)
            };
            vec![ga, gb]
        }),
    ))
}

/// Plain (m,k) x (k,n) matrix product.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    assert!(a.same_tape(b), "matmul: operands on different tapes");
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let out = matmul_raw(&a.value(), &b.value(), m, k, n);
    Ok(a.tape().record(
        out,
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            // dA = G B^T, dB = A^T G
            let g = ctx.grad;
            let (xa, xb) = (ctx.inputs[0], ctx.inputs[1]);
            let bt = transpose_raw(xb, k, n);
            let at = transpose_raw(xa, m, k);
            let ga = matmul_raw(g, &bt, m, n, k);
            let gb = matmul_raw(&at, g, k, m, n);
            vec![ga, gb]
        }),
    ))
}

fn matmul_raw(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::raw(vec![m, n], out)
}

fn transpose_raw(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    let d = t.data();
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    Tensor::raw(vec![cols, rows], out)
}

/// Concatenate along an axis (1D: axis 0; 2D: axis 0 or 1).
pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
    assert!(!parts.is_empty(), "concat of nothing");
    let first = parts[0].shape();
    let rank = first.len();
    if axis >= rank {
        return Err(Error::Autodiff(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts.iter().skip(1) {
        let s = p.shape();
        if s.len() != rank
            || (0..rank).any(|d| d != axis && s[d] != first[d])
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: s,
            });
        }
        assert!(parts[0].same_tape(p), "concat: operands on different tapes");
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut shape = first.clone();
    shape[axis] = total;

    let out = if rank == 1 || axis == 0 {
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        Tensor::raw(shape.clone(), data)
    } else {
        // axis == 1 on 2D
        let rows = first[0];
        let mut data = Vec::with_capacity(shape.iter().product());
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(sizes.iter()) {
                let v = p.value();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        Tensor::raw(shape.clone(), data)
    };

    let sizes_b = sizes.clone();
    let rows = if rank == 2 { first[0] } else { 0 };
    let parent_refs: Vec<&Var> = parts.to_vec();
    Ok(parts[0].tape().record(
        out,
        &parent_refs,
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx.grad.data();
            if rank == 1 || axis == 0 {
                let mut grads = Vec::with_capacity(sizes_b.len());
                let mut off = 0;
                for (inp, &sz) in ctx.inputs.iter().zip(sizes_b.iter()) {
                    let n = inp.numel();
                    grads.push(Tensor::raw(inp.shape().to_vec(), g[off..off + n].to_vec()));
                    off += n;
                    let _ = sz;
                }
                grads
            } else {
                let total: usize = sizes_b.iter().sum();
                let mut grads: Vec<Tensor> = ctx
                    .inputs
                    .iter()
                    .map(|i| Tensor::zeros(i.shape().to_vec()))
                    .collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (gi, &w) in grads.iter_mut().zip(sizes_b.iter()) {
                        for c in 0..w {
                            gi.data[r * w + c] = g[r * total + off + c];
                        }
                        off += w;
                    }
                }
                grads
            }
        }),
    ))
}

/// Reshape without copying semantics (data order preserved).
pub fn reshape(a: &Var, shape: Vec<usize>) -> Result<Var> {
    let n: usize = shape.iter().product();
    if n != a.value().numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: a.shape(),
            rhs: shape,
        });
    }
    let old_shape = a.shape();
    let out = Tensor::raw(shape, a.value().data().to_vec());
    Ok(a.tape().record(
        out,
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            vec![Tensor::raw(old_shape.clone(), ctx.grad.data().to_vec())]
        }),
    ))
}

/// Flat gather: `out[k] = a.flat[indices[k]]`, output is 1D of the index
/// count. Backward scatter-adds into the source.
pub fn gather(a: &Var, indices: &[usize]) -> Result<Var> {
    let v = a.value();
    let n = v.numel();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Autodiff(format!(
            "gather index {bad} out of range for {n} elements"
        )));
    }
    let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
    drop(v);
    let idx = indices.to_vec();
    let src_shape = a.shape();
    Ok(a.tape().record(
        Tensor::raw(vec![indices.len()], data),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            let mut g = Tensor::zeros(src_shape.clone());
            for (k, &i) in idx.iter().enumerate() {
                g.data[i] += ctx.grad.data()[k];
            }
            vec![g]
        }),
    ))
}

/// Gather whole rows of a 2D tensor; output is (indices.len(), cols).
pub fn gather_rows(a: &Var, rows: &[usize]) -> Result<Var> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::Autodiff(format!(
            "gather_rows wants a 2D tensor, got {shape:?}"
        )));
    }
    let cols = shape[1];
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        if r >= shape[0] {
            return Err(Error::Autodiff(format!(
                "gather_rows row {r} out of range for {} rows",
                shape[0]
            )));
        }
        for c in 0..cols {
            flat.push(r * cols + c);
        }
    }
    reshape(&gather(a, &flat)?, vec![rows.len(), cols])
}

/// Sum of all elements.
pub fn reduce_sum(a: &Var) -> Result<Var> {
    let s: f64 = a.value().data().iter().sum();
    let shape = a.shape();
    Ok(a.tape().record(
        Tensor::scalar(s),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            vec![Tensor::full(shape.clone(), ctx.grad.item())]
        }),
    ))
}

/// Mean of all elements.
pub fn reduce_mean(a: &Var) -> Result<Var> {
    let n = a.value().numel();
    let s: f64 = a.value().data().iter().sum::<f64>() / n as f64;
    let shape = a.shape();
    Ok(a.tape().record(
        Tensor::scalar(s),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            vec![Tensor::full(shape.clone(), ctx.grad.item() / n as f64)]
        }),
    ))
}

/// Global minimum with argmin; gradient reaches the argmin element only.
pub fn reduce_min(a: &Var) -> Result<(Var, usize)> {
    let v = a.value();
    let mut best = 0;
    for (i, &x) in v.data().iter().enumerate() {
        if x < v.data()[best] {
            best = i;
        }
    }
    let m = v.data()[best];
    drop(v);
    let shape = a.shape();
    let var = a.tape().record(
        Tensor::scalar(m),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            let mut g = Tensor::zeros(shape.clone());
            g.data[best] = ctx.grad.item();
            vec![g]
        }),
    );
    Ok((var, best))
}

/// Per-row (axis=1) or per-column (axis=0) minimum of a 2D tensor, with
/// argmin indices. Ties break to the lowest index.
pub fn min_axis(a: &Var, axis: usize) -> Result<(Var, Vec<usize>)> {
    let shape = a.shape();
    if shape.len() != 2 || axis > 1 {
        return Err(Error::Autodiff(format!(
            "min_axis wants 2D tensor and axis 0/1, got {shape:?} axis {axis}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let v = a.value();
    let (out_len, mut args) = if axis == 1 {
        (rows, vec![0usize; rows])
    } else {
        (cols, vec![0usize; cols])
    };
    let mut mins = vec![0.0; out_len];
    if axis == 1 {
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x < row[best] {
                    best = c;
                }
            }
            args[r] = best;
            mins[r] = row[best];
        }
    } else {
        for c in 0..cols {
            let mut best = 0;
            for r in 0..rows {
                if v.data()[r * cols + c] < v.data()[best * cols + c] {
                    best = r;
                }
            }
            args[c] = best;
            mins[c] = v.data()[best * cols + c];
        }
    }
    drop(v);
    let args_b = args.clone();
    let shape_b = shape.clone();
    let var = a.tape().record(
        Tensor::raw(vec![out_len], mins),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            let mut g = Tensor::zeros(shape_b.clone());
            for (k, &arg) in args_b.iter().enumerate() {
                let flat = if axis == 1 { k * cols + arg } else { arg * cols + k };
                g.data[flat] += ctx.grad.data()[k];
            }
            vec![g]
        }),
    );
    Ok((var, args))
}

fn unary(
    a: &Var,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Var {
    let shape = a.shape();
    let data: Vec<f64> = a.value().data().iter().map(|&x| f(x)).collect();
    a.tape().record(
        Tensor::raw(shape, data),
        &[a],
        Box::new(move |ctx: &BackwardCtx| {
            let x = ctx.inputs[0];
            let g: Vec<f64> = ctx
                .grad
                .data()
                .iter()
                .zip(x.data().iter().zip(ctx.out.data().iter()))
                .map(|(&g, (&x, &y))| g * dfdx(x, y))
                .collect();
            vec![Tensor::raw(x.shape().to_vec(), g)]
        }),
    )
}

pub fn relu(a: &Var) -> Var {
    unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

/// Leaky rectifier: x for x > 0, alpha * x otherwise.
pub fn leaky_relu(a: &Var, alpha: f64) -> Var {
    unary(
        a,
        move |x| if x > 0.0 { x } else { alpha * x },
        move |x, _| if x > 0.0 { 1.0 } else { alpha },
    )
}

pub fn tanh(a: &Var) -> Var {
    unary(a, f64::tanh, |_, y| 1.0 - y * y)
}

pub fn sigmoid(a: &Var) -> Var {
    unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
}

pub fn square(a: &Var) -> Var {
    unary(a, |x| x * x, |x, _| 2.0 * x)
}

/// Elementwise square root. Inputs must be strictly positive for a
/// finite gradient.
pub fn sqrt(a: &Var) -> Var {
    unary(a, f64::sqrt, |_, y| 0.5 / y)
}

/// Clamp into [lo, hi]; zero gradient outside the open interval.
pub fn clamp(a: &Var, lo: f64, hi: f64) -> Var {
    unary(
        a,
        move |x| x.clamp(lo, hi),
        move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
    )
}

/// y = s * x (scalar constant).
pub fn scale(a: &Var, s: f64) -> Var {
    unary(a, move |x| s * x, move |_, _| s)
}

/// y = x + s (scalar constant).
pub fn shift(a: &Var, s: f64) -> Var {
    unary(a, move |x| x + s, |_, _| 1.0)
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}
