//! Value-level kernels shared by the forward and backward passes.

use super::{Result, Tensor, TensorError};

/// How the operands of a binary elementwise op line up.
///
/// Only the leading (batch) axis broadcasts: `[b, ...rest]` pairs with
/// `[...rest]` or `[1, ...rest]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand repeats over the left operand's leading axis.
    Rhs,
    /// Left operand repeats over the right operand's leading axis.
    Lhs,
}

fn repeats_over_leading(big: &[usize], small: &[usize]) -> bool {
    if big.is_empty() {
        return false;
    }
    if small.len() + 1 == big.len() {
        return small == &big[1..];
    }
    small.len() == big.len() && small[0] == 1 && small[1..] == big[1..]
}

pub(crate) fn broadcast_rule(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if repeats_over_leading(lhs, rhs) {
        Ok(Broadcast::Rhs)
    } else if repeats_over_leading(rhs, lhs) {
        Ok(Broadcast::Lhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, rule: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, data) = match rule {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::Rhs => {
            let inner = b.len();
            let data = a
                .data()
                .chunks(inner.max(1))
                .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect::<Vec<_>>();
            (a.shape().to_vec(), data)
        }
        Broadcast::Lhs => {
            let inner = a.len();
            let data = b
                .data()
                .chunks(inner.max(1))
                .flat_map(|row| a.data().iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect::<Vec<_>>();
            (b.shape().to_vec(), data)
        }
    };
    Tensor::new(shape, data).expect("broadcast shapes are consistent")
}

/// Sums a full-size gradient down to the shape of a broadcast operand.
pub(crate) fn reduce_leading(grad: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    if inner == 0 {
        return out;
    }
    for row in grad.chunks(inner) {
        for (o, g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

/// `[n × k] · [k × m]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[n × k]ᵀ · [n × m]` → `[k × m]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[n × m] · [k × m]ᵀ` → `[n × k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Reduces `axis` with `f` applied to the lane of values along it.
pub(crate) fn reduce_axis(t: &Tensor, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(t.shape(), axis)?;
    let data = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut lane = (0..n).map(|j| data[base + j * inner]);
            out.push(f(&mut lane));
        }
    }
    Tensor::new(without_axis(t.shape(), axis), out)
}

/// Max-shifted log-sum-exp of a lane. Empty lanes give `-inf`.
pub(crate) fn logsumexp_lane(values: &mut dyn Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() || max.is_nan() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Scalar log-sum-exp over a slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    logsumexp_lane(&mut values.iter().copied())
}

/// Numerically stable `ln(1 + eˣ)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
