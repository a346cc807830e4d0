//! Right-aligned shape broadcasting for elementwise binary ops, plus the
//! gradient reduction that undoes it.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides_of, Element, Tensor};

/// Broadcast shape of `a` and `b` under numpy right-alignment rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn padded_bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let mut strides = vec![0usize; rank];
    let off = rank - shape.len();
    for i in 0..shape.len() {
        strides[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    strides
}

/// Apply a binary op over broadcast operands, producing the broadcast shape.
pub fn binary_bcast<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;

    // common fast path: b differs only by a size-1 last axis (per-row scalar)
    if a.shape() == out_shape.as_slice()
        && b.rank() == a.rank()
        && b.shape()[..a.rank() - 1] == a.shape()[..a.rank() - 1]
        && b.shape()[a.rank() - 1] == 1
        && a.shape()[a.rank() - 1] > 0
    {
        let cols = a.shape()[a.rank() - 1];
        let mut data = Vec::with_capacity(a.numel());
        for (r, &bv) in b.data().iter().enumerate() {
            for &av in &a.data()[r * cols..(r + 1) * cols] {
                data.push(f(av, bv));
            }
        }
        return Tensor::new(out_shape, data);
    }

    // common fast path: b is a contiguous suffix of a (bias-style)
    if a.shape() == out_shape.as_slice() && is_suffix(b.shape(), a.shape()) {
        let bn = b.numel().max(1);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &av)| f(av, b.data()[i % bn]))
            .collect();
        return Tensor::new(out_shape, data);
    }

    let rank = out_shape.len();
    let n = numel(&out_shape);
    let out_strides = strides_of(&out_shape);
    let a_str = padded_bcast_strides(a.shape(), &out_shape);
    let b_str = padded_bcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(n);
    for o in 0..n {
        let mut rem = o;
        let mut ai = 0usize;
        let mut bi = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            ai += c * a_str[d];
            bi += c * b_str[d];
        }
        data.push(f(a.data()[ai], b.data()[bi]));
    }
    Tensor::new(out_shape, data)
}

fn is_suffix(b: &[usize], a: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sum `grad` (of the broadcast shape) down to `target` shape.
pub fn reduce_to_shape<E: Element>(grad: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if grad.shape() == target {
        return grad.clone();
    }
    let rank = grad.rank();
    let g_strides = grad.strides();
    let t_strides_padded = padded_bcast_strides(target, grad.shape());
    let mut out = Tensor::<E>::zeros(target);
    let od = out.data_mut();
    for o in 0..grad.numel() {
        let mut rem = o;
        let mut ti = 0usize;
        for d in 0..rank {
            let c = rem / g_strides[d];
            rem %= g_strides[d];
            ti += c * t_strides_padded[d];
        }
        od[ti] = od[ti] + grad.data()[o];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_add_broadcasts() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = binary_bcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn last_axis_scalar_divides() {
        let a = Tensor::<f64>::new(vec![2, 2], vec![2., 4., 9., 12.]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 1], vec![2., 3.]).unwrap();
        let c = binary_bcast(&a, &b, |x, y| x / y).unwrap();
        assert_eq!(c.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::<f64>::ones(&[2, 3]);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[2., 2., 2.]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[3., 3.]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }
}
