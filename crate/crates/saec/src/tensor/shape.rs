//! Shape arithmetic: row-major strides, broadcasting, and reduction of
//! gradients back to pre-broadcast shapes.
//!
//! Broadcasting is deliberately narrow: both operands must have the same
//! rank, and each dimension pair must either match or have one side equal
//! to 1. Rank-0 tensors (shape `[]`) hold exactly one element.

use crate::scalar::Scalar;

/// Number of elements implied by a shape. The empty shape is a scalar: 1.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides. `strides(&[2, 3, 4]) == [12, 4, 1]`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        out[i] = acc;
        acc *= shape[i];
    }
    out
}

/// Resulting shape of broadcasting `a` against `b`, or `None` if they are
/// incompatible (different rank, or a dimension pair that neither matches
/// nor contains a 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    let mut out = Vec::with_capacity(a.len());
    for (&da, &db) in a.iter().zip(b) {
        if da == db {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else if db == 1 {
            out.push(da);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides for reading a tensor of shape `from` at positions of the
/// broadcast shape `to`: broadcast dimensions get stride 0.
/// `from` must be broadcast-compatible with `to` and already rank-aligned.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let st = strides(from);
    from.iter()
        .zip(to)
        .zip(st)
        .map(|((&f, &t), s)| if f == t { s } else { 0 })
        .collect()
}

/// Apply `f` elementwise over two broadcast operands, producing a buffer of
/// the broadcast shape. Fast path when the shapes already match.
pub fn ew_broadcast<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(S, S) -> S,
) -> Vec<S> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        // odometer increment over the output index
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Materialize `a` (shape `from`) at the broadcast shape `to`.
pub fn broadcast_to<S: Scalar>(a: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return a.to_vec();
    }
    let n = numel(to);
    let sa = broadcast_strides(from, to);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    let mut oa = 0usize;
    for _ in 0..n {
        out.push(a[oa]);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * to[d];
        }
    }
    out
}

/// Sum a buffer of shape `from` down to shape `to`, where `to` was broadcast
/// up to `from` (i.e. every differing dimension of `to` is 1). This is the
/// gradient of broadcasting.
pub fn reduce_to<S: Scalar>(g: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); numel(to)];
    let st = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    for &gv in g {
        out[ot] += gv;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_of_scalar_shape_is_one() {
        assert_eq!(numel(&[]), 1);
        assert_eq!(numel(&[2, 3]), 6);
        assert_eq!(numel(&[4, 0, 2]), 0);
    }

    #[test]
    fn row_major_strides() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[]), Some(vec![]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None); // no 1s to stretch
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3, 1]), None); // rank mismatch
    }

    #[test]
    fn ew_broadcast_row_against_column() {
        // [2,1] + [1,3] -> [2,3]
        let a = [10.0, 20.0];
        let b = [1.0, 2.0, 3.0];
        let got = ew_broadcast(&a, &[2, 1], &b, &[1, 3], &[2, 3], |x, y| x + y);
        assert_eq!(got, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn broadcast_then_reduce_counts_multiplicity() {
        // reducing a [2,3] of ones to [2,1] sums each row
        let g = [1.0f64; 6];
        assert_eq!(reduce_to(&g, &[2, 3], &[2, 1]), vec![3.0, 3.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[1, 3]), vec![2.0, 2.0, 2.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[1, 1]), vec![6.0]);
    }

    #[test]
    fn broadcast_to_replicates() {
        let a = [1.0, 2.0];
        let got = broadcast_to(&a, &[1, 2], &[3, 2]);
        assert_eq!(got, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
