//! Index mapping for numpy-style broadcasting.

use crate::error::{Error, Result};

use super::tensor::numel;

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// How an operand's flat index is derived from an output flat index.
#[derive(Debug, Clone)]
pub(crate) enum Layout {
    Same,
    Scalar,
    /// Operand equals the trailing dims of the output: `i % len`.
    Suffix(usize),
    /// Operand equals the leading dims with trailing ones: `i / div`.
    Prefix(usize),
    General(Vec<usize>),
}

impl Layout {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Layout {
        let n_op = numel(operand);
        let n_out = numel(out);
        if n_op == n_out {
            return Layout::Same;
        }
        if n_op == 1 {
            return Layout::Scalar;
        }
        let rank = out.len();
        let padded: Vec<usize> = (0..rank).map(|i| dim_from_right(operand, rank - 1 - i)).collect();
        // suffix: leading dims of padded are 1 and the rest match
        let first_non_one = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[first_non_one..] == out[first_non_one..] {
            return Layout::Suffix(n_op);
        }
        let last_non_one = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if padded[..last_non_one] == out[..last_non_one] {
            return Layout::Prefix(numel(&out[last_non_one..]));
        }
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
            acc *= padded[i];
        }
        let mut index = Vec::with_capacity(n_out);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n_out {
            index.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                offset -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        Layout::General(index)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Scalar => 0,
            Layout::Suffix(len) => i % len,
            Layout::Prefix(div) => i / div,
            Layout::General(index) => index[i],
        }
    }
}

/// Elementwise `f(a[la(i)], b[lb(i)])` over `n` output positions, with
/// direct loops for the common layouts.
#[inline]
pub(crate) fn zip_map(
    la: &Layout,
    a: &[f64],
    lb: &Layout,
    b: &[f64],
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match (la, lb) {
        (Layout::Same, Layout::Same) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Layout::Same, Layout::Scalar) => out.extend(a.iter().map(|&x| f(x, b[0]))),
        (Layout::Scalar, Layout::Same) => out.extend(b.iter().map(|&y| f(a[0], y))),
        (Layout::Same, Layout::Suffix(len)) => {
            for chunk in a.chunks(*len) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Layout::Suffix(len), Layout::Same) => {
            for chunk in b.chunks(*len) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        (Layout::Same, Layout::Prefix(div)) => {
            for (chunk, &y) in a.chunks(*div).zip(b) {
                out.extend(chunk.iter().map(|&x| f(x, y)));
            }
        }
        (Layout::Prefix(div), Layout::Same) => {
            for (&x, chunk) in a.iter().zip(b.chunks(*div)) {
                out.extend(chunk.iter().map(|&y| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(a[la.get(i)], b[lb.get(i)]))),
    }
    out
}

/// Sums `grad_out` (output-shaped) into `grad_in` (operand-shaped).
pub(crate) fn reduce_into(layout: &Layout, grad_out: &[f64], grad_in: &mut [f64]) {
    match layout {
        Layout::Same => {
            for (g, v) in grad_in.iter_mut().zip(grad_out) {
                *g += v;
            }
        }
        Layout::Scalar => grad_in[0] += grad_out.iter().sum::<f64>(),
        Layout::Suffix(len) => {
            for chunk in grad_out.chunks(*len) {
                for (g, v) in grad_in.iter_mut().zip(chunk) {
                    *g += v;
                }
            }
        }
        Layout::Prefix(div) => {
            for (g, chunk) in grad_in.iter_mut().zip(grad_out.chunks(*div)) {
                *g += chunk.iter().sum::<f64>();
            }
        }
        Layout::General(index) => {
            for (&i, v) in index.iter().zip(grad_out) {
                grad_in[i] += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape("t", &[], &[2]).unwrap(), vec![2]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    fn brute(operand: &[usize], out: &[usize], i: usize) -> usize {
        let rank = out.len();
        let mut rem = i;
        let mut coords = vec![0; rank];
        for d in (0..rank).rev() {
            coords[d] = rem % out[d];
            rem /= out[d];
        }
        let off = rank - operand.len();
        let mut idx = 0;
        for (k, &dim) in operand.iter().enumerate() {
            let c = if dim == 1 { 0 } else { coords[off + k] };
            idx = idx * dim + c;
        }
        idx
    }

    #[test]
    fn layouts_match_brute_force() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[3], &[2, 3]),
            (&[2, 1], &[2, 3]),
            (&[4, 1, 3], &[4, 2, 3]),
            (&[1, 2, 1], &[3, 2, 4]),
            (&[5, 3, 3], &[2, 5, 3, 3]),
            (&[2, 5, 3, 1], &[2, 5, 3, 3]),
            (&[1], &[2, 2]),
        ];
        for (operand, out) in cases {
            let layout = Layout::new(operand, out);
            for i in 0..numel(out) {
                assert_eq!(layout.get(i), brute(operand, out, i), "{operand:?} -> {out:?} at {i}");
            }
        }
    }

    #[test]
    fn fast_paths_match_general_indexing() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3, 4], &[4]),
            (&[2, 3, 4], &[2, 3, 1]),
            (&[2, 3, 4], &[1]),
            (&[2, 3, 4], &[2, 3, 4]),
            (&[2, 3, 4], &[3, 1]),
        ];
        for (sa, sb) in cases {
            let out = broadcast_shape("t", sa, sb).unwrap();
            let n = numel(&out);
            let a: Vec<f64> = (0..numel(sa)).map(|i| i as f64 * 0.5 - 3.0).collect();
            let b: Vec<f64> = (0..numel(sb)).map(|i| i as f64 + 1.0).collect();
            for (x, y, px, py) in [(&a, &b, *sa, *sb), (&b, &a, *sb, *sa)] {
                let lx = Layout::new(px, &out);
                let ly = Layout::new(py, &out);
                let got = zip_map(&lx, x, &ly, y, n, |p, q| p * 10.0 + q);
                for i in 0..n {
                    assert_eq!(got[i], x[brute(px, &out, i)] * 10.0 + y[brute(py, &out, i)]);
                }
                let mut red = vec![0.0; x.len()];
                reduce_into(&lx, &got, &mut red);
                let mut want = vec![0.0; x.len()];
                for i in 0..n {
                    want[brute(px, &out, i)] += got[i];
                }
                assert_eq!(red, want);
            }
        }
    }
}
