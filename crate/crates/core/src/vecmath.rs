//! Dense helpers shared by every kernel. All reductions over a dataset go
//! through these so that the same inputs always round the same way.

/// Dot product with four independent lanes, folded as `(l0 + l1) + (l2 + l3)`
/// and then the tail in order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut l = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        l[0] += a[i] * b[i];
        l[1] += a[i + 1] * b[i + 1];
        l[2] += a[i + 2] * b[i + 2];
        l[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (l[0] + l[1]) + (l[2] + l[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `acc[j] += c * x[j]`
#[inline]
pub fn axpy(acc: &mut [f64], c: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += c * v;
    }
}

/// `acc[j] += (c * x[j])^2`
#[inline]
pub fn add_sq_scaled(acc: &mut [f64], c: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        let t = c * v;
        *a += t * t;
    }
}

/// Element-wise `acc += other`.
#[inline]
pub fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(other) {
        *a += v;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_small_integers() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(dot(&a, &b), 84.0);
        assert_eq!(dot(&[], &[]), 0.0);
    }

    #[test]
    fn axpy_and_squares() {
        let mut acc = [1.0, 1.0];
        axpy(&mut acc, 2.0, &[1.0, -1.0]);
        assert_eq!(acc, [3.0, -1.0]);
        let mut sq = [0.0, 0.0];
        add_sq_scaled(&mut sq, -2.0, &[1.0, 3.0]);
        assert_eq!(sq, [4.0, 36.0]);
    }
}
