//! Small numeric building blocks shared across the solver modules: piecewise
//! linear interpolation, an isotonic projection, and a dense linear solve for
//! the tiny systems that show up in exact chain evaluation.

/// Piecewise-linear interpolation of `ys` over strictly increasing knots `xs`.
///
/// Queries outside the knot range clamp to the end values. A single knot acts
/// as a constant function.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    debug_assert!(!xs.is_empty());
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    // First knot strictly greater than x; xs[hi-1] <= x < xs[hi].
    let hi = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[hi - 1], xs[hi]);
    let w = (x - x0) / (x1 - x0);
    ys[hi - 1] + w * (ys[hi] - ys[hi - 1])
}

/// Project `v` onto the cone of nonincreasing sequences in least squares
/// (pool-adjacent-violators with unit weights).
pub fn project_nonincreasing(v: &[f64]) -> Vec<f64> {
    // Blocks of (mean, count); merging keeps the running means nonincreasing.
    let mut means: Vec<f64> = Vec::with_capacity(v.len());
    let mut counts: Vec<usize> = Vec::with_capacity(v.len());
    for &x in v {
        let mut m = x;
        let mut c = 1usize;
        while let Some(&prev) = means.last() {
            if prev >= m {
                break;
            }
            let pc = counts.pop().expect("counts parallel to means");
            means.pop();
            m = (prev * pc as f64 + m * c as f64) / (pc + c) as f64;
            c += pc;
        }
        means.push(m);
        counts.push(c);
    }
    let mut out = Vec::with_capacity(v.len());
    for (m, c) in means.into_iter().zip(counts) {
        out.extend(std::iter::repeat(m).take(c));
    }
    out
}

/// Solve the dense system `a x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` for a (numerically) singular matrix.
///
/// Row-major `a`, sized for the small discounted-chain systems used here;
/// not intended for large matrices.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("pivot magnitudes comparable")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Maximum absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
