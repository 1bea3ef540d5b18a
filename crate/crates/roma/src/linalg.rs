//! Minimal dense helpers over row-major `Vec<f64>` matrices.

/// y = A x, A is rows x cols row-major.
pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

/// y = A^T x, A is rows x cols row-major, x has len rows, y has len cols.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    y.fill(0.0);
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let xr = x[r];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
}

/// grad_A += g ⊗ x (outer product), for A rows x cols with y = A x.
pub fn outer_acc(grad_a: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    debug_assert_eq!(grad_a.len(), rows * cols);
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &mut grad_a[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += gr * x[c];
        }
    }
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backprop through softmax: given p = softmax(z) and dL/dp, returns dL/dz.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &dpi)| pi * (dpi - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_hand_computation() {
        // A = [[1,2],[3,4],[5,6]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0];
        let mut y = [0.0; 3];
        matvec(&a, 3, 2, &x, &mut y);
        assert_eq!(y, [-1.0, -1.0, -1.0]);
        let mut yt = [0.0; 2];
        matvec_t(&a, 3, 2, &[1.0, 0.0, 1.0], &mut yt);
        assert_eq!(yt, [6.0, 8.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_jacobian_checks() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // finite differences of sum_i dp_i * p_i(z)
        let dp = [0.7, -0.3, 0.1, 0.4];
        let dz = softmax_backward(&p, &dp);
        let h = 1e-6;
        for k in 0..z.len() {
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let f = |zz: &[f64]| -> f64 { dot(&softmax(zz), &dp) };
            let num = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((num - dz[k]).abs() < 1e-8, "coord {k}: {num} vs {}", dz[k]);
        }
    }
}
