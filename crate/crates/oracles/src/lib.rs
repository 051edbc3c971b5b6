//! Independent reference implementations used by the test suites.
//!
//! Nothing in this crate touches `czflow-core`: every solver here works
//! directly from the governing equations so it can serve as an oracle for
//! the production code paths.

pub mod five_eq;
pub mod follow_sim;
pub mod qp_grid;
pub mod quadrature;
pub mod stats;

/// Solve `A x = b` for a small dense system with partial pivoting.
/// Returns `None` when the matrix is numerically singular.
pub fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    assert_eq!(a.len(), n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}
