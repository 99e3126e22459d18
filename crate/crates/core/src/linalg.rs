//! Small dense-vector helpers. Dimensions here are tiny (state spaces of two
//! or three), so everything is a plain slice operation.

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// x' M x for a square matrix stored row-major.
pub fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    debug_assert_eq!(m.len(), n * n);
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[i * n + j] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Determinant of the leading k-by-k block of a row-major n-by-n matrix,
/// by Gaussian elimination with partial pivoting.
pub fn leading_minor_det(m: &[f64], n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    let mut a: Vec<f64> = (0..k).flat_map(|i| m[i * n..i * n + k].to_vec()).collect();
    let mut det = 1.0;
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| {
                a[i * k + col]
                    .abs()
                    .partial_cmp(&a[j * k + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * k + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..k {
                a.swap(col * k + j, pivot * k + j);
            }
            det = -det;
        }
        det *= a[col * k + col];
        for row in col + 1..k {
            let f = a[row * k + col] / a[col * k + col];
            for j in col..k {
                a[row * k + j] -= f * a[col * k + j];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_form_identity_is_norm_squared() {
        let id = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(quad_form(&id, &[3.0, 4.0]), 25.0);
    }

    #[test]
    fn minors_of_2x2() {
        let m = [2.0, 1.0, 1.0, 3.0];
        assert!((leading_minor_det(&m, 2, 1) - 2.0).abs() < 1e-12);
        assert!((leading_minor_det(&m, 2, 2) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn minor_det_singular() {
        let m = [1.0, 2.0, 2.0, 4.0];
        assert_eq!(leading_minor_det(&m, 2, 2), 0.0);
    }
}
