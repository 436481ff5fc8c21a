//! Small dense-vector helpers shared across modules.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// acc += scale * v
pub fn add_scaled(acc: &mut [f64], v: &[f64], scale: f64) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale_in_place(a: &mut [f64], s: f64) {
    for x in a.iter_mut() {
        *x *= s;
    }
}

/// Projects `v` onto the Euclidean ball of radius `bound` (in place).
pub fn project_ball(v: &mut [f64], bound: f64) {
    let n = norm2(v);
    if n > bound && n > 0.0 {
        scale_in_place(v, bound / n);
    }
}

/// Cosine similarity; 0 when either vector is zero.
#[cfg(test)]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_identity_inside_ball() {
        let mut v = vec![0.3, -0.4];
        project_ball(&mut v, 1.0);
        assert_eq!(v, vec![0.3, -0.4]);
    }

    #[test]
    fn projection_lands_on_sphere() {
        let mut v = vec![3.0, 4.0];
        project_ball(&mut v, 1.0);
        assert!((norm2(&v) - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
    }
}
