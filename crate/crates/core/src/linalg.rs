//! Minimal fixed-size vector/matrix helpers for the 4-state, 2-input model.

use crate::scalar::Real;

pub type Vec2<R> = [R; 2];
pub type Vec4<R> = [R; 4];

/// Row-major 4x4 matrix.
pub type Mat4<R> = [[R; 4]; 4];
/// Row-major 4x2 matrix.
pub type Mat4x2<R> = [[R; 2]; 4];
/// Row-major 2x2 matrix.
pub type Mat2<R> = [[R; 2]; 2];

pub fn vec4_sub<R: Real>(a: Vec4<R>, b: Vec4<R>) -> Vec4<R> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

pub fn mat4_mul_vec<R: Real>(m: &Mat4<R>, v: Vec4<R>) -> Vec4<R> {
    let mut out = [R::zero(); 4];
    for (o, row) in out.iter_mut().zip(m.iter()) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
    }
    out
}

/// `m^T * v` for a 4x4 matrix.
pub fn mat4_tr_mul_vec<R: Real>(m: &Mat4<R>, v: Vec4<R>) -> Vec4<R> {
    let mut out = [R::zero(); 4];
    for (j, o) in out.iter_mut().enumerate() {
        *o = m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2] + m[3][j] * v[3];
    }
    out
}

pub fn mat4x2_mul_vec<R: Real>(m: &Mat4x2<R>, u: Vec2<R>) -> Vec4<R> {
    let mut out = [R::zero(); 4];
    for (o, row) in out.iter_mut().zip(m.iter()) {
        *o = row[0] * u[0] + row[1] * u[1];
    }
    out
}

/// `m^T * v` for a 4x2 matrix, yielding a 2-vector.
pub fn mat4x2_tr_mul_vec<R: Real>(m: &Mat4x2<R>, v: Vec4<R>) -> Vec2<R> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2] + m[3][0] * v[3],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2] + m[3][1] * v[3],
    ]
}

pub fn mat2_mul_vec<R: Real>(m: &Mat2<R>, u: Vec2<R>) -> Vec2<R> {
    [
        m[0][0] * u[0] + m[0][1] * u[1],
        m[1][0] * u[0] + m[1][1] * u[1],
    ]
}

/// Quadratic form `v^T M v`.
pub fn quad4<R: Real>(m: &Mat4<R>, v: Vec4<R>) -> R {
    let mv = mat4_mul_vec(m, v);
    v[0] * mv[0] + v[1] * mv[1] + v[2] * mv[2] + v[3] * mv[3]
}

pub fn quad2<R: Real>(m: &Mat2<R>, u: Vec2<R>) -> R {
    let mu = mat2_mul_vec(m, u);
    u[0] * mu[0] + u[1] * mu[1]
}

pub fn mat4_diag<R: Real>(d: Vec4<R>) -> Mat4<R> {
    let z = R::zero();
    [
        [d[0], z, z, z],
        [z, d[1], z, z],
        [z, z, d[2], z],
        [z, z, z, d[3]],
    ]
}

pub fn mat2_diag<R: Real>(d: Vec2<R>) -> Mat2<R> {
    let z = R::zero();
    [[d[0], z], [z, d[1]]]
}

/// Solves the 2x2 system `m x = b`; `None` when `m` is singular.
pub fn mat2_solve<R: Real>(m: &Mat2<R>, b: Vec2<R>) -> Option<Vec2<R>> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == R::zero() {
        return None;
    }
    Some([
        (b[0] * m[1][1] - b[1] * m[0][1]) / det,
        (b[1] * m[0][0] - b[0] * m[1][0]) / det,
    ])
}

/// True iff a symmetric 4x4 matrix is positive definite (leading minors test).
pub fn mat4_is_pd<R: Real>(m: &Mat4<R>) -> bool {
    let d1 = m[0][0];
    let d2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let d3 = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let d4 = det4(m);
    d1 > R::zero() && d2 > R::zero() && d3 > R::zero() && d4 > R::zero()
}

pub fn mat2_is_pd<R: Real>(m: &Mat2<R>) -> bool {
    m[0][0] > R::zero() && (m[0][0] * m[1][1] - m[0][1] * m[1][0]) > R::zero()
}

fn det4<R: Real>(m: &Mat4<R>) -> R {
    let mut det = R::zero();
    for c in 0..4 {
        let minor = det3(m, 0, c);
        let term = m[0][c] * minor;
        if c % 2 == 0 {
            det += term;
        } else {
            det -= term;
        }
    }
    det
}

fn det3<R: Real>(m: &Mat4<R>, skip_r: usize, skip_c: usize) -> R {
    let mut rows = [[R::zero(); 3]; 3];
    let mut ri = 0;
    for r in 0..4 {
        if r == skip_r {
            continue;
        }
        let mut ci = 0;
        for c in 0..4 {
            if c == skip_c {
                continue;
            }
            rows[ri][ci] = m[r][c];
            ci += 1;
        }
        ri += 1;
    }
    rows[0][0] * (rows[1][1] * rows[2][2] - rows[1][2] * rows[2][1])
        - rows[0][1] * (rows[1][0] * rows[2][2] - rows[1][2] * rows[2][0])
        + rows[0][2] * (rows[1][0] * rows[2][1] - rows[1][1] * rows[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_multiplies_agree_with_explicit() {
        let m: Mat4<f64> = [
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0],
        ];
        let v = [1.0, -1.0, 2.0, 0.5];
        let direct = mat4_tr_mul_vec(&m, v);
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..4 {
                s += m[i][j] * v[i];
            }
            assert!((direct[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn solve2_inverts() {
        let m: Mat2<f64> = [[3.0, 1.0], [1.0, 2.0]];
        let x = mat2_solve(&m, [5.0, 5.0]).unwrap();
        let b = mat2_mul_vec(&m, x);
        assert!((b[0] - 5.0).abs() < 1e-12 && (b[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pd_checks() {
        assert!(mat4_is_pd(&mat4_diag([1.0, 1.0, 0.1, 0.5])));
        assert!(!mat4_is_pd(&mat4_diag([1.0, -1.0, 0.1, 0.5])));
        assert!(mat2_is_pd(&mat2_diag([0.1, 0.1])));
        assert!(!mat2_is_pd(&mat2_diag([0.0, 0.1])));
    }
}
