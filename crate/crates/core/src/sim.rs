//! Cosine similarity with a norm floor, plus its gradient.

/// Norms below this are treated as zero; the similarity is then defined as 0.
pub const NORM_FLOOR: f64 = 1e-8;

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug)]
pub struct Cosine {
    pub value: f64,
    nx: f64,
    ny: f64,
    /// One of the inputs was below [`NORM_FLOOR`].
    pub degenerate: bool,
}

#[inline]
pub fn cosine(x: &[f64], y: &[f64]) -> Cosine {
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    if nx < NORM_FLOOR || ny < NORM_FLOOR {
        return Cosine {
            value: 0.0,
            nx,
            ny,
            degenerate: true,
        };
    }
    Cosine {
        value: dot(x, y) / (nx * ny),
        nx,
        ny,
        degenerate: false,
    }
}

/// Adds `g * d cos / dx` into `gx` and `g * d cos / dy` into `gy`.
#[inline]
pub fn cosine_backward(
    x: &[f64],
    y: &[f64],
    c: Cosine,
    g: f64,
    gx: Option<&mut [f64]>,
    gy: Option<&mut [f64]>,
) {
    if c.degenerate || g == 0.0 {
        return;
    }
    let inv = 1.0 / (c.nx * c.ny);
    if let Some(gx) = gx {
        let k = c.value / (c.nx * c.nx);
        for ((o, &xi), &yi) in gx.iter_mut().zip(x).zip(y) {
            *o += g * (yi * inv - k * xi);
        }
    }
    if let Some(gy) = gy {
        let k = c.value / (c.ny * c.ny);
        for ((o, &xi), &yi) in gy.iter_mut().zip(x).zip(y) {
            *o += g * (xi * inv - k * yi);
        }
    }
}

/// Plain cosine value, for callers that do not need gradients.
pub fn cos(x: &[f64], y: &[f64]) -> f64 {
    cosine(x, y).value
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n >= NORM_FLOOR {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_values() {
        assert!((cos(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cos(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        let z = cosine(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = [0.3, -1.1, 0.7];
        let y = [1.2, 0.4, -0.5];
        let c = cosine(&x, &y);
        let mut gx = [0.0; 3];
        let mut gy = [0.0; 3];
        cosine_backward(&x, &y, c, 1.0, Some(&mut gx), Some(&mut gy));
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            assert!(((cos(&xp, &y) - cos(&xm, &y)) / (2.0 * h) - gx[i]).abs() < 1e-8);
            let mut yp = y;
            let mut ym = y;
            yp[i] += h;
            ym[i] -= h;
            assert!(((cos(&x, &yp) - cos(&x, &ym)) / (2.0 * h) - gy[i]).abs() < 1e-8);
        }
    }
}
