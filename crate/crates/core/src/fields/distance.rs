//! Exact Euclidean distance transform.
//!
//! Two separable passes over integer squared distances: a column sweep giving
//! the vertical distance to the nearest background pixel, then a row sweep
//! taking the lower envelope of the parabolas `(x - i)^2 + g(i)^2`.

use super::{LabelMask, ScalarField};
use crate::error::{DgmError, Result};

/// Squared Euclidean distance from each `foreground_label` pixel to the
/// nearest in-image pixel carrying any other label. Non-foreground pixels
/// are 0.
///
/// If the image holds no non-foreground pixel at all, distances fall back to
/// the nearest position just outside the image frame.
pub fn squared_distance_transform(mask: &LabelMask, foreground_label: u16) -> Result<Vec<u64>> {
    let (h, w) = mask.dims();
    if h == 0 || w == 0 {
        return Err(DgmError::EmptyInput("distance transform of a zero-sized mask".into()));
    }
    let labels = mask.labels();
    if labels.iter().all(|&l| l == foreground_label) {
        return Ok(frame_distances(h, w));
    }

    // Larger than any in-image distance, small enough that INF^2 + (h+w)^2 fits.
    let inf = (h + w) as i64;

    let mut g = vec![0i64; h * w];
    for x in 0..w {
        let fg = |y: usize| labels[y * w + x] == foreground_label;
        g[x] = if fg(0) { inf } else { 0 };
        for y in 1..h {
            g[y * w + x] = if fg(y) { (g[(y - 1) * w + x] + 1).min(inf) } else { 0 };
        }
        for y in (0..h - 1).rev() {
            let below = g[(y + 1) * w + x];
            if below < g[y * w + x] {
                g[y * w + x] = below + 1;
            }
        }
    }

    let mut out = vec![0u64; h * w];
    let mut s = vec![0usize; w];
    let mut t = vec![0usize; w];
    for y in 0..h {
        let row = &g[y * w..(y + 1) * w];
        let f = |x: usize, i: usize| {
            let dx = x as i64 - i as i64;
            dx * dx + row[i] * row[i]
        };
        let sep = |i: usize, u: usize| {
            let (i2, u2) = ((i * i) as i64, (u * u) as i64);
            (u2 - i2 + row[u] * row[u] - row[i] * row[i]).div_euclid(2 * (u as i64 - i as i64))
        };

        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let next = 1 + sep(s[q as usize], u);
                if next >= 0 && (next as usize) < w {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = next as usize;
                }
            }
        }
        for u in (0..w).rev() {
            out[y * w + u] = f(u, s[q as usize]) as u64;
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }

    for (o, &l) in out.iter_mut().zip(labels) {
        if l != foreground_label {
            *o = 0;
        }
    }
    Ok(out)
}

fn frame_distances(h: usize, w: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = (y + 1).min(h - y).min(x + 1).min(w - x) as u64;
            out.push(d * d);
        }
    }
    out
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// in-image non-foreground pixel; 0 elsewhere.
pub fn distance_transform(mask: &LabelMask, foreground_label: u16) -> Result<ScalarField> {
    let sq = squared_distance_transform(mask, foreground_label)?;
    let data = sq.into_iter().map(|d| (d as f64).sqrt()).collect();
    Ok(ScalarField::from_raw(mask.height(), mask.width(), data))
}
