use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{ChannelGrads, ScanParams};
use super::scan::{scan_line, scan_line_backward, scan_madds_per_step};
use crate::error::{DgmError, Result};
use crate::fields::FeatureMap;

/// One of the four raster serializations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    LeftRight,
    RightLeft,
    TopBottom,
    BottomTop,
}

impl ScanDirection {
    /// Fixed merge order.
    pub const ALL: [ScanDirection; 4] =
        [ScanDirection::LeftRight, ScanDirection::RightLeft, ScanDirection::TopBottom, ScanDirection::BottomTop];

    /// Direction of travel as `(y, x)`.
    pub fn unit_vector(self) -> (f64, f64) {
        match self {
            ScanDirection::LeftRight => (0.0, 1.0),
            ScanDirection::RightLeft => (0.0, -1.0),
            ScanDirection::TopBottom => (1.0, 0.0),
            ScanDirection::BottomTop => (-1.0, 0.0),
        }
    }

    /// Pixel indices of every scan line, each in visiting order.
    pub fn lines(self, height: usize, width: usize) -> Vec<Vec<usize>> {
        match self {
            ScanDirection::LeftRight => (0..height).map(|y| (0..width).map(|x| y * width + x).collect()).collect(),
            ScanDirection::RightLeft => {
                (0..height).map(|y| (0..width).rev().map(|x| y * width + x).collect()).collect()
            }
            ScanDirection::TopBottom => (0..width).map(|x| (0..height).map(|y| y * width + x).collect()).collect(),
            ScanDirection::BottomTop => {
                (0..width).map(|x| (0..height).rev().map(|y| y * width + x).collect()).collect()
            }
        }
    }
}

/// Multiply-adds of one directional scan over a `c×h×w` map.
pub fn directional_scan_madds(channels: usize, height: usize, width: usize, state_size: usize) -> u64 {
    (channels * height * width) as u64 * scan_madds_per_step(state_size)
}

pub(crate) fn directional_scan_raw(
    c: usize,
    h: usize,
    w: usize,
    data: &[f64],
    params: &ScanParams,
    dir: ScanDirection,
) -> Vec<f64> {
    let n = h * w;
    let lines = dir.lines(h, w);
    let mut out = vec![0.0; c * n];
    out.par_chunks_mut(n.max(1)).enumerate().take(c).for_each(|(ch, plane_out)| {
        let plane = &data[ch * n..(ch + 1) * n];
        let cp = params.channel(ch);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut state = vec![0.0; params.state_size];
        for line in &lines {
            xs.clear();
            xs.extend(line.iter().map(|&i| plane[i]));
            ys.resize(xs.len(), 0.0);
            scan_line(&xs, cp, &mut ys, &mut state);
            for (&i, &v) in line.iter().zip(&ys) {
                plane_out[i] = v;
            }
        }
    });
    out
}

/// Reverse pass of a directional scan: returns `∂L/∂x` and the parameter
/// gradients.
pub(crate) fn directional_scan_backward_raw(
    c: usize,
    h: usize,
    w: usize,
    data: &[f64],
    params: &ScanParams,
    dir: ScanDirection,
    grad_out: &[f64],
) -> (Vec<f64>, ScanParams) {
    let n = h * w;
    let s = params.state_size;
    let lines = dir.lines(h, w);
    let mut gx = vec![0.0; c * n];
    let per_channel: Vec<ChannelGrads> = gx
        .par_chunks_mut(n.max(1))
        .enumerate()
        .take(c)
        .map(|(ch, gplane)| {
            let plane = &data[ch * n..(ch + 1) * n];
            let go = &grad_out[ch * n..(ch + 1) * n];
            let cp = params.channel(ch);
            let mut g = ChannelGrads::zeros(s);
            let mut xs = Vec::new();
            let mut gys = Vec::new();
            let mut gxs = Vec::new();
            for line in &lines {
                xs.clear();
                xs.extend(line.iter().map(|&i| plane[i]));
                gys.clear();
                gys.extend(line.iter().map(|&i| go[i]));
                gxs.clear();
                gxs.resize(xs.len(), 0.0);
                scan_line_backward(&xs, cp, &gys, &mut gxs, &mut g);
                for (&i, &v) in line.iter().zip(&gxs) {
                    gplane[i] += v;
                }
            }
            g
        })
        .collect();

    let mut gp = ScanParams {
        channels: c,
        state_size: s,
        a_log: Vec::with_capacity(c * s),
        w_delta: Vec::with_capacity(c),
        b_delta: Vec::with_capacity(c),
        w_b: Vec::with_capacity(c * s),
        w_c: Vec::with_capacity(c * s),
        d_skip: Vec::with_capacity(c),
    };
    for g in per_channel {
        gp.a_log.extend(g.a_log);
        gp.w_b.extend(g.w_b);
        gp.w_c.extend(g.w_c);
        gp.w_delta.push(g.w_delta);
        gp.b_delta.push(g.b_delta);
        gp.d_skip.push(g.d_skip);
    }
    (gx, gp)
}

pub(crate) fn check_scan_inputs(features: &FeatureMap, params: &ScanParams) -> Result<()> {
    params.validate()?;
    if params.channels != features.channels() {
        return Err(crate::error::mismatch(
            format!("{} channels", features.channels()),
            format!("{} parameter channels", params.channels),
        ));
    }
    if !features.is_finite() {
        return Err(DgmError::NonFinite("scan features".into()));
    }
    Ok(())
}

/// Serializes every row or column in `direction`, scans each channel, and
/// writes results back in place.
pub fn directional_scan(features: &FeatureMap, params: &ScanParams, direction: ScanDirection) -> Result<FeatureMap> {
    check_scan_inputs(features, params)?;
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let out = directional_scan_raw(c, h, w, features.data(), params, direction);
    Ok(FeatureMap::from_raw(c, h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmamba::scan::selective_scan_1d;
    use crate::rng::{seeded, uniform_vec};

    fn mirror_x(f: &FeatureMap) -> FeatureMap {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let mut d = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in (0..w).rev() {
                    d.push(f.get(ch, y, x));
                }
            }
        }
        FeatureMap::new(c, h, w, d).unwrap()
    }

    fn mirror_y(f: &FeatureMap) -> FeatureMap {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let mut d = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in (0..h).rev() {
                for x in 0..w {
                    d.push(f.get(ch, y, x));
                }
            }
        }
        FeatureMap::new(c, h, w, d).unwrap()
    }

    #[test]
    fn unit_vectors_are_unit() {
        for d in ScanDirection::ALL {
            let (y, x) = d.unit_vector();
            assert_eq!(y * y + x * x, 1.0);
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let p = ScanParams::init(3, 4, &mut seeded(2));
        let z = FeatureMap::zeros(3, 4, 5);
        for d in ScanDirection::ALL {
            assert_eq!(directional_scan(&z, &p, d).unwrap(), z);
        }
    }

    #[test]
    fn single_row_left_right_is_plain_scan() {
        let mut rng = seeded(3);
        let p = ScanParams::init(1, 4, &mut rng);
        let x = uniform_vec(&mut rng, 9, -1.0, 1.0);
        let f = FeatureMap::new(1, 1, 9, x.clone()).unwrap();
        let out = directional_scan(&f, &p, ScanDirection::LeftRight).unwrap();
        assert_eq!(out.data(), selective_scan_1d(&x, &p, 0).unwrap().y.as_slice());
    }

    #[test]
    fn mirror_symmetry_is_exact() {
        let mut rng = seeded(4);
        let p = ScanParams::init(2, 3, &mut rng);
        let f = FeatureMap::new(2, 5, 6, uniform_vec(&mut rng, 60, -1.0, 1.0)).unwrap();
        let lr = directional_scan(&f, &p, ScanDirection::LeftRight).unwrap();
        let rl_m = mirror_x(&directional_scan(&mirror_x(&f), &p, ScanDirection::RightLeft).unwrap());
        assert_eq!(lr, rl_m);
        let tb = directional_scan(&f, &p, ScanDirection::TopBottom).unwrap();
        let bt_m = mirror_y(&directional_scan(&mirror_y(&f), &p, ScanDirection::BottomTop).unwrap());
        assert_eq!(tb, bt_m);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let p = ScanParams::init(2, 3, &mut seeded(4));
        assert!(directional_scan(&FeatureMap::zeros(3, 2, 2), &p, ScanDirection::TopBottom).is_err());
    }
}
