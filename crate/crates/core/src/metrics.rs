//! Segmentation metrics and the cost instrumentation behind the
//! linear-complexity checks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, DgmError, Result};
use crate::fields::{FeatureMap, LabelMask};
use crate::gmamba::{cascade_forward, CascadeConfig};
use crate::priors::make_priors;
use crate::rng::{seeded, uniform_vec};

/// `K×K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Adds every pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, ignore: u16) -> Result<()> {
        gt.ensure_dims(pred.height(), pred.width())?;
        gt.ensure_bounded(self.classes, Some(ignore))?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == ignore {
                continue;
            }
            if p as usize >= self.classes {
                return Err(DgmError::OutOfRange(format!("predicted label {p} with {} classes", self.classes)));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// ground truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let row: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Per-class IoU; `None` for classes excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl MiouReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let per_class: Vec<Option<f64>> = (0..cm.classes()).map(|c| cm.iou(c)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(DgmError::UndefinedMetric("no class occurs in prediction or ground truth".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { per_class, miou })
    }
}

/// Mean IoU over the classes present in `gt` or `pred`.
pub fn miou(pred: &LabelMask, gt: &LabelMask, classes: usize, ignore: u16) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, ignore)?;
    MiouReport::from_confusion(&cm)
}

/// Cost of one cascade evaluation at one resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub pixels: u64,
    pub madds: u64,
    /// Median wall time of five single-threaded runs.
    pub seconds: f64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "h,w,pixels,madds,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.6}", self.height, self.width, self.pixels, self.madds, self.seconds)
    }
}

const TIMING_RUNS: usize = 5;

/// Runs the cascade on seeded random features at each size. Multiply-add
/// counts are exact; wall times are the median of five runs on a private
/// single-thread pool, so they measure work rather than scheduling.
pub fn measure_scan_cost(config: &CascadeConfig, sizes: &[(usize, usize)], seed: u64) -> Result<Vec<CostReport>> {
    if sizes.is_empty() {
        return Err(DgmError::Config("no sizes to measure".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| DgmError::Config(format!("thread pool: {e}")))?;
    let c = config.channels;
    sizes
        .iter()
        .map(|&(h, w)| {
            if h < 3 || w < 3 {
                return Err(DgmError::TooSmall { height: h, width: w, min: 3 });
            }
            let mut rng = seeded(seed ^ ((h as u64) << 32) ^ w as u64);
            let features = FeatureMap::new(c, h, w, uniform_vec(&mut rng, c * h * w, -1.0, 1.0))?;
            let priors = make_priors(&LabelMask::from_fn(h, w, |y, x| u16::from(2 * x >= w) + u16::from(2 * y >= h)))?;
            let mut madds = None;
            let mut times = Vec::with_capacity(TIMING_RUNS);
            pool.install(|| -> Result<()> {
                cascade_forward(&features, config, &priors)?;
                for _ in 0..TIMING_RUNS {
                    let start = Instant::now();
                    let out = cascade_forward(&features, config, &priors)?;
                    times.push(start.elapsed().as_secs_f64());
                    match madds {
                        Some(m) if m != out.madds => {
                            return Err(mismatch(format!("{m} multiply-adds"), out.madds));
                        }
                        _ => madds = Some(out.madds),
                    }
                }
                Ok(())
            })?;
            times.sort_by(f64::total_cmp);
            Ok(CostReport {
                height: h,
                width: w,
                pixels: (h * w) as u64,
                madds: madds.expect("at least one run"),
                seconds: times[TIMING_RUNS / 2],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmamba::CascadeKind;
    use proptest::prelude::*;

    fn mask(rows: &[&[u16]]) -> LabelMask {
        LabelMask::from_rows(rows).unwrap()
    }

    #[test]
    fn miou_examples() {
        let gt = mask(&[&[0, 0], &[1, 1]]);
        assert_eq!(miou(&gt, &gt, 2, 255).unwrap().miou, 1.0);

        let a = mask(&[&[1, 1], &[0, 0]]);
        let b = mask(&[&[0, 0], &[1, 1]]);
        assert_eq!(miou(&a, &b, 2, 255).unwrap().miou, 0.0);

        let pred = mask(&[&[0, 1], &[1, 1]]);
        let r = miou(&pred, &gt, 2, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = mask(&[&[0, 2]]);
        let r = miou(&gt, &gt, 4, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let gt = mask(&[&[0, 255], &[1, 255]]);
        let pred = mask(&[&[0, 1], &[1, 0]]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt, 255).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(miou(&pred, &gt, 2, 255).unwrap().miou, 1.0);
        let all_ignored = mask(&[&[255]]);
        assert!(matches!(miou(&mask(&[&[0]]), &all_ignored, 2, 255), Err(DgmError::UndefinedMetric(_))));
    }

    #[test]
    fn shape_and_range_errors() {
        assert!(miou(&mask(&[&[0, 1]]), &mask(&[&[0], &[1]]), 2, 255).is_err());
        assert!(miou(&mask(&[&[3]]), &mask(&[&[0]]), 2, 255).is_err());
        assert!(miou(&mask(&[&[0]]), &mask(&[&[3]]), 2, 255).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_total(
            labels in proptest::collection::vec((0u16..4, 0u16..4), 12),
            perm in Just(vec![0u16, 1, 2, 3]).prop_shuffle(),
        ) {
            let pred = LabelMask::new(3, 4, labels.iter().map(|p| p.0).collect()).unwrap();
            let gt = LabelMask::new(3, 4, labels.iter().map(|p| p.1).collect()).unwrap();
            let relabel = |m: &LabelMask| LabelMask::new(3, 4, m.labels().iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let a = miou(&pred, &gt, 4, 255).unwrap().miou;
            let b = miou(&relabel(&pred), &relabel(&gt), 4, 255).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-12);
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pred, &gt, 255).unwrap();
            prop_assert_eq!(cm.total(), 12);
        }
    }

    #[test]
    fn cost_counts_scale_linearly() {
        let cfg = CascadeConfig::init(2, 2, CascadeKind::Cascade, &mut seeded(1));
        let r = measure_scan_cost(&cfg, &[(16, 16), (16, 32), (32, 32)], 3).unwrap();
        assert_eq!(r[1].madds, 2 * r[0].madds);
        assert_eq!(r[2].madds, 4 * r[0].madds);
        assert_eq!(r[0].pixels, 256);
        let again = measure_scan_cost(&cfg, &[(16, 16)], 3).unwrap();
        assert_eq!(again[0].madds, r[0].madds);
        assert!(measure_scan_cost(&cfg, &[], 3).is_err());
    }
}
