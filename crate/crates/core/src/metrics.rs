//! Evaluation metrics: angular error in arcmin, labeled Euclidean error
//! over glint sets, quartiles and summary statistics.

use serde::{Deserialize, Serialize};

use crate::geometry::{Point2, UnitVec3};

/// Angular error between two unit directions, arcmin (60 arcmin = 1°).
pub fn angular_error_arcmin(a: &UnitVec3, b: &UnitVec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees() * 60.0
}

/// Labeled Euclidean error over glint sets: the sum of per-label distances
/// between truth and prediction over mutually present pairs, plus the
/// count of label slots excluded because either side was absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledError {
    pub sum_px: f64,
    pub compared: usize,
    pub excluded: usize,
}

pub fn labeled_euclidean_error(
    truth: &[Option<Point2>],
    predicted: &[Option<Point2>],
) -> LabeledError {
    assert_eq!(truth.len(), predicted.len(), "label sets must align");
    let mut sum_px = 0.0;
    let mut compared = 0;
    let mut excluded = 0;
    for (t, p) in truth.iter().zip(predicted) {
        match (t, p) {
            (Some(t), Some(p)) => {
                sum_px += t.distance(p);
                compared += 1;
            }
            (None, None) => {}
            _ => excluded += 1,
        }
    }
    LabeledError { sum_px, compared, excluded }
}

/// Summary statistics of an error sample: mean, standard deviation and the
/// three quartiles (linear interpolation on the sorted sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl SampleStats {
    pub fn from_values(values: &[f64]) -> Option<SampleStats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite error values"));
        Some(SampleStats {
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: sorted[0],
            max: *sorted.last().expect("nonempty"),
            q1: quantile(&sorted, 0.25),
            q2: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
        })
    }
}

/// Linear-interpolation quantile of an ascending-sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Fixed-width histogram with an inclusive overflow in the last bin, so
/// counts always sum to the sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn collect(values: &[f64], bin_width: f64, bins: usize) -> Histogram {
        let mut counts = vec![0u64; bins];
        for &v in values {
            let idx = ((v / bin_width).floor() as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Histogram { bin_width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_directions_have_zero_error() {
        // acos near 1.0 floors at ~1e-8 rad; zero within float.
        let a = UnitVec3::from_components(0.1, -0.2, -1.0).unwrap();
        assert!(angular_error_arcmin(&a, &a) < 2e-3);
    }

    #[test]
    fn perpendicular_is_5400_arcmin() {
        let a = UnitVec3::from_components(1.0, 0.0, 0.0).unwrap();
        let b = UnitVec3::from_components(0.0, 1.0, 0.0).unwrap();
        assert!((angular_error_arcmin(&a, &b) - 5400.0).abs() < 1e-9);
    }

    #[test]
    fn one_degree_is_sixty_arcmin() {
        let a = UnitVec3::from_components(0.0, 0.0, 1.0).unwrap();
        let rad = 1.0_f64.to_radians();
        let b = UnitVec3::from_components(rad.sin(), 0.0, rad.cos()).unwrap();
        assert!((angular_error_arcmin(&a, &b) - 60.0).abs() < 1e-6);
    }

    #[test]
    fn lee_identical_sets_are_zero() {
        let glints = [Some(Point2::new(1.0, 2.0)), Some(Point2::new(3.0, 4.0)), None, None];
        let lee = labeled_euclidean_error(&glints, &glints);
        assert_eq!(lee.sum_px, 0.0);
        assert_eq!(lee.compared, 2);
        assert_eq!(lee.excluded, 0);
    }

    #[test]
    fn lee_three_four_five() {
        let truth: Vec<Option<Point2>> = (0..4)
            .map(|i| Some(Point2::new(100.0 * i as f64, 50.0)))
            .collect();
        let predicted: Vec<Option<Point2>> = truth
            .iter()
            .map(|p| p.map(|p| Point2::new(p.u + 3.0, p.v + 4.0)))
            .collect();
        let lee = labeled_euclidean_error(&truth, &predicted);
        assert_eq!(lee.sum_px, 20.0);
    }

    #[test]
    fn lee_swapped_labels_pay_double_distance() {
        let a = Point2::new(100.0, 100.0);
        let b = Point2::new(160.0, 180.0);
        let truth = [Some(a), Some(b)];
        let swapped = [Some(b), Some(a)];
        let lee = labeled_euclidean_error(&truth, &swapped);
        assert!((lee.sum_px - 2.0 * a.distance(&b)).abs() < 1e-12);
    }

    #[test]
    fn lee_counts_absence_mismatches() {
        let truth = [Some(Point2::new(1.0, 1.0)), Some(Point2::new(2.0, 2.0))];
        let predicted = [Some(Point2::new(1.0, 1.0)), None];
        let lee = labeled_euclidean_error(&truth, &predicted);
        assert_eq!(lee.compared, 1);
        assert_eq!(lee.excluded, 1);
    }

    #[test]
    fn stats_quartiles_are_ordered() {
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let stats = SampleStats::from_values(&values).unwrap();
        assert!(stats.q1 <= stats.q2 && stats.q2 <= stats.q3);
        assert!(stats.min <= stats.q1 && stats.q3 <= stats.max);
    }

    #[test]
    fn histogram_conserves_counts() {
        let values = vec![0.5, 1.5, 2.5, 99.0, 1000.0];
        let hist = Histogram::collect(&values, 10.0, 8);
        assert_eq!(hist.total(), 5);
        assert_eq!(hist.counts[0], 3);
        // 99 and 1000 both overflow into the last bin.
        assert_eq!(*hist.counts.last().unwrap(), 2);
    }
}
