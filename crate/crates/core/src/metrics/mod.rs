//! Sample-set quality metrics: dataset similarity, intra-sample diversity
//! and its nearest-neighbour variant, Laplacian sharpness, and
//! reconstruction error.
//!
//! Every pairwise distance is the per-pixel mean squared difference
//! `(1/(H·W))·‖a − b‖²`, and set-level scores average over both indices.
//! Inputs must lie in `[0, 1]`. All results are `f64` whatever the image
//! scalar type.

mod pairwise;

use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::Scalar;

use pairwise::{mean_sq_dist, row_stats};

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("cannot summarize an empty list"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub mse_mean: f64,
    pub mse_std: f64,
    pub laplace_originals: Summary,
    pub laplace_reconstructions: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_similarity: f64,
    pub isd: f64,
    pub min_isd: f64,
    pub laplace: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconstructionReport>,
    pub n_samples: usize,
    pub n_originals: usize,
}

fn check_set<T: Scalar>(set: &ImageSet<T>, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(invalid(format!("{what} set is empty")));
    }
    set.validate_unit_range().map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{what}: {m}")),
        other => other,
    })
}

fn check_pair<T: Scalar>(a: &ImageSet<T>, b: &ImageSet<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} images vs {}x{} images",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn check_diversity_input<T: Scalar>(samples: &ImageSet<T>) -> Result<()> {
    check_set(samples, "samples")?;
    if samples.len() < 2 {
        return Err(invalid(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    Ok(())
}

/// Mean per-pixel squared distance over every (sample, original) pair.
pub fn dataset_similarity<T: Scalar>(samples: &ImageSet<T>, originals: &ImageSet<T>) -> Result<f64> {
    check_set(samples, "samples")?;
    check_set(originals, "originals")?;
    check_pair(samples, originals)?;
    let rows = row_stats(samples.pixels(), originals.pixels(), samples.pixels_per_image(), false);
    let total: f64 = rows.iter().map(|r| r.sum).sum();
    Ok(total / (samples.len() * originals.len()) as f64)
}

/// Mean per-pixel squared distance over every ordered pair of distinct
/// samples.
pub fn intra_sample_diversity<T: Scalar>(samples: &ImageSet<T>) -> Result<f64> {
    check_diversity_input(samples)?;
    let n = samples.len();
    let rows = row_stats(samples.pixels(), samples.pixels(), samples.pixels_per_image(), true);
    let total: f64 = rows.iter().map(|r| r.sum).sum();
    Ok(total / (n * (n - 1)) as f64)
}

/// Mean distance from each sample to its nearest other sample.
pub fn min_intra_sample_diversity<T: Scalar>(samples: &ImageSet<T>) -> Result<f64> {
    check_diversity_input(samples)?;
    let rows = row_stats(samples.pixels(), samples.pixels(), samples.pixels_per_image(), true);
    Ok(rows.iter().map(|r| r.min).sum::<f64>() / samples.len() as f64)
}

/// Both diversity scores from a single pass.
pub fn diversity<T: Scalar>(samples: &ImageSet<T>) -> Result<(f64, f64)> {
    check_diversity_input(samples)?;
    let n = samples.len();
    let rows = row_stats(samples.pixels(), samples.pixels(), samples.pixels_per_image(), true);
    let isd = rows.iter().map(|r| r.sum).sum::<f64>() / (n * (n - 1)) as f64;
    let min_isd = rows.iter().map(|r| r.min).sum::<f64>() / n as f64;
    Ok((isd, min_isd))
}

/// Population variance of the valid-region response to the four-neighbour
/// Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
pub fn laplace_sharpness<T: Scalar>(image: &[T], height: usize, width: usize) -> Result<f64> {
    if image.len() != height * width {
        return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", image.len())));
    }
    if height < 3 || width < 3 {
        return Err(invalid(format!("Laplacian needs at least 3x3 pixels, got {height}x{width}")));
    }
    let px = |y: usize, x: usize| image[y * width + x].as_f64();
    let count = ((height - 2) * (width - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let r = px(y - 1, x) + px(y + 1, x) + px(y, x - 1) + px(y, x + 1) - 4.0 * px(y, x);
            sum += r;
            sum_sq += r * r;
        }
    }
    let mean = sum / count;
    Ok((sum_sq / count - mean * mean).max(0.0))
}

/// Per-image Laplacian sharpness of every image in the set.
pub fn laplace_scores<T: Scalar>(set: &ImageSet<T>) -> Result<Vec<f64>> {
    set.images().map(|img| laplace_sharpness(img, set.height(), set.width())).collect()
}

/// Mean and population standard deviation of the sharpness over a set.
pub fn laplace_aggregate<T: Scalar>(set: &ImageSet<T>) -> Result<Summary> {
    check_set(set, "image")?;
    Summary::of(&laplace_scores(set)?)
}

/// Per-pair reconstruction error plus the sharpness of both sets.
pub fn reconstruction_eval<T: Scalar>(
    originals: &ImageSet<T>,
    reconstructions: &ImageSet<T>,
) -> Result<ReconstructionReport> {
    check_set(originals, "originals")?;
    check_set(reconstructions, "reconstructions")?;
    check_pair(originals, reconstructions)?;
    if originals.len() != reconstructions.len() {
        return Err(invalid(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let errors: Vec<f64> = originals
        .images()
        .zip(reconstructions.images())
        .map(|(a, b)| mean_sq_dist(a, b))
        .collect();
    let mse = Summary::of(&errors)?;
    Ok(ReconstructionReport {
        mse_mean: mse.mean,
        mse_std: mse.std,
        laplace_originals: laplace_aggregate(originals)?,
        laplace_reconstructions: laplace_aggregate(reconstructions)?,
    })
}

/// Every metric in one report. An absent or empty reconstruction set leaves
/// the reconstruction section out; otherwise it is paired image by image
/// with `originals`.
pub fn evaluate_all<T: Scalar>(
    samples: &ImageSet<T>,
    originals: &ImageSet<T>,
    reconstructions: Option<&ImageSet<T>>,
) -> Result<MetricReport> {
    let dataset_similarity = dataset_similarity(samples, originals)?;
    let (isd, min_isd) = diversity(samples)?;
    let laplace = laplace_aggregate(samples)?;
    let reconstruction = match reconstructions {
        Some(r) if !r.is_empty() => Some(reconstruction_eval(originals, r)?),
        _ => None,
    };
    Ok(MetricReport {
        dataset_similarity,
        isd,
        min_isd,
        laplace,
        reconstruction,
        n_samples: samples.len(),
        n_originals: originals.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(h: usize, w: usize, px: Vec<f64>) -> ImageSet<f64> {
        ImageSet::new(h, w, px).unwrap()
    }

    #[test]
    fn dataset_similarity_examples() {
        let a = set(2, 2, vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(dataset_similarity(&a, &a).unwrap(), 0.0);
        let zero = set(2, 2, vec![0.0; 4]);
        let one = set(2, 2, vec![1.0; 4]);
        assert_eq!(dataset_similarity(&zero, &one).unwrap(), 1.0);
        let other = set(1, 4, vec![0.0; 4]);
        assert!(matches!(dataset_similarity(&zero, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn diversity_examples() {
        let two = set(1, 1, vec![0.0, 1.0]);
        assert_eq!(intra_sample_diversity(&two).unwrap(), 1.0);
        let three = set(1, 1, vec![0.0, 0.1, 1.0]);
        let m = min_intra_sample_diversity(&three).unwrap();
        assert!((m - (0.01 + 0.01 + 0.81) / 3.0).abs() < 1e-15);
        assert!((m - 0.2767).abs() < 1e-4);
        let same = set(1, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]);
        assert_eq!(diversity(&same).unwrap(), (0.0, 0.0));
        let single = set(1, 1, vec![0.5]);
        assert!(matches!(intra_sample_diversity(&single), Err(Error::InvalidInput(_))));
        assert!(matches!(min_intra_sample_diversity(&single), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn laplace_examples() {
        assert_eq!(laplace_sharpness(&[0.4; 16], 4, 4).unwrap(), 0.0);
        let mut spike = vec![0.0; 25];
        spike[12] = 1.0;
        let v = laplace_sharpness(&spike, 5, 5).unwrap();
        assert!((v - 20.0 / 9.0).abs() < 1e-12);
        assert!(matches!(laplace_sharpness(&[0.0; 4], 2, 2), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let bad = set(1, 2, vec![0.0, 1.5, 0.2, 0.3]);
        let ok = set(1, 2, vec![0.0, 1.0, 0.2, 0.3]);
        assert!(intra_sample_diversity(&bad).is_err());
        assert!(dataset_similarity(&ok, &bad).is_err());
        assert!(dataset_similarity(&ok, &ok).is_ok());
    }

    #[test]
    fn reconstruction_examples() {
        let a = set(3, 3, (0..18).map(|i| i as f64 / 20.0).collect());
        let r = reconstruction_eval(&a, &a).unwrap();
        assert_eq!((r.mse_mean, r.mse_std), (0.0, 0.0));
        let short = a.select(&[0]);
        assert!(matches!(reconstruction_eval(&a, &short), Err(Error::InvalidInput(_))));

        // constant 0.3 image against its +0.9 shift clipped to 1.0
        let c = set(3, 3, vec![0.3; 9]);
        let shifted = set(3, 3, vec![1.0; 9]);
        let r = reconstruction_eval(&c, &shifted).unwrap();
        assert!((r.mse_mean - 0.49).abs() < 1e-15);
        assert_eq!(r.mse_std, 0.0);
    }

    #[test]
    fn report_json_shape() {
        let a = set(3, 3, (0..27).map(|i| i as f64 / 30.0).collect());
        let r = evaluate_all(&a, &a, None).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v.get("reconstruction").is_none());
        assert!(v["laplace"]["mean"].is_number());
        assert_eq!(v["n_samples"], 3);
        let empty = ImageSet::<f64>::new(3, 3, vec![]).unwrap();
        assert!(evaluate_all(&a, &a, Some(&empty)).unwrap().reconstruction.is_none());
        let with = evaluate_all(&a, &a, Some(&a)).unwrap();
        let v = serde_json::to_value(&with).unwrap();
        assert_eq!(v["reconstruction"]["mse_mean"], 0.0);
    }
}
