//! Synthetic datasets with analytic structure.
//!
//! Gaussian mixtures give closed-form densities and posterior means; labels
//! are component ids. Grid patterns are tiny class-indexed stripe images in
//! `[−1, 1]` used to exercise clipping and translation augmentation.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Isotropic Gaussian mixture with a shared component standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Array2<f64>,
    comp_std: f64,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, comp_std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.nrows() {
            return Err(Error::config(format!(
                "{} weights for {} component means",
                weights.len(),
                means.nrows()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}")));
        }
        if !(comp_std > 0.0) || !comp_std.is_finite() {
            return Err(Error::config(format!(
                "component std must be positive, got {comp_std}"
            )));
        }
        if means.ncols() == 0 {
            return Err(Error::config("mixture dimension must be at least 1"));
        }
        Ok(Self {
            weights,
            means,
            comp_std,
        })
    }

    /// `n` equally weighted components evenly spaced on a circle in the first
    /// two coordinates of a `dim`-dimensional space.
    pub fn circle(n: usize, dim: usize, radius: f64, comp_std: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if dim < 2 && n > 2 {
            return Err(Error::config("circle layout needs dim >= 2"));
        }
        let means = Array2::from_shape_fn((n, dim), |(i, j)| {
            let angle = 2.0 * PI * i as f64 / n as f64;
            match j {
                0 if dim == 1 => {
                    if i % 2 == 0 {
                        radius
                    } else {
                        -radius
                    }
                }
                0 => radius * angle.cos(),
                1 => radius * angle.sin(),
                _ => 0.0,
            }
        });
        Self::new(vec![1.0 / n as f64; n], means, comp_std)
    }

    /// Eight components on a circle of radius 2 in 2-D with std 0.1.
    pub fn benchmark() -> Self {
        Self::circle(8, 2, 2.0, 0.1).expect("benchmark mixture is valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn comp_std(&self) -> f64 {
        self.comp_std
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Draws a component index from the mixture weights.
    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// `E ‖x − E x‖²`, the trace of the mixture covariance.
    pub fn total_variance(&self) -> f64 {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(self.means.rows()) {
            for j in 0..d {
                mean[j] += w * m[j];
            }
        }
        let spread: f64 = self
            .weights
            .iter()
            .zip(self.means.rows())
            .map(|(w, m)| w * (0..d).map(|j| (m[j] - mean[j]).powi(2)).sum::<f64>())
            .sum();
        spread + d as f64 * self.comp_std.powi(2)
    }

    /// Same mixture with components reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let weights = perm.iter().map(|&i| self.weights[i]).collect();
        let means = Array2::from_shape_fn(self.means.dim(), |(i, j)| self.means[[perm[i], j]]);
        Self::new(weights, means, self.comp_std)
    }
}

/// How the columns of a batch are arranged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataLayout {
    Points,
    Grid { side: usize },
}

/// A batch of clean data with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub x: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    /// `true` where the item's class was dropped for guidance training.
    pub class_mask: Vec<bool>,
    pub layout: DataLayout,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Labels as seen by a network: dropped or missing labels become `null`.
    pub fn effective_labels(&self, null: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => l
                .iter()
                .zip(&self.class_mask)
                .map(|(&c, &dropped)| if dropped { null } else { c })
                .collect(),
            None => vec![null; self.len()],
        }
    }
}

pub fn gmm_sample<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> DataBatch {
    let d = spec.dim();
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = spec.sample_label(rng);
        labels.push(c);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            x[[i, j]] = spec.means[[c, j]] + spec.comp_std * e;
        }
    }
    DataBatch {
        x,
        labels: Some(labels),
        class_mask: vec![false; n],
        layout: DataLayout::Points,
    }
}

/// `log Σ_i π_i N(x; μ_i, s² I)` via max-stabilised log-sum-exp.
pub fn gmm_log_density(spec: &GmmSpec, x: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != spec.dim() {
        return Err(Error::shape(format!(
            "point has {} coordinates, mixture has {}",
            x.len(),
            spec.dim()
        )));
    }
    let d = spec.dim() as f64;
    let var = spec.comp_std.powi(2);
    let norm = -0.5 * d * (2.0 * PI * var).ln();
    let logs: Vec<f64> = spec
        .weights
        .iter()
        .zip(spec.means.rows())
        .map(|(w, m)| {
            let sq: f64 = x.iter().zip(m.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            w.ln() + norm - 0.5 * sq / var
        })
        .collect();
    Ok(log_sum_exp(&logs))
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Class-indexed stripe images.
///
/// Class `c` has stripes along rows for even `c` and along columns for odd
/// `c`, with `1 + c / 2` cycles across the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPatternSpec {
    pub side: usize,
    pub n_classes: usize,
}

impl GridPatternSpec {
    pub fn new(side: usize, n_classes: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::config(format!("grid side must be >= 2, got {side}")));
        }
        if n_classes == 0 || n_classes > side {
            return Err(Error::config(format!(
                "grid supports 1..={side} classes, got {n_classes}"
            )));
        }
        Ok(Self { side, n_classes })
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn pattern(&self, class: usize) -> Vec<f64> {
        let cycles = (1 + class / 2) as f64;
        let side = self.side as f64;
        let mut out = Vec::with_capacity(self.dim());
        for r in 0..self.side {
            for c in 0..self.side {
                let k = if class.is_multiple_of(2) { r } else { c } as f64;
                out.push((2.0 * PI * cycles * k / side).cos());
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DataBatch {
        let mut x = Array2::zeros((n, self.dim()));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = rng.random_range(0..self.n_classes);
            labels.push(c);
            x.row_mut(i).assign(&ArrayView1::from(&self.pattern(c)[..]));
        }
        DataBatch {
            x,
            labels: Some(labels),
            class_mask: vec![false; n],
            layout: DataLayout::Grid { side: self.side },
        }
    }

    /// The pattern distribution as a mixture of near point masses, so the
    /// analytic denoiser applies to it.
    pub fn as_mixture(&self) -> GmmSpec {
        let d = self.dim();
        let mut means = Array2::zeros((self.n_classes, d));
        for c in 0..self.n_classes {
            means
                .row_mut(c)
                .assign(&ArrayView1::from(&self.pattern(c)[..]));
        }
        GmmSpec::new(vec![1.0 / self.n_classes as f64; self.n_classes], means, 1e-4)
            .expect("patterns form a valid mixture")
    }
}

/// Cyclic shift of one `side × side` image by `(dy, dx)`.
pub fn translate_grid(img: &[f64], side: usize, dy: isize, dx: isize) -> Vec<f64> {
    let s = side as isize;
    let mut out = vec![0.0; img.len()];
    for r in 0..s {
        for c in 0..s {
            let rr = (r + dy).rem_euclid(s);
            let cc = (c + dx).rem_euclid(s);
            out[(rr * s + cc) as usize] = img[(r * s + c) as usize];
        }
    }
    out
}

/// With probability `prob` per item, shifts the image cyclically by offsets
/// drawn uniformly from `[−max_shift, max_shift]²`.
pub fn augment_translate<R: Rng + ?Sized>(
    batch: &DataBatch,
    prob: f64,
    max_shift: usize,
    rng: &mut R,
) -> Result<DataBatch> {
    let DataLayout::Grid { side } = batch.layout else {
        return Err(Error::config("translation augmentation needs grid data"));
    };
    let mut out = batch.clone();
    let m = max_shift as i64;
    for i in 0..batch.len() {
        if rng.random::<f64>() < prob {
            let dy = rng.random_range(-m..=m) as isize;
            let dx = rng.random_range(-m..=m) as isize;
            let row: Vec<f64> = batch.x.row(i).to_vec();
            let shifted = translate_grid(&row, side, dy, dx);
            out.x.row_mut(i).assign(&ArrayView1::from(&shifted[..]));
        }
    }
    Ok(out)
}

/// Marks each item's class as dropped with probability `prob`. Never looks
/// at `x`.
pub fn drop_class_labels<R: Rng + ?Sized>(batch: &DataBatch, prob: f64, rng: &mut R) -> DataBatch {
    let mut out = batch.clone();
    for m in out.class_mask.iter_mut() {
        *m = *m || rng.random::<f64>() < prob;
    }
    out
}

/// A training distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Gmm(GmmSpec),
    Grid(GridPatternSpec),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Gmm(g) => g.dim(),
            Dataset::Grid(g) => g.dim(),
        }
    }

    /// Number of distinct labels the data carries.
    pub fn n_labels(&self) -> usize {
        match self {
            Dataset::Gmm(g) => g.n_components(),
            Dataset::Grid(g) => g.n_classes,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DataBatch {
        match self {
            Dataset::Gmm(g) => gmm_sample(g, n, rng),
            Dataset::Grid(g) => g.sample(n, rng),
        }
    }

    /// Mixture whose analytic posterior mean serves as the reference
    /// denoiser.
    pub fn oracle_mixture(&self) -> GmmSpec {
        match self {
            Dataset::Gmm(g) => g.clone(),
            Dataset::Grid(g) => g.as_mixture(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::array;

    #[test]
    fn gmm_validation() {
        assert!(GmmSpec::new(vec![0.5, 0.6], Array2::zeros((2, 2)), 1.0).is_err());
        assert!(GmmSpec::new(vec![1.0], Array2::zeros((1, 2)), 0.0).is_err());
        assert!(GmmSpec::new(vec![0.0, 1.0], Array2::zeros((2, 2)), 1.0).is_err());
        assert!(GmmSpec::new(vec![1.0], Array2::zeros((2, 2)), 1.0).is_err());
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let spec = GmmSpec::new(vec![1.0], Array2::zeros((1, 2)), 1.0).unwrap();
        let v = gmm_log_density(&spec, array![0.0, 0.0].view()).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.837_877_1).abs() < 1e-7);
    }

    #[test]
    fn far_tail_is_finite() {
        let spec = GmmSpec::benchmark();
        let v = gmm_log_density(&spec, array![1e3, -1e3].view()).unwrap();
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn point_mass_limit() {
        let spec = GmmSpec::circle(4, 2, 1.0, 1e-300).unwrap();
        let b = gmm_sample(&spec, 50, &mut seeded_rng(4));
        for (row, &c) in b.x.rows().into_iter().zip(b.labels.as_ref().unwrap()) {
            assert!((row[0] - spec.means()[[c, 0]]).abs() < 1e-12);
            assert!((row[1] - spec.means()[[c, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_translation_properties() {
        let g = GridPatternSpec::new(4, 3).unwrap();
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(translate_grid(&img, 4, 4, 0), img);
        assert_eq!(translate_grid(&img, 4, 0, -4), img);
        let mut shifted = translate_grid(&img, 4, 1, 3);
        shifted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(shifted, img);
        let b = g.sample(10, &mut seeded_rng(1));
        let same = augment_translate(&b, 0.0, 2, &mut seeded_rng(2)).unwrap();
        assert_eq!(same, b);
        let moved = augment_translate(&b, 1.0, 2, &mut seeded_rng(2)).unwrap();
        assert_eq!(moved.labels, b.labels);
        for i in 0..b.len() {
            let mut a = b.x.row(i).to_vec();
            let mut m = moved.x.row(i).to_vec();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            m.sort_by(|p, q| p.partial_cmp(q).unwrap());
            assert_eq!(a, m);
        }
    }

    #[test]
    fn translation_rejects_point_data() {
        let b = gmm_sample(&GmmSpec::benchmark(), 3, &mut seeded_rng(0));
        assert!(matches!(
            augment_translate(&b, 0.5, 1, &mut seeded_rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_patterns_are_in_range_and_distinct() {
        let g = GridPatternSpec::new(8, 8).unwrap();
        let pats: Vec<Vec<f64>> = (0..8).map(|c| g.pattern(c)).collect();
        for p in &pats {
            assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(pats[i], pats[j]);
            }
        }
    }

    #[test]
    fn label_drop_extremes() {
        let b = gmm_sample(&GmmSpec::benchmark(), 100, &mut seeded_rng(3));
        let none = drop_class_labels(&b, 0.0, &mut seeded_rng(1));
        assert!(none.class_mask.iter().all(|m| !m));
        let all = drop_class_labels(&b, 1.0, &mut seeded_rng(1));
        assert!(all.class_mask.iter().all(|&m| m));
        assert!(all.effective_labels(8).iter().all(|&c| c == 8));
    }

    #[test]
    fn total_variance_of_benchmark() {
        // Circle of radius 2 contributes r² = 4, plus 2 s².
        assert!((GmmSpec::benchmark().total_variance() - (4.0 + 0.02)).abs() < 1e-12);
    }
}
