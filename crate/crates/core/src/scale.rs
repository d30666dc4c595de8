//! Relative scale between two pointmaps of the same view produced by
//! different forward passes.
//!
//! Each jointly valid pixel gets weight `w_x = C_a(x)·C_b(x)`, and the scale is
//! the closed-form minimiser of `Σ w_x ‖P_a(x) − s·P_b(x)‖²`:
//!
//! ```text
//! s = Σ w_x (P_a(x)·P_b(x)) / Σ w_x ‖P_b(x)‖²
//! ```
//!
//! The returned `s` multiplies `pm_b` (the later pass) to match `pm_a`.

use thiserror::Error;

use crate::two_view::LocalPointmap;

/// Minimum admissible `Σ w_x ‖P_b(x)‖²`.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScaleError {
    #[error("pointmaps have different shapes ({0}x{1} vs {2}x{3})")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no jointly valid pixel carries positive weight")]
    NoOverlap,
    #[error("weighted squared norm {0:e} of the second pointmap is below the guard")]
    DegenerateDenominator(f64),
    #[error("least-squares scale {0} is not positive")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaleOptions {
    /// Drop pixels whose pair weight is below this value.
    pub min_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFit {
    pub scale: f64,
    /// `Σ w_x` over the pixels that entered the fit.
    pub weight_mass: f64,
    pub pixels: usize,
}

/// Per-pixel weights `C_a(x)·C_b(x)`; zero where either map is invalid.
pub fn pair_confidence_weights(
    pm_a: &LocalPointmap,
    pm_b: &LocalPointmap,
) -> Result<Vec<f64>, ScaleError> {
    if !pm_a.same_shape(pm_b) {
        return Err(ScaleError::DimensionMismatch(
            pm_a.width(),
            pm_a.height(),
            pm_b.width(),
            pm_b.height(),
        ));
    }
    Ok((0..pm_a.len())
        .map(|i| {
            if pm_a.valid()[i] && pm_b.valid()[i] {
                pm_a.confidence()[i] * pm_b.confidence()[i]
            } else {
                0.0
            }
        })
        .collect())
}

pub fn relative_scale(pm_a: &LocalPointmap, pm_b: &LocalPointmap) -> Result<f64, ScaleError> {
    fit_relative_scale(pm_a, pm_b, &ScaleOptions::default()).map(|f| f.scale)
}

pub fn fit_relative_scale(
    pm_a: &LocalPointmap,
    pm_b: &LocalPointmap,
    options: &ScaleOptions,
) -> Result<ScaleFit, ScaleError> {
    let weights = pair_confidence_weights(pm_a, pm_b)?;
    let threshold = options.min_weight.unwrap_or(0.0);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut mass = 0.0;
    let mut pixels = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 || w < threshold {
            continue;
        }
        let a = &pm_a.points()[i];
        let b = &pm_b.points()[i];
        num += w * a.dot(b);
        den += w * b.norm_squared();
        mass += w;
        pixels += 1;
    }
    if pixels == 0 {
        return Err(ScaleError::NoOverlap);
    }
    if den <= DENOMINATOR_GUARD {
        return Err(ScaleError::DegenerateDenominator(den));
    }
    let scale = num / den;
    if !(scale > 0.0) {
        return Err(ScaleError::NonPositiveScale(scale));
    }
    Ok(ScaleFit {
        scale,
        weight_mass: mass,
        pixels,
    })
}

/// `Σ w_x ‖P_a(x) − s·P_b(x)‖²` for the given weights.
pub fn weighted_scale_objective(
    pm_a: &LocalPointmap,
    pm_b: &LocalPointmap,
    weights: &[f64],
    s: f64,
) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| w * (pm_a.points()[i] - pm_b.points()[i] * s).norm_squared())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, n: usize) -> LocalPointmap {
        let pts = (0..n)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..4.0)))
            .collect();
        let conf = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        LocalPointmap::from_points(pts, conf).unwrap()
    }

    #[test]
    fn weights_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 10);
        let ones = LocalPointmap::from_points(a.points().to_vec(), vec![1.0; 10]).unwrap();
        assert!(pair_confidence_weights(&ones, &ones).unwrap().iter().all(|w| *w == 1.0));

        let mut zeroed = ones.clone();
        zeroed.set_confidence(3, 0.0);
        let w = pair_confidence_weights(&zeroed, &ones).unwrap();
        assert_eq!(w[3], 0.0);
        assert_eq!(w[2], 1.0);

        let b = random_map(&mut rng, 10);
        let w = pair_confidence_weights(&a, &b).unwrap();
        for i in 0..10 {
            assert_eq!(w[i], a.confidence()[i] * b.confidence()[i]);
        }

        let short = random_map(&mut rng, 9);
        assert!(matches!(pair_confidence_weights(&a, &short), Err(ScaleError::DimensionMismatch(..))));
    }

    #[test]
    fn exact_scalings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_map(&mut rng, 30);
        let a = LocalPointmap::from_points(b.points().iter().map(|p| p * 2.0).collect(), vec![1.0; 30]).unwrap();
        let b1 = LocalPointmap::from_points(b.points().to_vec(), vec![1.0; 30]).unwrap();
        assert!((relative_scale(&a, &b1).unwrap() - 2.0).abs() < 1e-15);
        assert!((relative_scale(&b, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    /// Golden-section search on `[1e-3, 1e3]`; independent of the closed form.
    fn golden_section(f: impl Fn(f64) -> f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (1e-3, 1e3);
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..300 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = f(x2);
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn closed_form_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b = random_map(&mut rng, 40);
            let s_true = rng.random_range(0.05..20.0);
            let pts = b
                .points()
                .iter()
                .map(|p| p * s_true + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
                .collect();
            let conf = (0..40).map(|_| rng.random_range(0.1..3.0)).collect();
            let a = LocalPointmap::from_points(pts, conf).unwrap();
            let w = pair_confidence_weights(&a, &b).unwrap();
            let s = relative_scale(&a, &b).unwrap();
            let oracle = golden_section(|x| weighted_scale_objective(&a, &b, &w, x));
            assert!(((s - oracle) / oracle).abs() < 1e-6, "{s} vs {oracle}");
        }
    }

    #[test]
    fn optimality_under_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = random_map(&mut rng, 20);
            let b = LocalPointmap::from_points(
                a.points().iter().map(|p| p * 0.7 + Vector3::new(0.1, -0.2, 0.05)).collect(),
                vec![1.5; 20],
            )
            .unwrap();
            let w = pair_confidence_weights(&a, &b).unwrap();
            let s = relative_scale(&a, &b).unwrap();
            let f0 = weighted_scale_objective(&a, &b, &w, s);
            assert!(weighted_scale_objective(&a, &b, &w, s * (1.0 + 1e-3)) >= f0);
            assert!(weighted_scale_objective(&a, &b, &w, s * (1.0 - 1e-3)) >= f0);
        }
    }

    #[test]
    fn zero_weight_pixels_have_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 12);
        let b = random_map(&mut rng, 12);
        let b = LocalPointmap::from_points(
            b.points().iter().zip(a.points()).map(|(_, p)| p * 1.3 + Vector3::new(0.2, 0.0, 0.1)).collect(),
            b.confidence().to_vec(),
        )
        .unwrap();
        let mut a_zero = a.clone();
        a_zero.set_confidence(4, 0.0);
        let with_zero = relative_scale(&a_zero, &b).unwrap();

        let keep: Vec<usize> = (0..12).filter(|&i| i != 4).collect();
        let pick = |pm: &LocalPointmap| {
            LocalPointmap::from_points(
                keep.iter().map(|&i| pm.points()[i]).collect(),
                keep.iter().map(|&i| pm.confidence()[i]).collect(),
            )
            .unwrap()
        };
        let removed = relative_scale(&pick(&a), &pick(&b)).unwrap();
        assert!((with_zero - removed).abs() < 1e-15);
    }

    #[test]
    fn asymmetry_only_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_map(&mut rng, 25);
        let a = LocalPointmap::from_points(b.points().iter().map(|p| p * 3.0).collect(), b.confidence().to_vec()).unwrap();
        let s_ab = relative_scale(&a, &b).unwrap();
        let s_ba = relative_scale(&b, &a).unwrap();
        assert!((s_ab - 3.0).abs() < 1e-12);
        assert!((s_ab * s_ba - 1.0).abs() < 1e-12);

        let noisy = LocalPointmap::from_points(
            a.points().iter().map(|p| p + Vector3::new(rng.random_range(-0.5..0.5), 0.3, 0.0)).collect(),
            a.confidence().to_vec(),
        )
        .unwrap();
        let prod = relative_scale(&noisy, &b).unwrap() * relative_scale(&b, &noisy).unwrap();
        assert!((prod - 1.0).abs() > 1e-6);
    }

    #[test]
    fn degenerate_inputs() {
        let zero = LocalPointmap::from_points(vec![Vector3::zeros(); 4], vec![1.0; 4]).unwrap();
        let a = LocalPointmap::from_points(vec![Vector3::x(); 4], vec![1.0; 4]).unwrap();
        assert!(matches!(relative_scale(&a, &zero), Err(ScaleError::DegenerateDenominator(_))));
        let none = LocalPointmap::from_points(vec![Vector3::x(); 4], vec![0.0; 4]).unwrap();
        assert_eq!(relative_scale(&a, &none), Err(ScaleError::NoOverlap));
        let flipped = LocalPointmap::from_points(vec![-Vector3::x(); 4], vec![1.0; 4]).unwrap();
        assert!(matches!(relative_scale(&a, &flipped), Err(ScaleError::NonPositiveScale(_))));
    }

    #[test]
    fn threshold_drops_low_weight_pixels() {
        let b = LocalPointmap::from_points(vec![Vector3::x(), Vector3::y()], vec![1.0, 0.1]).unwrap();
        let a = LocalPointmap::from_points(vec![Vector3::x() * 2.0, Vector3::y() * 5.0], vec![1.0, 0.1]).unwrap();
        let all = fit_relative_scale(&a, &b, &ScaleOptions::default()).unwrap();
        assert_eq!(all.pixels, 2);
        let fit = fit_relative_scale(&a, &b, &ScaleOptions { min_weight: Some(0.5) }).unwrap();
        assert_eq!(fit.pixels, 1);
        assert!((fit.scale - 2.0).abs() < 1e-15);
        assert!((fit.weight_mass - 1.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn prop_fit_is_scale_equivariant_and_optimal(seed in 0u64..10_000, k in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, 40);
            let b = random_map(&mut rng, 40);
            let s = relative_scale(&a, &b).unwrap();
            let pts: Vec<_> = b.points().iter().map(|p| p * k).collect();
            let bk = LocalPointmap::from_points(pts, b.confidence().to_vec()).unwrap();
            let sk = relative_scale(&a, &bk).unwrap();
            proptest::prop_assert!((sk * k - s).abs() <= 1e-12 * s);
            let w = pair_confidence_weights(&a, &b).unwrap();
            let best = weighted_scale_objective(&a, &b, &w, s);
            for f in [0.999, 1.001] {
                proptest::prop_assert!(weighted_scale_objective(&a, &b, &w, s * f) >= best);
            }
        }
    }
}
