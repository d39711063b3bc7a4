use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SqError};
use crate::matrix::Matrix;

/// Parameters of a synthetic linear layer with per-channel activation outliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub k: usize,
    pub n: usize,
    /// Rows in each of the calibration and evaluation batches.
    pub m: usize,
    pub outlier_frac: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayer {
    /// `K × N`, entries drawn from `N(0, 1/√K)`.
    pub w: Matrix,
    pub calib: Matrix,
    pub eval: Matrix,
    /// Sorted indices of the amplified channels.
    pub outlier_channels: Vec<usize>,
}

/// Draws a layer whose activations are `N(0, 1)` except for
/// `⌈outlier_frac·K⌉` channels scaled by `outlier_scale`.
pub fn gen_synthetic_layer(spec: &SynthSpec) -> Result<SyntheticLayer> {
    let SynthSpec {
        k,
        n,
        m,
        outlier_frac,
        outlier_scale,
        seed,
    } = *spec;
    if k == 0 || n == 0 || m == 0 {
        return Err(SqError::param("layer dimensions must be positive"));
    }
    if !(0.0..1.0).contains(&outlier_frac) {
        return Err(SqError::param(format!(
            "outlier fraction must be in [0, 1), got {outlier_frac}"
        )));
    }
    if !outlier_scale.is_finite() || outlier_scale <= 0.0 {
        return Err(SqError::param(format!(
            "outlier scale must be positive, got {outlier_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_dist = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
    let a_dist = Normal::new(0.0, 1.0).expect("valid std");

    let w = Matrix::from_fn(k, n, |_, _| w_dist.sample(&mut rng));
    let n_outliers = (outlier_frac * k as f64).ceil() as usize;
    let mut outlier_channels = index::sample(&mut rng, k, n_outliers).into_vec();
    outlier_channels.sort_unstable();
    let mut gain = vec![1.0; k];
    for &c in &outlier_channels {
        gain[c] = outlier_scale;
    }
    let draw = |rng: &mut ChaCha8Rng| Matrix::from_fn(m, k, |_, c| a_dist.sample(rng) * gain[c]);
    let calib = draw(&mut rng);
    let eval = draw(&mut rng);
    Ok(SyntheticLayer {
        w,
        calib,
        eval,
        outlier_channels,
    })
}
