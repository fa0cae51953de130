//! Synthetic feature sets with class structure, for tests and demos.
//!
//! Each class places parts from a shared dictionary at fixed grid positions.
//! A sample draws its patches as part vectors plus Gaussian noise, with a few
//! positions replaced by a background vector. The global token is the mean
//! patch plus a class offset. Views are independent noise draws of the same
//! sample, which plays the role of augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::featstore::{FeatureSet, Labels};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_t: usize,
    pub n_views: usize,
    pub grid: (usize, usize),
    /// Size of the shared part dictionary.
    pub n_parts: usize,
    /// Standard deviation of per-token noise.
    pub noise: f64,
    /// Probability that a patch shows background instead of its part.
    pub background: f64,
    /// Seeds the class layout; samples are drawn from `seed + 1`.
    pub seed: u64,
    /// Draw the class layout from this seed instead, so that train and eval
    /// sets share classes.
    pub layout_seed: Option<u64>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            n_samples: 256,
            n_classes: 8,
            d_t: 32,
            n_views: 2,
            grid: (4, 4),
            n_parts: 16,
            noise: 0.5,
            background: 0.2,
            seed: 0,
            layout_seed: None,
        }
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect()
}

/// Labels cycle through the classes, so every class has `n / C` or one more
/// samples.
pub fn gaussian_clusters(spec: &ClusterSpec) -> Result<FeatureSet> {
    if spec.n_classes == 0 || spec.n_parts == 0 {
        return Err(invalid("n_classes and n_parts must be nonzero"));
    }
    if !(spec.noise >= 0.0) || !(0.0..=1.0).contains(&spec.background) {
        return Err(invalid("noise must be non-negative and background in [0, 1]"));
    }
    let d = spec.d_t;
    let np = spec.grid.0 * spec.grid.1;
    let mut layout = ChaCha8Rng::seed_from_u64(spec.layout_seed.unwrap_or(spec.seed));
    let parts: Vec<Vec<f64>> = (0..spec.n_parts).map(|_| normal_vec(&mut layout, d, 1.0)).collect();
    let bg = normal_vec(&mut layout, d, 0.3);
    let classes: Vec<(Vec<usize>, Vec<f64>)> = (0..spec.n_classes)
        .map(|_| {
            let assign = (0..np).map(|_| layout.random_range(0..spec.n_parts)).collect();
            (assign, normal_vec(&mut layout, d, 1.0))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut tokens = Vec::with_capacity(spec.n_samples * spec.n_views * (np + 1) * d);
    let mut ids = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let c = i % spec.n_classes;
        ids.push(c as u32);
        let (assign, offset) = &classes[c];
        for _ in 0..spec.n_views {
            let mut patches = Vec::with_capacity(np * d);
            let mut mean = vec![0f64; d];
            for &part in assign {
                let base = if rng.random::<f64>() < spec.background { &bg } else { &parts[part] };
                for (j, &b) in base.iter().enumerate() {
                    let x = b + spec.noise * gauss(&mut rng);
                    mean[j] += x / np as f64;
                    patches.push(x);
                }
            }
            for j in 0..d {
                let x = mean[j] + offset[j] + spec.noise * gauss(&mut rng);
                tokens.push(x as f32);
            }
            tokens.extend(patches.into_iter().map(|x| x as f32));
        }
    }
    FeatureSet::new(
        spec.n_samples,
        spec.n_views,
        spec.grid.0,
        spec.grid.1,
        d,
        tokens,
        Some(Labels {
            n_classes: spec.n_classes as u32,
            ids,
        }),
    )
}

/// Isotropic clusters: class means are drawn with spread `spread`, a sample
/// is its class mean plus `noise`, each view perturbs the sample by
/// `view_noise`, and every patch token is the class mean plus `noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointClusterSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_t: usize,
    pub n_views: usize,
    pub grid: (usize, usize),
    pub spread: f64,
    pub noise: f64,
    pub view_noise: f64,
    pub seed: u64,
    pub layout_seed: Option<u64>,
}

impl Default for PointClusterSpec {
    fn default() -> Self {
        PointClusterSpec {
            n_samples: 600,
            n_classes: 10,
            d_t: 64,
            n_views: 2,
            grid: (2, 2),
            spread: 1.0,
            noise: 0.5,
            view_noise: 0.1,
            seed: 0,
            layout_seed: None,
        }
    }
}

pub fn point_clusters(spec: &PointClusterSpec) -> Result<FeatureSet> {
    if spec.n_classes == 0 {
        return Err(invalid("n_classes must be nonzero"));
    }
    if !(spec.noise >= 0.0 && spec.view_noise >= 0.0 && spec.spread >= 0.0) {
        return Err(invalid("spread and noise levels must be non-negative"));
    }
    let d = spec.d_t;
    let np = spec.grid.0 * spec.grid.1;
    let mut layout = ChaCha8Rng::seed_from_u64(spec.layout_seed.unwrap_or(spec.seed));
    let means: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| normal_vec(&mut layout, d, spec.spread)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut tokens = Vec::with_capacity(spec.n_samples * spec.n_views * (np + 1) * d);
    let mut ids = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let c = i % spec.n_classes;
        ids.push(c as u32);
        let mu = &means[c];
        let point: Vec<f64> = mu.iter().map(|&m| m + spec.noise * gauss(&mut rng)).collect();
        for _ in 0..spec.n_views {
            tokens.extend(point.iter().map(|&x| (x + spec.view_noise * gauss(&mut rng)) as f32));
            for _ in 0..np {
                tokens.extend(mu.iter().map(|&m| (m + spec.noise * gauss(&mut rng)) as f32));
            }
        }
    }
    FeatureSet::new(
        spec.n_samples,
        spec.n_views,
        spec.grid.0,
        spec.grid.1,
        d,
        tokens,
        Some(Labels {
            n_classes: spec.n_classes as u32,
            ids,
        }),
    )
}
