//! Synthetic labelled eddy fields.
//!
//! SSH is a sum of Gaussian bumps, `η = Σ s·A·exp(-d²/(2R²))`, with polarity
//! `s = +1` for anticyclones and `-1` for cyclones. SST is a linear
//! meridional background plus `α·η`. Velocity is geostrophic,
//! `U = -c ∂η/∂y`, `V = c ∂η/∂x`, with x along columns and y along rows (row
//! index increasing northward). A pixel is labelled with the polarity of the
//! nearest eddy whose disk `d ≤ R` contains it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_stats, extract_patches, write_sample, Manifest, Sample, SampleEntry, Split, SplitCounts, CHANNELS,
};
use crate::error::{Error, Result};

/// Side length whose area the default eddy-count range refers to.
pub const REFERENCE_SIDE: usize = 64;
pub const REJECT_THRESHOLD: f64 = 0.20;
const FIELD_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EddyParams {
    /// Column coordinate of the centre, in cells.
    pub cx: f64,
    /// Row coordinate of the centre, in cells.
    pub cy: f64,
    pub radius: f64,
    /// +1 anticyclonic, -1 cyclonic.
    pub polarity: i8,
    /// SSH amplitude in metres.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of eddies.
    pub eddies: (usize, usize),
    pub radius: (f64, f64),
    pub amplitude: (f64, f64),
    pub sst_base: f64,
    /// °C per row.
    pub sst_gradient: f64,
    /// °C per metre of SSH.
    pub sst_coupling: f64,
    /// Noise std per channel as a fraction of that channel's clean std.
    pub noise: [f64; CHANNELS],
    /// Geostrophic factor `g/f`.
    pub geostrophic: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            height: REFERENCE_SIDE,
            width: REFERENCE_SIDE,
            eddies: (1, 5),
            radius: (6.0, 16.0),
            amplitude: (0.1, 0.5),
            sst_base: 20.0,
            sst_gradient: -0.05,
            sst_coupling: 2.0,
            noise: [0.02; CHANNELS],
            geostrophic: 10.0,
        }
    }
}

impl FieldConfig {
    /// Default config on an `h×w` grid, with the eddy-count range scaled so
    /// eddy density matches the 64×64 default.
    pub fn for_grid(height: usize, width: usize) -> Self {
        Self::default().scaled_to(height, width)
    }

    /// Move to an `h×w` grid, treating the eddy-count range as a count per
    /// 64×64 area.
    pub fn scaled_to(&self, height: usize, width: usize) -> Self {
        let scale = (height * width) as f64 / (REFERENCE_SIDE * REFERENCE_SIDE) as f64;
        let lo = ((self.eddies.0 as f64 * scale).round() as usize).max(1);
        let hi = ((self.eddies.1 as f64 * scale).round() as usize).max(lo);
        Self {
            height,
            width,
            eddies: (lo, hi),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height < 3 || self.width < 3 {
            return bad(format!("grid {}x{} is smaller than 3x3", self.height, self.width));
        }
        if self.eddies.0 > self.eddies.1 {
            return bad(format!("empty eddy count range {:?}", self.eddies));
        }
        if !(self.radius.0 >= 3.0 && self.radius.0 <= self.radius.1) {
            return bad(format!("radius range {:?} must satisfy 3 <= min <= max", self.radius));
        }
        if !(self.amplitude.0 > 0.0 && self.amplitude.0 <= self.amplitude.1) {
            return bad(format!("amplitude range {:?} must be positive and ordered", self.amplitude));
        }
        if self.noise.iter().any(|&n| !(n >= 0.0)) {
            return bad(format!("noise levels {:?} must be non-negative", self.noise));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn draw_eddies<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> Vec<EddyParams> {
    let count = rng.random_range(cfg.eddies.0..=cfg.eddies.1);
    (0..count)
        .map(|_| EddyParams {
            cx: rng.random_range(0.0..cfg.width as f64),
            cy: rng.random_range(0.0..cfg.height as f64),
            radius: uniform(rng, cfg.radius),
            polarity: if rng.random_bool(0.5) { 1 } else { -1 },
            amplitude: uniform(rng, cfg.amplitude),
        })
        .collect()
}

/// Row-major SSH of the given eddies on an `h×w` grid.
pub fn ssh_field(eddies: &[EddyParams], height: usize, width: usize) -> Vec<f64> {
    let mut eta = vec![0.0; height * width];
    for e in eddies {
        let s = e.polarity as f64 * e.amplitude;
        let inv = 1.0 / (2.0 * e.radius * e.radius);
        for y in 0..height {
            let dy = y as f64 - e.cy;
            for x in 0..width {
                let dx = x as f64 - e.cx;
                eta[y * width + x] += s * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    eta
}

pub fn label_field(eddies: &[EddyParams], height: usize, width: usize) -> Vec<i8> {
    let mut labels = vec![0i8; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut best: Option<(f64, i8)> = None;
            for e in eddies {
                let d2 = (x as f64 - e.cx).powi(2) + (y as f64 - e.cy).powi(2);
                if d2 <= e.radius * e.radius && best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, e.polarity));
                }
            }
            labels[y * width + x] = best.map_or(0, |(_, p)| p);
        }
    }
    labels
}

/// `U = -c ∂η/∂y`, `V = c ∂η/∂x` by central differences, one-sided at the
/// borders.
pub fn geostrophic_velocity(eta: &[f64], height: usize, width: usize, c: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if height < 3 || width < 3 {
        return Err(Error::shape(
            "geostrophic_velocity",
            format!("grid {height}x{width} is smaller than 3x3"),
        ));
    }
    if eta.len() != height * width {
        return Err(Error::shape(
            "geostrophic_velocity",
            format!("{} values for {height}x{width}", eta.len()),
        ));
    }
    let at = |y: usize, x: usize| eta[y * width + x];
    let deriv = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    let mut u = vec![0.0; eta.len()];
    let mut v = vec![0.0; eta.len()];
    for y in 0..height {
        for x in 0..width {
            let dx = match x {
                0 => deriv(at(y, 0), at(y, 1), 1.0),
                _ if x == width - 1 => deriv(at(y, x - 1), at(y, x), 1.0),
                _ => deriv(at(y, x - 1), at(y, x + 1), 2.0),
            };
            let dy = match y {
                0 => deriv(at(0, x), at(1, x), 1.0),
                _ if y == height - 1 => deriv(at(y - 1, x), at(y, x), 1.0),
                _ => deriv(at(y - 1, x), at(y + 1, x), 2.0),
            };
            u[y * width + x] = -c * dy;
            v[y * width + x] = c * dx;
        }
    }
    Ok((u, v))
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Render channels and labels for a fixed set of eddies; `rng` supplies only
/// the noise.
pub fn render<R: Rng + ?Sized>(cfg: &FieldConfig, eddies: &[EddyParams], rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let eta = ssh_field(eddies, h, w);
    let (u, v) = geostrophic_velocity(&eta, h, w, cfg.geostrophic)?;
    let sst: Vec<f64> = (0..h * w)
        .map(|i| cfg.sst_base + cfg.sst_gradient * (i / w) as f64 + cfg.sst_coupling * eta[i])
        .collect();

    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for (c, clean) in [eta, sst, u, v].into_iter().enumerate() {
        let sigma = cfg.noise[c] * std_dev(&clean);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
            data.extend(clean.iter().map(|&x| (x + normal.sample(rng)) as f32));
        } else {
            data.extend(clean.iter().map(|&x| x as f32));
        }
    }
    Sample::new(h, w, data, label_field(eddies, h, w))
}

pub fn gen_field<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let eddies = draw_eddies(cfg, rng);
    render(cfg, &eddies, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Patch side length.
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Fields are generated at this many times the patch side, then cropped.
    pub parent_scale: usize,
    pub reject_threshold: f64,
    /// Overrides for the field generator; grid dims are set from `size`.
    pub field: FieldConfig,
}

impl DatasetConfig {
    pub fn new(size: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        let parent = 2 * size;
        Self {
            size,
            n_train,
            n_test,
            seed,
            parent_scale: 2,
            reject_threshold: REJECT_THRESHOLD,
            field: FieldConfig::for_grid(parent, parent),
        }
    }
}

/// Sample `index` of a dataset: a patch cut from a freshly generated parent
/// field that satisfies the eddy-fraction rule. Each index uses its own
/// random stream, so samples are independent of generation order.
pub fn gen_sample(cfg: &DatasetConfig, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let mut field_cfg = cfg.field.clone();
    field_cfg.height = cfg.size * cfg.parent_scale;
    field_cfg.width = cfg.size * cfg.parent_scale;
    for _ in 0..FIELD_ATTEMPTS {
        let field = gen_field(&field_cfg, &mut rng)?;
        match extract_patches(&field, cfg.size, 1, &mut rng, cfg.reject_threshold) {
            Ok(mut patches) => return Ok(patches.pop().expect("one patch").sample),
            Err(Error::DrawBudgetExhausted { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument(format!(
        "no field out of {FIELD_ATTEMPTS} yielded a {0}x{0} patch with eddy fraction >= {1}",
        cfg.size, cfg.reject_threshold
    )))
}

/// Write `n_train + n_test` samples under `out_dir/{train,test}/` and a
/// `manifest.json` with train-split statistics.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if cfg.size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let mut entries = Vec::with_capacity(cfg.n_train + cfg.n_test);
    let mut train = Vec::with_capacity(cfg.n_train);
    for (split, count, offset) in [(Split::Train, cfg.n_train, 0), (Split::Test, cfg.n_test, cfg.n_train)] {
        let dir = out_dir.join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        for i in 0..count {
            let sample = gen_sample(cfg, (offset + i) as u64)?;
            let rel = format!("{split}/{i:05}.eddy");
            write_sample(&sample, out_dir.join(&rel))?;
            if split == Split::Train {
                train.push(sample);
            }
            entries.push(SampleEntry { path: rel, split });
        }
    }
    let manifest = Manifest {
        samples: entries,
        splits: SplitCounts {
            train: cfg.n_train,
            test: cfg.n_test,
        },
        stats: compute_stats(&train),
        seed: cfg.seed,
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
