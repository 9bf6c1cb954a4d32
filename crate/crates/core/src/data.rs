//! `.eddy` sample files, dataset manifests, patch extraction and
//! per-channel standardisation.
//!
//! Sample layout (little-endian): magic `EDY1`, `u32` height, `u32` width,
//! `u32` channel count (always 4), then the SSH, SST, U and V rasters as
//! row-major `f32`, then the label raster as row-major `i8` in {-1, 0, 1}.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: [u8; 4] = *b"EDY1";
pub const HEADER_LEN: usize = 16;
pub const CHANNELS: usize = 4;
/// Channel order inside a sample.
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["ssh", "sst", "u", "v"];
pub const SSH: usize = 0;
pub const SST: usize = 1;
pub const U: usize = 2;
pub const V: usize = 3;
pub const STD_FLOOR: f64 = 1e-8;

/// Four co-located rasters (SSH m, SST °C, eastward U m/s, northward V m/s)
/// and the eddy label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    height: usize,
    width: usize,
    /// Channel-major, `CHANNELS * height * width` values.
    data: Vec<f32>,
    labels: Vec<i8>,
}

impl Sample {
    pub fn new(height: usize, width: usize, data: Vec<f32>, labels: Vec<i8>) -> Result<Self> {
        let hw = height * width;
        if data.len() != CHANNELS * hw || labels.len() != hw {
            return Err(Error::shape(
                "sample",
                format!(
                    "{}x{} needs {} values and {} labels, got {} and {}",
                    height,
                    width,
                    CHANNELS * hw,
                    hw,
                    data.len(),
                    labels.len()
                ),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "sample" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| !(-1..=1).contains(&l)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self {
            height,
            width,
            data,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    /// Fraction of pixels labelled as an eddy of either polarity.
    pub fn eddy_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l != 0).count() as f64 / self.labels.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Sample> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::shape(
                "crop",
                format!("{size}x{size} at ({top}, {left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(CHANNELS * size * size);
        for c in 0..CHANNELS {
            let plane = self.channel(c);
            for y in top..top + size {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + size]);
            }
        }
        let mut labels = Vec::with_capacity(size * size);
        for y in top..top + size {
            labels.extend_from_slice(&self.labels[y * self.width + left..y * self.width + left + size]);
        }
        Ok(Sample {
            height: size,
            width: size,
            data,
            labels,
        })
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.data.len() + self.labels.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&SAMPLE_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Sample> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(Error::Truncated {
                    needed: n,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(HEADER_LEN)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != SAMPLE_MAGIC {
            return Err(Error::BadMagic {
                expected: SAMPLE_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(4), word(8), word(12));
        if channels != CHANNELS {
            return Err(Error::shape(
                "read_sample",
                format!("expected {CHANNELS} channels, header says {channels}"),
            ));
        }
        let hw = height * width;
        let total = HEADER_LEN + 4 * CHANNELS * hw + hw;
        need(total)?;
        if bytes.len() > total {
            return Err(Error::shape(
                "read_sample",
                format!("{} trailing bytes", bytes.len() - total),
            ));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + 4 * CHANNELS * hw]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels: Vec<i8> = bytes[HEADER_LEN + 4 * CHANNELS * hw..].iter().map(|&b| b as i8).collect();
        Sample::new(height, width, data, labels)
    }
}

pub fn write_sample(sample: &Sample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sample.to_bytes()).map_err(|e| Error::file(path, e))
}

pub fn read_sample(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Sample::from_bytes(&bytes)
}

/// An extracted patch and its top-left corner in the source grid.
#[derive(Clone, Debug)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub sample: Sample,
}

/// Draw `count` square patches with distinct top-left corners, discarding
/// any whose eddy fraction is below `reject_threshold`. Gives up after
/// `1000 * count` draws.
pub fn extract_patches<R: Rng + ?Sized>(
    grid: &Sample,
    size: usize,
    count: usize,
    rng: &mut R,
    reject_threshold: f64,
) -> Result<Vec<Patch>> {
    if size == 0 || grid.height < size || grid.width < size {
        return Err(Error::shape(
            "extract_patches",
            format!("{}x{} grid is smaller than patch size {size}", grid.height, grid.width),
        ));
    }
    let budget = 1000 * count;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut draws = 0;
    while out.len() < count {
        if draws == budget {
            return Err(Error::DrawBudgetExhausted {
                accepted: out.len(),
                requested: count,
                draws,
            });
        }
        draws += 1;
        let top = rng.random_range(0..=grid.height - size);
        let left = rng.random_range(0..=grid.width - size);
        if !seen.insert((top, left)) {
            continue;
        }
        let eddy = (top..top + size)
            .map(|y| {
                grid.labels[y * grid.width + left..y * grid.width + left + size]
                    .iter()
                    .filter(|&&l| l != 0)
                    .count()
            })
            .sum::<usize>();
        if (eddy as f64) < reject_threshold * (size * size) as f64 {
            continue;
        }
        out.push(Patch {
            top,
            left,
            sample: grid.crop(top, left, size)?,
        });
    }
    Ok(out)
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

/// Population statistics over every pixel of every sample; std is floored
/// at `1e-8`.
pub fn compute_stats(samples: &[Sample]) -> NormStats {
    let mut stats = NormStats::default();
    for c in 0..CHANNELS {
        let count: usize = samples.iter().map(|s| s.height * s.width).sum();
        if count == 0 {
            continue;
        }
        let mean = samples
            .iter()
            .flat_map(|s| s.channel(c))
            .map(|&v| v as f64)
            .sum::<f64>()
            / count as f64;
        let var = samples
            .iter()
            .flat_map(|s| s.channel(c))
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        stats.mean[c] = mean;
        stats.std[c] = var.sqrt().max(STD_FLOOR);
    }
    stats
}

/// `(x - mean) / std` per channel; labels untouched.
pub fn normalize(sample: &Sample, stats: &NormStats) -> Sample {
    map_channels(sample, |c, v| ((v as f64 - stats.mean[c]) / stats.std[c].max(STD_FLOOR)) as f32)
}

pub fn denormalize(sample: &Sample, stats: &NormStats) -> Sample {
    map_channels(sample, |c, v| (v as f64 * stats.std[c].max(STD_FLOOR) + stats.mean[c]) as f32)
}

fn map_channels(sample: &Sample, f: impl Fn(usize, f32) -> f32) -> Sample {
    let hw = sample.height * sample.width;
    let data = sample
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i / hw, v))
        .collect();
    Sample {
        data,
        ..sample.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// `manifest.json`: sample list with splits, train-split normalisation
/// statistics, and the generating seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<SampleEntry>,
    pub splits: SplitCounts,
    pub stats: NormStats,
    pub seed: u64,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.samples {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample path {}", e.path)));
            }
        }
        let train = self.entries(Split::Train).count();
        let test = self.entries(Split::Test).count();
        if train != self.splits.train || test != self.splits.test {
            return Err(Error::InvalidArgument(format!(
                "split counts {:?} disagree with entries ({train} train, {test} test)",
                self.splits
            )));
        }
        Ok(())
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// Read every sample of `split`, resolving paths against `dir`.
    pub fn read_split(&self, dir: &Path, split: Split) -> Result<Vec<Sample>> {
        self.entries(split).map(|e| read_sample(resolve(dir, &e.path))).collect()
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, f: impl Fn(usize, usize) -> i8) -> Sample {
        let data = (0..CHANNELS * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let labels = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Sample::new(h, w, data, labels).unwrap()
    }

    #[test]
    fn file_size_for_128() {
        let s = sample(128, 128, |_, _| 0);
        assert_eq!(s.to_bytes().len(), 278_544);
        assert_eq!(s.encoded_len(), 278_544);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(16, 8, |y, x| ((y + x) % 3) as i8 - 1);
        let p = dir.path().join("a.eddy");
        write_sample(&s, &p).unwrap();
        assert_eq!(read_sample(&p).unwrap(), s);
    }

    #[test]
    fn invalid_label_byte_rejected() {
        let s = sample(4, 4, |_, _| 0);
        let mut bytes = s.to_bytes();
        *bytes.last_mut().unwrap() = 2;
        assert!(matches!(Sample::from_bytes(&bytes), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let s = sample(4, 4, |_, _| 0);
        let mut bytes = s.to_bytes();
        assert!(matches!(
            Sample::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(Sample::from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
        bytes[0] = b'X';
        assert!(matches!(Sample::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn no_eddies_exhausts_budget() {
        let grid = sample(40, 40, |_, _| 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = extract_patches(&grid, 16, 3, &mut rng, 0.2).unwrap_err();
        assert!(matches!(err, Error::DrawBudgetExhausted { accepted: 0, requested: 3, draws: 3000 }));
    }

    #[test]
    fn zero_threshold_accepts_distinct_corners() {
        let grid = sample(40, 40, |_, _| 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = extract_patches(&grid, 16, 20, &mut rng, 0.0).unwrap();
        assert_eq!(patches.len(), 20);
        let corners: HashSet<_> = patches.iter().map(|p| (p.top, p.left)).collect();
        assert_eq!(corners.len(), 20);
        for p in &patches {
            assert_eq!(p.sample, grid.crop(p.top, p.left, 16).unwrap());
        }
    }

    #[test]
    fn full_coverage_accepts_everything() {
        let grid = sample(32, 32, |y, _| if y % 2 == 0 { 1 } else { -1 });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patches = extract_patches(&grid, 16, 50, &mut rng, 0.2).unwrap();
        assert_eq!(patches.len(), 50);
    }

    #[test]
    fn grid_too_small() {
        let grid = sample(8, 8, |_, _| 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(extract_patches(&grid, 16, 1, &mut rng, 0.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let s = Sample::new(2, 2, vec![3.0; 16], vec![0; 4]).unwrap();
        let stats = compute_stats(std::slice::from_ref(&s));
        assert_eq!(stats.std, [STD_FLOOR; 4]);
        assert!(normalize(&s, &stats).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn own_stats_standardise() {
        let samples: Vec<Sample> = (0..3).map(|k| {
            let data = (0..CHANNELS * 64).map(|i| ((i + k * 1000) as f32 * 0.11).sin() * (1.0 + i as f32 / 64.0) + k as f32).collect();
            Sample::new(8, 8, data, vec![0; 64]).unwrap()
        }).collect();
        let stats = compute_stats(&samples);
        let normed: Vec<Sample> = samples.iter().map(|s| normalize(s, &stats)).collect();
        let after = compute_stats(&normed);
        for c in 0..CHANNELS {
            assert!(after.mean[c].abs() < 1e-5);
            assert!((after.std[c] - 1.0).abs() < 1e-3);
        }
        let back = denormalize(&normed[1], &stats);
        for (a, b) in back.data().iter().zip(samples[1].data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(back.labels(), samples[1].labels());
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_counts() {
        let mut m = Manifest {
            samples: vec![
                SampleEntry { path: "a".into(), split: Split::Train },
                SampleEntry { path: "b".into(), split: Split::Test },
            ],
            splits: SplitCounts { train: 1, test: 1 },
            stats: NormStats::default(),
            seed: 0,
        };
        m.validate().unwrap();
        m.splits.train = 2;
        assert!(m.validate().is_err());
        m.splits.train = 1;
        m.samples[1].path = "a".into();
        assert!(m.validate().is_err());
    }
}
