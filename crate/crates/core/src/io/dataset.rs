use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const CIFAR_RESOLUTION: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_RESOLUTION * CIFAR_RESOLUTION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Images in `[0, 1]`, stored `[n, channels, resolution, resolution]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Stack the given examples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let shape = [indices.len(), self.channels, self.resolution, self.resolution];
        let t = Tensor::new(&shape, data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            resolution: self.resolution,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let plane = self.resolution * self.resolution;
        (0..self.channels)
            .map(|c| {
                let vals = || (0..self.len()).flat_map(move |i| self.image(i)[c * plane..(c + 1) * plane].iter().copied());
                let n = (self.len() * plane) as f64;
                let mean = vals().sum::<f64>() / n;
                let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Shift and scale every channel to zero mean and unit deviation under
    /// `stats`; channels with zero deviation are only shifted.
    pub fn standardize(&mut self, stats: &[(f64, f64)]) {
        let plane = self.resolution * self.resolution;
        for img in self.images.chunks_mut(self.channels * plane) {
            for (c, &(mean, sd)) in stats.iter().enumerate() {
                let inv = if sd > 0.0 { 1.0 / sd } else { 1.0 };
                img[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Read CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record).
pub fn load_cifar10_binary(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: CIFAR_CHANNELS,
        resolution: CIFAR_RESOLUTION,
        num_classes: CIFAR_CLASSES,
        split,
    };
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_cifar10(&bytes, path, &mut ds)?;
    }
    Ok(ds)
}

fn parse_cifar10(bytes: &[u8], path: &Path, ds: &mut Dataset) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let start = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            reason: format!(
                "file ends inside the record starting at byte {start}; length must be a multiple of {CIFAR_RECORD}"
            ),
        });
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: (i * CIFAR_RECORD) as u64,
                reason: format!("record {i} has label {label}, expected 0..=9"),
            });
        }
        ds.labels.push(label);
        ds.images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Class-conditional Gaussian images around orthogonal spatial patterns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub n: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    /// Distance of every class mean from the common center, in units of `sigma`.
    pub separation: f64,
    /// Per-pixel noise standard deviation.
    pub sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            n: 1000,
            resolution: 32,
            channels: 3,
            seed: 0,
            separation: 4.0,
            sigma: 0.1,
        }
    }
}

/// Orthonormal class directions: Gaussian blobs modulated by oriented
/// sinusoids, one per class, then Gram-Schmidt orthonormalized.
fn class_directions(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(spec.seed);
    let (r, ch) = (spec.resolution, spec.channels);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let angle = std::f64::consts::PI * c as f64 / spec.classes as f64 + rng.random_range(0.0..0.2);
        let freq = rng.random_range(1.5..3.0) * std::f64::consts::TAU / r as f64;
        let (cy, cx) = (rng.random_range(0.3..0.7) * r as f64, rng.random_range(0.3..0.7) * r as f64);
        let width = 0.35 * r as f64;
        let phases: Vec<f64> = (0..ch).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let mut v = vec![0.0; ch * r * r];
        for (k, phase) in phases.iter().enumerate() {
            for y in 0..r {
                for x in 0..r {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let blob = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                    let t = freq * (dx * angle.cos() + dy * angle.sin()) + phase;
                    v[(k * r + y) * r + x] = blob * t.sin();
                }
            }
        }
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    dirs
}

/// Deterministic synthetic split. Both splits share class patterns and
/// differ only in noise; labels cycle through the classes so counts differ
/// by at most one.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.n < spec.classes {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes and n >= classes (classes={}, n={})",
            spec.classes, spec.n
        )));
    }
    if spec.resolution == 0 || spec.channels == 0 || !(spec.sigma > 0.0) || !(spec.separation >= 0.0) {
        return Err(Error::Config("synthetic data needs positive resolution, channels and sigma".into()));
    }
    let dirs = class_directions(spec);
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Eval => 0x6576_616c_0000_0000u64,
    };
    let mut rng = Rng::seed_from_u64(spec.seed ^ salt);
    let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let amp = spec.separation * spec.sigma;
    let len = spec.channels * spec.resolution * spec.resolution;
    let mut images = Vec::with_capacity(spec.n * len);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.classes;
        labels.push(c);
        for d in &dirs[c] {
            let v: f64 = 0.5 + amp * d + noise.sample(&mut rng);
            images.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: spec.channels,
        resolution: spec.resolution,
        num_classes: spec.classes,
        split,
    })
}

/// Random horizontal flip (p = 0.5) and a random crop from a zero-padded
/// copy (`pad` pixels on each side), per example.
pub fn augment_batch(x: &mut Tensor, pad: usize, rng: &mut Rng) {
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = x.data_mut();
    let mut tmp = vec![0.0; c * h * w];
    for i in 0..n {
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { w - 1 - xx } else { xx };
                    let sx = sx0 as isize + dx;
                    tmp[(ch * h + y) * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&tmp);
    }
}

/// Where a command reads its images from.
///
/// Text form: `synth` or `synth:key=value,...` with keys `classes`, `n`,
/// `res`, `channels`, `sep`, `sigma`, `seed`; anything else is a directory
/// holding the CIFAR-10 binary batches.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Cifar10(PathBuf),
}

impl DataSource {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("data source '{text}': {m}"));
        let Some(rest) = text.strip_prefix("synth") else {
            return Ok(DataSource::Cifar10(PathBuf::from(text)));
        };
        let mut spec = SynthSpec::default();
        let rest = match rest {
            "" => return Ok(DataSource::Synth(spec)),
            r => r.strip_prefix(':').ok_or_else(|| bad("expected ':' after 'synth'".into()))?,
        };
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("'{pair}' is not key=value")))?;
            let int = || v.parse::<usize>().map_err(|_| bad(format!("{k}: '{v}' is not an integer")));
            let real = || v.parse::<f64>().map_err(|_| bad(format!("{k}: '{v}' is not a number")));
            match k {
                "classes" => spec.classes = int()?,
                "n" => spec.n = int()?,
                "res" => spec.resolution = int()?,
                "channels" => spec.channels = int()?,
                "seed" => spec.seed = int()? as u64,
                "sep" => spec.separation = real()?,
                "sigma" => spec.sigma = real()?,
                _ => return Err(bad(format!("unknown key '{k}'"))),
            }
        }
        Ok(DataSource::Synth(spec))
    }

    /// Both splits, standardized with the statistics of the training split.
    pub fn load_pair(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut eval) = (self.load_raw(Split::Train)?, self.load_raw(Split::Eval)?);
        let stats = train.channel_stats();
        train.standardize(&stats);
        eval.standardize(&stats);
        Ok((train, eval))
    }

    /// One split, standardized with the statistics of the training split.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let (train, eval) = match split {
            Split::Train => {
                let mut t = self.load_raw(Split::Train)?;
                let stats = t.channel_stats();
                t.standardize(&stats);
                return Ok(t);
            }
            Split::Eval => (self.load_raw(Split::Train)?, self.load_raw(Split::Eval)?),
        };
        let mut eval = eval;
        eval.standardize(&train.channel_stats());
        Ok(eval)
    }

    /// One split with pixel values in `[0, 1]`.
    pub fn load_raw(&self, split: Split) -> Result<Dataset> {
        match self {
            DataSource::Synth(spec) => synth_dataset(spec, split),
            DataSource::Cifar10(dir) => {
                let files: Vec<PathBuf> = match split {
                    Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                    Split::Eval => vec![dir.join("test_batch.bin")],
                };
                load_cifar10_binary(&files, split)
            }
        }
    }
}

/// Shuffled example order for one epoch.
pub fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn record(label: u8, first_pixel: u8) -> Vec<u8> {
        let mut r = vec![0u8; CIFAR_RECORD];
        r[0] = label;
        r[1] = first_pixel;
        r
    }

    #[test]
    fn parses_records() {
        let mut bytes = Vec::new();
        for i in 0..10 {
            bytes.extend(record(i as u8, 0));
        }
        let mut ds = load_cifar10_binary(&[], Split::Train).unwrap();
        parse_cifar10(&bytes, Path::new("x.bin"), &mut ds).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.image(0).len(), 3 * 32 * 32);

        let mut one = load_cifar10_binary(&[], Split::Train).unwrap();
        parse_cifar10(&record(3, 255), Path::new("x.bin"), &mut one).unwrap();
        assert_eq!(one.labels[0], 3);
        assert_eq!(one.image(0)[0], 1.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut ds = load_cifar10_binary(&[], Split::Train).unwrap();
        let err = parse_cifar10(&vec![0u8; 3072], Path::new("x.bin"), &mut ds).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3072, .. }), "{err}");
    }

    #[test]
    fn bad_label_reports_record() {
        let mut bytes = record(1, 0);
        bytes.extend(record(10, 0));
        let mut ds = load_cifar10_binary(&[], Split::Train).unwrap();
        let err = parse_cifar10(&bytes, Path::new("x.bin"), &mut ds).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            classes: 3,
            n: 10,
            resolution: 8,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, synth_dataset(&spec, Split::Train).unwrap());
        assert_ne!(a.images, synth_dataset(&spec, Split::Eval).unwrap().images);
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(&SynthSpec { n: 2, ..spec }, Split::Train).is_err());
    }

    #[test]
    fn data_source_text() {
        assert_eq!(DataSource::parse("synth").unwrap(), DataSource::Synth(SynthSpec::default()));
        let DataSource::Synth(s) = DataSource::parse("synth:classes=4,n=64,res=8,sep=10,seed=7").unwrap() else {
            panic!()
        };
        assert_eq!((s.classes, s.n, s.resolution, s.separation, s.seed), (4, 64, 8, 10.0, 7));
        assert_eq!(DataSource::parse("/data/cifar").unwrap(), DataSource::Cifar10("/data/cifar".into()));
        for bad in ["synth:x=1", "synth:n=ten", "synth:n", "synthetic"] {
            assert!(DataSource::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn standardized_train_split_has_unit_statistics() {
        let src = DataSource::parse("synth:classes=3,n=30,res=6").unwrap();
        let (train, eval) = src.load_pair().unwrap();
        for (m, sd) in train.channel_stats() {
            assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12, "{m} {sd}");
        }
        assert_eq!(src.load(Split::Eval).unwrap(), eval);
        assert_eq!(src.load(Split::Train).unwrap(), train);
        let mut flat = Dataset { images: vec![0.3; 8], labels: vec![0, 1], channels: 1, resolution: 2, num_classes: 2, split: Split::Train };
        let stats = flat.channel_stats();
        flat.standardize(&stats);
        assert!(flat.images.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn augmentation_without_padding_only_flips() {
        let mut x = Tensor::from_fn(&[4, 1, 2, 3], |i| i as f64);
        let orig = x.clone();
        augment_batch(&mut x, 0, &mut seeded_rng(2));
        for i in 0..4 {
            let a = &orig.data()[i * 6..(i + 1) * 6];
            let b = &x.data()[i * 6..(i + 1) * 6];
            let flipped: Vec<f64> = [2, 1, 0, 5, 4, 3].iter().map(|&j| a[j]).collect();
            assert!(b == a || b == flipped.as_slice());
        }
    }
}
