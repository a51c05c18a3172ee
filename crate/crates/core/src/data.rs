//! Labelled image datasets: the procedural grating task, container I/O and
//! CIFAR-style binary records.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{load_labels, load_tensor, save_labels, save_tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if images.rank() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "images {:?} do not match {} labels",
                images.dims(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidDataset(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(x, y, self.classes)
    }

    /// Seeded shuffle, then the first `round(fraction·N)` samples become the
    /// held-out part: returns `(train, held_out)` index lists.
    pub fn split_indices(&self, fraction: f32, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1)")));
        }
        let perm = rng.permutation(self.len());
        let k = (fraction * self.len() as f32).round() as usize;
        let (held, train) = perm.split_at(k);
        if train.is_empty() || (fraction > 0.0 && held.is_empty()) {
            return Err(Error::EmptyDataset);
        }
        Ok((train.to_vec(), held.to_vec()))
    }

    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensor(dir.join(format!("{prefix}_images.sokt")), &self.images)?;
        save_labels(dir.join(format!("{prefix}_labels.sokt")), &self.labels)
    }

    pub fn load(dir: impl AsRef<Path>, prefix: &str, classes: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let images = load_tensor(dir.join(format!("{prefix}_images.sokt")))?;
        let labels = load_labels(dir.join(format!("{prefix}_labels.sokt")))?;
        Self::new(images, labels, classes)
    }
}

/// Procedural grating task. Class `c` has orientation `(c mod 5)·π/5` and
/// spatial frequency level `c div 5`; samples vary in phase, orientation and
/// frequency jitter, channel gains, contrast and pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation.
    pub noise: f32,
    /// Orientation jitter in radians (uniform ±).
    pub angle_jitter: f32,
    /// Relative frequency jitter (uniform ±).
    pub freq_jitter: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 400,
            test_per_class: 100,
            image_size: 16,
            channels: 3,
            noise: 0.7,
            angle_jitter: 0.3,
            freq_jitter: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("class and per-class counts must be at least 1".into()));
        }
        if self.image_size < 2 || self.image_size % 2 != 0 || self.channels == 0 {
            return Err(Error::Config("image size must be even and at least 2; channels at least 1".into()));
        }
        if !(self.noise >= 0.0) || !(self.angle_jitter >= 0.0) || !(self.freq_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }

    fn render(&self, class: usize, rng: &mut Rng, out: &mut [f32]) {
        let s = self.image_size;
        let theta = (class % 5) as f32 * PI / 5.0 + self.angle_jitter * (2.0 * rng.uniform_f32() - 1.0);
        let level = (class / 5) as f32;
        let cycles = 1.5 * (1.0 + level) * (1.0 + self.freq_jitter * (2.0 * rng.uniform_f32() - 1.0));
        let phase = 2.0 * PI * rng.uniform_f32();
        let contrast = 0.3 + 0.2 * rng.uniform_f32();
        let (ct, st) = (theta.cos(), theta.sin());
        let k = 2.0 * PI * cycles / s as f32;
        for ch in 0..self.channels {
            let gain = 0.6 + 0.4 * rng.uniform_f32();
            let offset = 0.4 + 0.2 * rng.uniform_f32();
            for r in 0..s {
                for c in 0..s {
                    let proj = c as f32 * ct + r as f32 * st;
                    let v = offset + gain * contrast * (k * proj + phase).sin() + self.noise * rng.normal();
                    out[(ch * s + r) * s + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    fn generate_split(&self, per_class: usize, rng: &Rng) -> Result<Dataset> {
        let n = per_class * self.classes;
        let per = self.channels * self.image_size * self.image_size;
        let mut data = vec![0.0f32; n * per];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let mut r = rng.child(i as u64);
            self.render(class, &mut r, &mut data[i * per..(i + 1) * per]);
            labels.push(class);
        }
        let images = Tensor::new(vec![n, self.channels, self.image_size, self.image_size], data)?;
        Dataset::new(images, labels, self.classes)
    }

    /// `(train, test)` with exact class balance; each sample has its own
    /// stream so generation order does not matter.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let root = Rng::new(seed, 0x6461_7461);
        Ok((
            self.generate_split(self.train_per_class, &root.child(0))?,
            self.generate_split(self.test_per_class, &root.child(1))?,
        ))
    }
}

/// Reads fixed-size CIFAR records: `label_bytes` label bytes (1 for the
/// 10-class file, 2 for coarse+fine) then 3072 channel-major pixel bytes.
/// The last label byte is used; pixels are scaled to `[0, 1]`.
pub fn load_cifar_records(path: impl AsRef<Path>, max_records: usize, label_bytes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    if !(1..=2).contains(&label_bytes) {
        return Err(Error::Config(format!("label_bytes must be 1 or 2, got {label_bytes}")));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + 3072;
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bytes.len() % record != 0 {
        return Err(Error::RecordSize {
            len: bytes.len(),
            record,
        });
    }
    let n = (bytes.len() / record).min(max_records);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record).take(n) {
        labels.push(rec[label_bytes - 1] as usize);
        data.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    let classes = if label_bytes == 1 { 10 } else { 100 };
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            train_per_class: 6,
            test_per_class: 2,
            image_size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small().generate(5).unwrap();
        let b = small().generate(5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, small().generate(6).unwrap().0);
    }

    #[test]
    fn default_shapes_and_balance() {
        let (train, test) = SyntheticSpec::default().generate(0).unwrap();
        assert_eq!(train.images().dims(), &[4000, 3, 16, 16]);
        assert_eq!(test.len(), 1000);
        for c in 0..10 {
            assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 400);
        }
        let d = train.images().data();
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invalid_spec() {
        let mut s = small();
        s.train_per_class = 0;
        assert!(matches!(s.generate(0), Err(Error::Config(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = small().generate(1).unwrap();
        train.save(dir.path(), "train").unwrap();
        let a = fs::read(dir.path().join("train_images.sokt")).unwrap();
        assert_eq!(Dataset::load(dir.path(), "train", 4).unwrap(), train);
        train.save(dir.path(), "train").unwrap();
        assert_eq!(fs::read(dir.path().join("train_images.sokt")).unwrap(), a);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (train, _) = small().generate(1).unwrap();
        let (a, b) = train.split_indices(0.25, &mut Rng::new(1, 1)).unwrap();
        assert_eq!(b.len(), 6);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_validation() {
        let x = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        assert!(matches!(Dataset::new(x.clone(), vec![], 2), Err(Error::EmptyDataset)));
        assert!(Dataset::new(x.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(x, vec![0], 2).is_err());
    }

    fn write_records(n: usize, label_bytes: usize) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.bin");
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.extend(std::iter::repeat_n(3u8, label_bytes - 1));
            bytes.push(if i == 0 { 7 } else { (i % 10) as u8 });
            bytes.extend((0..3072).map(|j| ((i + j) % 256) as u8));
        }
        fs::write(&p, bytes).unwrap();
        (dir, p)
    }

    #[test]
    fn cifar_records() {
        let (_d, p) = write_records(10, 1);
        let ds = load_cifar_records(&p, 100, 1).unwrap();
        assert_eq!(ds.images().dims(), &[10, 3, 32, 32]);
        assert_eq!(ds.labels()[0], 7);
        assert_eq!(ds.images().data()[1], 1.0 / 255.0);
        assert_eq!(load_cifar_records(&p, 4, 1).unwrap().len(), 4);
        let (_d2, p2) = write_records(3, 2);
        let fine = load_cifar_records(&p2, 10, 2).unwrap();
        assert_eq!(fine.labels()[0], 7);
        assert_eq!(fine.classes(), 100);
    }

    #[test]
    fn cifar_record_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(
            load_cifar_records(&p, 10, 1),
            Err(Error::RecordSize { len: 100, record: 3073 })
        ));
    }
}
