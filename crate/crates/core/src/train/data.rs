//! Synthetic and on-disk datasets.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive_seed, stream, Xoshiro256};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    /// Four 16×16 RGB pattern classes: horizontal stripes, vertical
    /// stripes, checkerboard, solid.
    SynthClass,
    /// 32×32 RGB scenes of bright rectangles on a darker background;
    /// per-pixel labels 0 (background) and 1 (rectangle).
    SynthSeg,
    /// A directory of PNG/PGM/PPM images. With a `masks/` subdirectory the
    /// task is segmentation (`images/<stem>.*` paired with `masks/<stem>.*`,
    /// mask gray levels are class ids); otherwise each subdirectory is one
    /// class, in sorted order.
    ImageFolder(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub train_count: usize,
    pub test_count: usize,
    /// Standard deviation of additive Gaussian noise (synthetic kinds).
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synth_class(train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            kind: DataKind::SynthClass,
            train_count,
            test_count,
            noise: 0.2,
            seed,
        }
    }

    pub fn synth_seg(train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            kind: DataKind::SynthSeg,
            train_count,
            test_count,
            noise: 0.1,
            seed,
        }
    }

    pub fn image_folder(path: impl Into<PathBuf>, test_count: usize, seed: u64) -> Self {
        Self {
            kind: DataKind::ImageFolder(path.into()),
            train_count: 0,
            test_count,
            noise: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Segmentation { classes: usize },
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Classification { classes } | Task::Segmentation { classes } => classes,
        }
    }
}

/// Images stacked into one `N×C×H×W` tensor. Labels hold one class per
/// image, or one per pixel in `N×H×W` order.
#[derive(Debug, Clone)]
pub struct Split<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Split<T> {
    pub fn len(&self) -> usize {
        self.images.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_per_item(&self) -> usize {
        self.labels.len() / self.len().max(1)
    }

    /// Gathers `indices` into a batch, optionally flipping each item.
    pub fn batch(&self, indices: &[usize], flips: Option<&[(bool, bool)]>) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = self.images.shape();
        let (c, h, w) = (s.c(), s.h(), s.w());
        let per = c * h * w;
        let lpi = self.labels_per_item();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len() * lpi);
        for (b, &i) in indices.iter().enumerate() {
            let (fh, fv) = flips.map(|f| f[b]).unwrap_or((false, false));
            let src = &self.images.data()[i * per..(i + 1) * per];
            let map = |y: usize, x: usize| {
                let sy = if fv { h - 1 - y } else { y };
                let sx = if fh { w - 1 - x } else { x };
                sy * w + sx
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(src[ch * h * w + map(y, x)]);
                    }
                }
            }
            let lsrc = &self.labels[i * lpi..(i + 1) * lpi];
            if lpi == h * w && lpi > 1 {
                for y in 0..h {
                    for x in 0..w {
                        labels.push(lsrc[map(y, x)]);
                    }
                }
            } else {
                labels.extend_from_slice(lsrc);
            }
        }
        Ok((Tensor::from_vec(Shape::new(indices.len(), c, h, w)?, data)?, labels))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub task: Task,
    pub train: Split<T>,
    pub test: Split<T>,
}

impl<T: Real> Dataset<T> {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if !(spec.noise >= 0.0) {
            return Err(Error::arg("noise must be non-negative"));
        }
        match &spec.kind {
            DataKind::SynthClass | DataKind::SynthSeg => {
                if spec.train_count == 0 || spec.test_count == 0 {
                    return Err(Error::arg("synthetic datasets need positive train and test counts"));
                }
                let mut rng = Xoshiro256::seed_from_u64(derive_seed(spec.seed, stream::DATA));
                let seg = spec.kind == DataKind::SynthSeg;
                let gen = |rng: &mut Xoshiro256, n: usize| {
                    if seg {
                        synth_seg(rng, n, spec.noise)
                    } else {
                        synth_class(rng, n, spec.noise)
                    }
                };
                let train = gen(&mut rng, spec.train_count)?;
                let test = gen(&mut rng, spec.test_count)?;
                let task = if seg {
                    Task::Segmentation { classes: 2 }
                } else {
                    Task::Classification { classes: 4 }
                };
                Ok(Self { task, train, test })
            }
            DataKind::ImageFolder(dir) => load_folder(dir, spec.test_count, spec.seed),
        }
    }
}

const CLASS_HW: usize = 16;
const SEG_HW: usize = 32;

fn random_color(rng: &mut Xoshiro256, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

fn synth_class<T: Real>(rng: &mut Xoshiro256, n: usize, noise: f64) -> Result<Split<T>> {
    let hw = CLASS_HW;
    let mut data = Vec::with_capacity(n * 3 * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.below(4);
        let period = 2 + rng.below(3);
        let phase = rng.below(2 * period);
        let fg = random_color(rng, 0.6, 1.0);
        let bg = random_color(rng, 0.0, 0.4);
        for ch in 0..3 {
            for y in 0..hw {
                for x in 0..hw {
                    let on = match class {
                        0 => ((y + phase) / period).is_multiple_of(2),
                        1 => ((x + phase) / period).is_multiple_of(2),
                        2 => ((y + phase) / period + (x + phase) / period).is_multiple_of(2),
                        _ => true,
                    };
                    let base = if on { fg[ch] } else { bg[ch] };
                    data.push(T::from_f64_lossy(base + noise * rng.normal()));
                }
            }
        }
        labels.push(class);
    }
    Ok(Split {
        images: Tensor::from_vec(Shape::new(n, 3, hw, hw)?, data)?,
        labels,
    })
}

fn synth_seg<T: Real>(rng: &mut Xoshiro256, n: usize, noise: f64) -> Result<Split<T>> {
    let hw = SEG_HW;
    let mut data = Vec::with_capacity(n * 3 * hw * hw);
    let mut labels = Vec::with_capacity(n * hw * hw);
    for _ in 0..n {
        let mut mask = vec![0usize; hw * hw];
        for _ in 0..1 + rng.below(3) {
            let rh = 4 + rng.below(12);
            let rw = 4 + rng.below(12);
            let y0 = rng.below(hw - rh + 1);
            let x0 = rng.below(hw - rw + 1);
            for y in y0..y0 + rh {
                mask[y * hw + x0..y * hw + x0 + rw].fill(1);
            }
        }
        let fg = random_color(rng, 0.55, 1.0);
        let bg = random_color(rng, 0.0, 0.35);
        for ch in 0..3 {
            for &m in &mask {
                let base = if m == 1 { fg[ch] } else { bg[ch] };
                data.push(T::from_f64_lossy(base + noise * rng.normal()));
            }
        }
        labels.extend_from_slice(&mask);
    }
    Ok(Split {
        images: Tensor::from_vec(Shape::new(n, 3, hw, hw)?, data)?,
        labels,
    })
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_folder<T: Real>(dir: &Path, test_count: usize, seed: u64) -> Result<Dataset<T>> {
    let masks = dir.join("masks");
    let mut items: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut check_dims = |w: u32, h: u32, p: &Path| -> Result<()> {
        let d = (h as usize, w as usize);
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Validation(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    d.0,
                    d.1,
                    prev.0,
                    prev.1
                )))
            }
            _ => {}
        }
        Ok(())
    };
    let pixels = |img: &image::DynamicImage| -> Vec<f64> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = vec![0.0; 3 * (w * h) as usize];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[c * (w * h) as usize + (y * w + x) as usize] = p[c] as f64 / 255.0;
            }
        }
        out
    };
    let task;
    if masks.is_dir() {
        let mut classes = 0;
        for img_path in sorted_entries(&dir.join("images"))?.into_iter().filter(|p| is_raster(p)) {
            let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mask_path = sorted_entries(&masks)?
                .into_iter()
                .find(|p| is_raster(p) && p.file_stem().and_then(|s| s.to_str()) == Some(stem.as_str()))
                .ok_or_else(|| Error::Validation(format!("no mask for {}", img_path.display())))?;
            let img = open(&img_path)?;
            check_dims(img.width(), img.height(), &img_path)?;
            let mask = open(&mask_path)?.to_luma8();
            if mask.dimensions() != (img.width(), img.height()) {
                return Err(Error::Validation(format!("{} does not match its image size", mask_path.display())));
            }
            let labels: Vec<usize> = mask.pixels().map(|p| p[0] as usize).collect();
            classes = classes.max(labels.iter().copied().max().unwrap_or(0) + 1);
            items.push((pixels(&img), labels));
        }
        task = Task::Segmentation { classes: classes.max(2) };
    } else {
        let class_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
        for (class, cdir) in class_dirs.iter().enumerate() {
            for p in sorted_entries(cdir)?.into_iter().filter(|p| is_raster(p)) {
                let img = open(&p)?;
                check_dims(img.width(), img.height(), &p)?;
                items.push((pixels(&img), vec![class]));
            }
        }
        task = Task::Classification { classes: class_dirs.len() };
    }
    if items.len() < 2 {
        return Err(Error::Validation(format!("{} holds fewer than two usable images", dir.display())));
    }
    let (h, w) = dims.expect("at least one image");
    let mut order: Vec<usize> = (0..items.len()).collect();
    Xoshiro256::seed_from_u64(derive_seed(seed, stream::DATA)).shuffle(&mut order);
    let test_n = if test_count == 0 { (items.len() / 5).max(1) } else { test_count.min(items.len() - 1) };
    let build = |idx: &[usize]| -> Result<Split<T>> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for &i in idx {
            data.extend(items[i].0.iter().map(|&v| T::from_f64_lossy(v)));
            labels.extend_from_slice(&items[i].1);
        }
        Ok(Split {
            images: Tensor::from_vec(Shape::new(idx.len(), 3, h, w)?, data)?,
            labels,
        })
    };
    Ok(Dataset {
        task,
        test: build(&order[..test_n])?,
        train: build(&order[test_n..])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = DatasetSpec::synth_class(200, 50, 3);
        let a = Dataset::<f32>::generate(&spec).unwrap();
        let b = Dataset::<f32>::generate(&spec).unwrap();
        assert!(a.train.images.bit_eq(&b.train.images));
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.train.images.shape().0, [200, 3, 16, 16]);
        for c in 0..4 {
            assert!(a.train.labels.iter().filter(|&&l| l == c).count() > 25);
        }
        assert!(!a.train.images.bit_eq(&Dataset::<f32>::generate(&DatasetSpec::synth_class(200, 50, 4)).unwrap().train.images));
    }

    #[test]
    fn seg_masks_have_both_classes() {
        let d = Dataset::<f64>::generate(&DatasetSpec::synth_seg(8, 4, 1)).unwrap();
        assert_eq!(d.train.labels.len(), 8 * 32 * 32);
        let ones = d.train.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones > 0 && ones < d.train.labels.len());
    }

    #[test]
    fn flips_move_pixels_and_labels_together() {
        let d = Dataset::<f64>::generate(&DatasetSpec::synth_seg(2, 1, 1)).unwrap();
        let (x, l) = d.train.batch(&[0], Some(&[(true, false)])).unwrap();
        let (x0, l0) = d.train.batch(&[0], None).unwrap();
        assert_eq!(x.at(0, 1, 3, 0), x0.at(0, 1, 3, 31));
        assert_eq!(l[3 * 32], l0[3 * 32 + 31]);
    }

    #[test]
    fn image_folder_segmentation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        for i in 0..4u8 {
            let img = image::RgbImage::from_fn(8, 8, |x, _| image::Rgb([x as u8 * 30, i, 0]));
            img.save(dir.path().join(format!("images/{i}.png"))).unwrap();
            let mask = image::GrayImage::from_fn(8, 8, |x, _| image::Luma([(x >= 4) as u8]));
            mask.save(dir.path().join(format!("masks/{i}.pgm"))).unwrap();
        }
        let d = Dataset::<f32>::generate(&DatasetSpec::image_folder(dir.path(), 1, 0)).unwrap();
        assert_eq!(d.task, Task::Segmentation { classes: 2 });
        assert_eq!(d.train.len(), 3);
        assert_eq!(d.test.images.shape().0, [1, 3, 8, 8]);
        assert_eq!(d.test.labels[5], 1);
    }
}
