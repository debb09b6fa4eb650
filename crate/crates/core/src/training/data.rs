//! Labeled image sources: procedurally drawn shapes and per-class folders.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autoencoder::{preprocess, Image, ImageBatch, RawImage};
use crate::error::{LqaeError, Result};
use crate::rng::derive_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let imgs: Vec<&Image> = indices.iter().map(|&i| &self.images[i]).collect();
        ImageBatch::from_images(&imgs, Some(indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn all(&self) -> Result<ImageBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Indices of every item of class `c`, in dataset order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    /// Stratified split: `test_fraction` of each class (at least one item)
    /// goes to the second set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = derive_rng(seed, "split", 0);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.n_classes() {
            let mut idx = self.class_indices(c);
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }
}

const SHAPES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];
const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("blue", [0.1, 0.25, 0.9]),
    ("green", [0.15, 0.8, 0.2]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("cyan", [0.1, 0.85, 0.9]),
];

fn class_style(k: usize) -> (usize, usize, String) {
    let shape = k % SHAPES.len();
    let color = (k + k / SHAPES.len()) % COLORS.len();
    let mut name = format!("{} {}", COLORS[color].0, SHAPES[shape]);
    if k >= SHAPES.len() * COLORS.len() {
        name = format!("{name} {k}");
    }
    (shape, color, name)
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
        3 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
        }
        _ => dx.abs() <= r && dy.abs() <= r * 0.35,
    }
}

/// Balanced set of shapes on a dark noisy background; class `k` fixes the
/// shape and color, while position, size, brightness and noise are jittered.
/// Items are interleaved by class: item `i` has label `i % n_classes`.
pub fn synthetic_dataset(n_classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(LqaeError::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    let styles: Vec<_> = (0..n_classes).map(class_style).collect();
    let mut images = Vec::with_capacity(n_classes * n_per_class);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    let s = side as f32;
    for i in 0..n_classes * n_per_class {
        let k = i % n_classes;
        let (shape, color, _) = &styles[k];
        let mut rng = derive_rng(seed, "synthetic", i as u64);
        let cx = s / 2.0 + rng.gen_range(-s / 8.0..=s / 8.0);
        let cy = s / 2.0 + rng.gen_range(-s / 8.0..=s / 8.0);
        let r = s * rng.gen_range(0.22..0.32);
        let bg: f32 = rng.gen_range(0.0..0.25);
        let gain: f32 = rng.gen_range(0.8..1.0);
        let rgb = COLORS[*color].1;
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let on = inside(*shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
                for &c in &rgb {
                    let base = if on { c * gain } else { bg };
                    let noise: f32 = rng.gen_range(-0.03..0.03);
                    data.push((base + noise).clamp(0.0, 1.0));
                }
            }
        }
        images.push(Image { side, channels: 3, data });
        labels.push(k);
    }
    Ok(Dataset { images, labels, class_names: styles.into_iter().map(|s| s.2).collect() })
}

fn to_square(img: image::DynamicImage, path: &Path, side: usize) -> Result<Image> {
    let rgb = img.to_rgb32f();
    let raw =
        RawImage { width: rgb.width() as usize, height: rgb.height() as usize, channels: 3, data: rgb.into_raw() };
    preprocess(&raw, side).map_err(|e| LqaeError::Ingestion { path: path.into(), reason: e.to_string() })
}

/// Decodes one image file and preprocesses it to `side x side` RGB.
pub fn load_image_file(path: &Path, side: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| LqaeError::Ingestion { path: path.into(), reason: e.to_string() })?;
    to_square(img, path, side)
}

/// Writes an RGB image as 8-bit PNG, clamping values to `[0, 1]`.
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 3 {
        return Err(LqaeError::Shape(format!("PNG export needs 3 channels, got {}", img.channels)));
    }
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(img.side as u32, img.side as u32, bytes)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| LqaeError::format(path, e.to_string()))
}

/// Reads `path/<class>/<image>` files. Classes are the sorted subdirectory
/// names; files within a class are read in sorted order. Files that do not
/// decode as images are skipped with a warning.
pub fn load_image_folder(path: &Path, side: usize) -> Result<Dataset> {
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> =
            fs::read_dir(p).map_err(|e| LqaeError::io(p, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<_> = read_dir(path)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(LqaeError::Ingestion { path: path.into(), reason: "no class subdirectories".into() });
    }
    let mut ds = Dataset { images: Vec::new(), labels: Vec::new(), class_names: Vec::new() };
    for (label, dir) in class_dirs.iter().enumerate() {
        let before = ds.len();
        for file in read_dir(dir)?.into_iter().filter(|p| p.is_file()) {
            match image::open(&file) {
                Ok(img) => {
                    ds.images.push(to_square(img, &file, side)?);
                    ds.labels.push(label);
                }
                Err(e) => log::warn!("skipping {}: {e}", file.display()),
            }
        }
        if ds.len() == before {
            return Err(LqaeError::Ingestion {
                path: dir.clone(),
                reason: "class directory has no readable images".into(),
            });
        }
        ds.class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_examples() {
        let d = synthetic_dataset(2, 1, 32, 0).unwrap();
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d, synthetic_dataset(2, 1, 32, 0).unwrap());
        assert_ne!(d.images, synthetic_dataset(2, 1, 32, 1).unwrap().images);
        let big = synthetic_dataset(5, 7, 16, 3).unwrap();
        assert!(big.images.iter().flat_map(|i| &i.data).all(|v| (0.0..=1.0).contains(v)));
        for c in 0..5 {
            assert_eq!(big.class_indices(c).len(), 7);
        }
        assert!(synthetic_dataset(1, 4, 16, 0).is_err());
        let mut names = big.class_names.clone();
        names.dedup();
        assert_eq!(names.len(), 5);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = synthetic_dataset(2, 10, 8, 0).unwrap();
        let (train, test) = d.split(0.3, 1);
        assert_eq!(train.len() + test.len(), 20);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(test.iter().filter(|&&i| d.labels[i] == 0).count(), 3);
    }

    fn save_png(path: &Path, w: u32, h: u32, v: u8) {
        image::RgbImage::from_pixel(w, h, image::Rgb([v, v, v])).save(path).unwrap();
    }

    #[test]
    fn folder_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        for (class, n) in [("b_dog", 4), ("a_cat", 6)] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..n {
                save_png(&dir.path().join(class).join(format!("{i}.png")), 40 + i, 20 + 3 * i, 200);
            }
        }
        fs::write(dir.path().join("a_cat").join("notes.txt"), "not an image").unwrap();
        let d = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(d.class_names, vec!["a_cat", "b_dog"]);
        assert_eq!(d.len(), 10);
        assert!(d.images.iter().all(|i| i.side == 16 && i.data.len() == 16 * 16 * 3));
        assert_eq!(d.labels[0], 0);
        assert_eq!(d.labels[9], 1);

        fs::create_dir(dir.path().join("c_empty")).unwrap();
        match load_image_folder(dir.path(), 16) {
            Err(LqaeError::Ingestion { path, .. }) => assert!(path.ends_with("c_empty")),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let d = synthetic_dataset(2, 1, 16, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image_png(&d.images[0], &path).unwrap();
        let back = load_image_file(&path, 16).unwrap();
        for (a, b) in d.images[0].data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(matches!(load_image_file(&dir.path().join("missing.png"), 16), Err(LqaeError::Ingestion { .. })));
    }
}
