//! Procedural stand-ins for chest radiographs.
//!
//! Upright images share a fixed anatomy layout: brightness falling from top
//! to bottom, two dark vertical lung fields and a bright central spine. The
//! classifier classes differ in how many lung fields are opacified, a
//! contrast pattern that survives brightness shifts and flips.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::{
    synthesize_filter_negatives, write_manifest, DatasetId, Label, Manifest, SampleRecord, Task,
};
use crate::error::{Error, Result};
use crate::imaging::{encode_png, rotate_quarter, ImageBuffer};

/// Lung-field darkening of an unaffected lung; opacified lungs keep
/// [`OPACIFIED_DEPTH`].
const CLEAR_DEPTH: f64 = 70.0;
const OPACIFIED_DEPTH: f64 = 5.0;

fn anatomy(size: usize, base: impl Fn(f64) -> f64, lung_depth: [f64; 2], rng: &mut ChaCha8Rng) -> ImageBuffer {
    let jitter = |rng: &mut ChaCha8Rng, amount: f64| rng.random_range(-amount..=amount);
    let cy = 0.5 + jitter(rng, 0.05);
    let (lx, rx) = (0.3 + jitter(rng, 0.04), 0.7 + jitter(rng, 0.04));
    let (ay, ax) = (0.28 + jitter(rng, 0.03), 0.12 + jitter(rng, 0.02));
    let noise = Normal::new(0.0, 8.0).expect("positive std");
    let s = size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = ((y as f64 + 0.5) / s, (x as f64 + 0.5) / s);
            let mut v = base(fy);
            let inside = |cx: f64| ((fy - cy) / ay).powi(2) + ((fx - cx) / ax).powi(2) < 1.0;
            if inside(lx) {
                v -= lung_depth[0];
            } else if inside(rx) {
                v -= lung_depth[1];
            }
            if (fx - 0.5).abs() < 0.04 {
                v += 30.0;
            }
            v += noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(size, size, 1, pixels).expect("square gray image")
}

/// An upright frontal-view stand-in.
pub fn upright_image(size: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = 200.0 + rng.random_range(-20.0..=20.0);
    anatomy(size, |fy| top - 120.0 * fy, [CLEAR_DEPTH; 2], &mut rng)
}

/// A classifier stand-in for class index `class` in 0..3: that many lung
/// fields are opacified, the side chosen at random when only one is.
pub fn class_image(class: usize, size: usize, seed: u64) -> ImageBuffer {
    assert!(class < 3, "class index {class} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = 170.0 + rng.random_range(-20.0..=20.0);
    let mut depth = [CLEAR_DEPTH; 2];
    match class {
        1 => depth[rng.random_range(0..2)] = OPACIFIED_DEPTH,
        2 => depth = [OPACIFIED_DEPTH; 2],
        _ => {}
    }
    anatomy(size, |fy| top - 80.0 * fy, depth, &mut rng)
}

/// `n` upright images (label 0) followed by `n` quarter-turned ones (label 1,
/// turns cycling 1, 2, 3).
pub fn filter_set(n: usize, size: usize, seed: u64) -> (Vec<ImageBuffer>, Vec<usize>) {
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..n {
        images.push(upright_image(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)));
        labels.push(0);
    }
    for i in 0..n {
        let upright = upright_image(size, seed.wrapping_mul(1_000_003).wrapping_add((n + i) as u64));
        images.push(rotate_quarter(&upright, (i % 3 + 1) as u8));
        labels.push(1);
    }
    (images, labels)
}

/// `counts[c]` images of each class `c`, in class order.
pub fn class_set(counts: &[usize], size: usize, seed: u64) -> (Vec<ImageBuffer>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut k = 0u64;
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            images.push(class_image(class, size, seed.wrapping_mul(1_000_003).wrapping_add(k)));
            labels.push(class);
            k += 1;
        }
    }
    (images, labels)
}

/// Writes PNGs plus `manifest.csv` into `dir`.
///
/// For [`Task::Filter`], `counts[0]` upright images are written and a third
/// of them gain three quarter-turned `nonvalid` copies each. For
/// [`Task::Classifier`], `counts` gives images per class, two per patient.
pub fn write_dataset(dir: &Path, task: Task, counts: &[usize], size: usize, seed: u64) -> Result<Manifest> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let (images, labels) = match task {
        Task::Filter => {
            let n = *counts.first().ok_or_else(|| Error::InvalidInput("no image count".into()))?;
            let images: Vec<_> = (0..n).map(|i| upright_image(size, seed.wrapping_add(i as u64))).collect();
            (images, vec![0; n])
        }
        Task::Classifier => {
            if counts.len() != 3 {
                return Err(Error::InvalidInput("classifier data needs three class counts".into()));
            }
            class_set(counts, size, seed)
        }
    };
    let class_labels = match task {
        Task::Filter => [Label::Valid, Label::Nonvalid, Label::Nonvalid],
        Task::Classifier => [Label::NoFinding, Label::LungOpacity, Label::Covid19],
    };
    let mut records = Vec::with_capacity(images.len());
    for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
        let rel = format!("images/{i:05}.png");
        let path = dir.join(&rel);
        std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
        records.push(SampleRecord {
            image_path: rel,
            dataset_id: DatasetId::Local,
            patient_id: Some(format!("P{:05}", i / 2)),
            label: class_labels[label],
            view: None,
            split: None,
        });
    }
    let mut manifest = Manifest::new(records, Some(task), dir.to_path_buf())?;
    if task == Task::Filter {
        manifest = synthesize_filter_negatives(&manifest, 1.0 / 3.0, seed)?;
    }
    write_manifest(&manifest, &dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::load_manifest;

    fn mean(img: &ImageBuffer) -> f64 {
        img.pixels().iter().map(|&p| p as f64).sum::<f64>() / img.pixels().len() as f64
    }

    #[test]
    fn upright_images_are_brighter_on_top() {
        for seed in 0..10 {
            let img = upright_image(32, seed);
            let top: f64 = img.pixels()[..32 * 8].iter().map(|&p| p as f64).sum();
            let bottom: f64 = img.pixels()[32 * 24..].iter().map(|&p| p as f64).sum();
            assert!(top > bottom);
        }
    }

    #[test]
    fn opacification_raises_mean_intensity() {
        for seed in 0..10 {
            let m: Vec<f64> = (0..3).map(|c| mean(&class_image(c, 32, seed))).collect();
            assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(upright_image(16, 3), upright_image(16, 3));
        assert_ne!(upright_image(16, 3), upright_image(16, 4));
        let (imgs, labels) = filter_set(6, 16, 1);
        assert_eq!(imgs.len(), 12);
        assert_eq!(labels.iter().sum::<usize>(), 6);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), Task::Filter, &[9], 24, 2).unwrap();
        assert_eq!(m.class_counts()[&Label::Nonvalid], 9);
        let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m);
        let rotated = loaded.records.iter().position(|r| r.source().1 == 1).unwrap();
        let (src, _) = loaded.records[rotated].source();
        let src_idx = loaded.records.iter().position(|r| r.image_path == src).unwrap();
        assert_eq!(loaded.load_image(rotated).unwrap(), rotate_quarter(&loaded.load_image(src_idx).unwrap(), 1));
    }
}
