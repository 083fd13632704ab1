//! Training corpora: procedurally drawn shapes and image folders.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Image;
use crate::error::{bail_validation, Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub const SYNTH_SIZE: usize = 32;
const SHAPES: usize = 4;
const PALETTE: [[f32; 3]; 4] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.8, -0.5],
    [-0.5, -0.4, 0.9],
    [0.9, 0.8, -0.7],
];
pub const SYNTH_CLASSES: usize = SHAPES * PALETTE.len();

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        // disk
        0 => dx * dx + dy * dy <= r * r,
        // square
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // upward triangle
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        // ring
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
    }
}

/// `n` deterministic 32×32 images of a colored shape on a shaded
/// background. Class = `shape · 4 + color`; consecutive images cycle
/// through the classes from a seed-dependent starting class.
pub fn synth_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..SYNTH_CLASSES);
    let s = SYNTH_SIZE as f32;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (start + i) % SYNTH_CLASSES;
        let (shape, color) = (class / PALETTE.len(), class % PALETTE.len());
        let r = rng.random_range(7..12) as f32;
        let cx = rng.random_range(12..21) as f32;
        let cy = rng.random_range(12..21) as f32;
        let shade = rng.random_range(0..5) as f32 * 0.05;
        let mut data = Vec::with_capacity(SYNTH_SIZE * SYNTH_SIZE * 3);
        for y in 0..SYNTH_SIZE {
            for x in 0..SYNTH_SIZE {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let rgb = if inside(shape, fx - cx, fy - cy, r) {
                    PALETTE[color]
                } else {
                    let g = -0.8 + shade + 0.3 * fy / s;
                    [g, g, g + 0.1]
                };
                data.extend_from_slice(&rgb);
            }
        }
        images.push(Image {
            height: SYNTH_SIZE,
            width: SYNTH_SIZE,
            data,
        });
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        num_classes: SYNTH_CLASSES,
    }
}

pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = image::imageops::resize(&cropped, size as u32, size as u32, image::imageops::FilterType::Triangle);
    let data = resized.pixels().flat_map(|p| p.0).map(|v| v as f32 / 127.5 - 1.0).collect();
    Image::new(size, size, data)
}

/// Write an image in [-1, 1] as 8-bit PNG.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    img.validate()?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Images under `root/<class>/…`, class ids assigned by sorted directory
/// name. Center-cropped to a square and resized to `size`.
pub fn load_image_folder(root: &Path, size: usize) -> Result<Dataset> {
    let read = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut entries: Vec<_> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        Ok(entries)
    };
    let classes: Vec<_> = read(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        for file in read(dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                images.push(load_image(&file, size)?);
                labels.push(label);
            }
        }
    }
    if images.is_empty() {
        bail_validation!("no images found under {}", root.display());
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_dataset(16, 0);
        let b = synth_dataset(16, 0);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_ne!(synth_dataset(16, 1).images, a.images);
    }

    #[test]
    fn labels_cover_classes() {
        let d = synth_dataset(8, 3);
        let distinct: std::collections::BTreeSet<_> = d.labels.iter().collect();
        assert!(distinct.len() >= 2);
        assert!(d.labels.iter().all(|&l| l < SYNTH_CLASSES));
    }

    #[test]
    fn pixels_in_range() {
        let d = synth_dataset(32, 7);
        for img in &d.images {
            assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn image_folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, class) in ["cats", "dogs"].iter().enumerate() {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            let img = image::RgbImage::from_fn(40, 30, |x, _| image::Rgb([(x * 6) as u8, ci as u8 * 200, 10]));
            img.save(dir.path().join(class).join("a.png")).unwrap();
        }
        let d = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.num_classes, 2);
        assert_eq!((d.images[0].height, d.images[0].width), (16, 16));
    }
}
