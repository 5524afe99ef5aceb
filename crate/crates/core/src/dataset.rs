//! Dataset manifests, ingestion and a procedural image generator.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, resize_to, save_image, Image};
use crate::util::{json_hash, sha256_hex};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub sha256: String,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: PathBuf,
    pub split_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

/// Split sizes for `n` items at 60/20/20.
///
/// Each share is floored. Leftover items first go to any empty split, then
/// round-robin, train first.
pub fn split_counts(n: usize) -> [usize; 3] {
    let mut counts = [n * 6 / 10, n * 2 / 10, n * 2 / 10];
    let mut left = n - counts.iter().sum::<usize>();
    for i in 0..3 {
        if left > 0 && counts[i] == 0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    let mut i = 0;
    while left > 0 {
        counts[i % 3] += 1;
        left -= 1;
        i += 1;
    }
    counts
}

/// Assigns splits to `n` items using a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [train, val, _] = split_counts(n);
    let mut out = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn is_image_path(path: &Path) -> bool {
    crate::imaging::ImageFormat::from_path(path).is_some()
}

/// Scans `dir` for PNG/PPM files and builds a manifest.
///
/// Unreadable or undersized files are skipped and reported.
pub fn ingest(dir: &Path, seed: u64) -> Result<(DatasetManifest, Vec<SkippedFile>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();

    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let rel = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                skipped.push(SkippedFile { path: rel, reason: e.to_string() });
                continue;
            }
        };
        // undersized images fail to construct
        match load_image(&path) {
            Ok(img) => kept.push((rel, sha256_hex(&bytes), img.height(), img.width())),
            Err(e) => skipped.push(SkippedFile { path: rel, reason: e.to_string() }),
        }
    }
    if kept.is_empty() {
        return Err(Error::Dataset(format!("no usable images in {}", dir.display())));
    }
    let splits = assign_splits(kept.len(), seed);
    let entries = kept
        .into_iter()
        .zip(splits)
        .map(|((path, sha256, height, width), split)| ManifestEntry {
            path,
            sha256,
            height,
            width,
            split,
        })
        .collect();
    Ok((
        DatasetManifest {
            version: MANIFEST_VERSION,
            root: dir.to_path_buf(),
            split_seed: seed,
            entries,
        },
        skipped,
    ))
}

impl DatasetManifest {
    pub fn hash(&self) -> String {
        json_hash(&self.entries)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    /// Loads a split in manifest order, verifying content hashes. Images are
    /// center-cropped to a square and resampled to `size`×`size`.
    pub fn load_split(&self, split: Split, size: usize) -> Result<Vec<Image>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let path = self.root.join(&e.path);
                let bytes = std::fs::read(&path)
                    .map_err(|err| Error::Dataset(format!("{}: {err}", path.display())))?;
                if sha256_hex(&bytes) != e.sha256 {
                    return Err(Error::Dataset(format!("{}: content hash mismatch", e.path)));
                }
                square_resize(&load_image(&path)?, size)
            })
            .collect()
    }
}

/// Center-crops to a square, then resamples to `size`×`size`.
pub fn square_resize(img: &Image, size: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let side = h.min(w);
    let squared = if h == w {
        img.clone()
    } else {
        let (top, left) = ((h - side) / 2, (w - side) / 2);
        let mut out = Image::filled(side, side, 0.0)?;
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    out.set(c, y, x, img.get(c, top + y, left + x));
                }
            }
        }
        out
    };
    if side == size {
        Ok(squared)
    } else {
        resize_to(&squared, size, size)
    }
}

fn coverage(edge: f32, v: f32) -> f32 {
    (0.5 - v / edge).clamp(0.0, 1.0)
}

/// A deterministic natural-looking test image: smooth colour fields, a
/// handful of soft-edged shapes and fine grain.
pub fn synthetic_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let mut data = vec![0.0f32; 3 * size * size];

    for c in 0..3 {
        let base: f32 = rng.gen_range(0.15..0.85);
        let gx: f32 = rng.gen_range(-0.4..0.4);
        let gy: f32 = rng.gen_range(-0.4..0.4);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.5..4.0),
                    rng.gen_range(0.5..4.0),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                    rng.gen_range(0.02..0.12),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 / s - 0.5, y as f32 / s - 0.5);
                let mut val = base + gx * u + gy * v;
                for &(fx, fy, ph, amp) in &waves {
                    val += amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                data[(c * size + y) * size + x] = val;
            }
        }
    }

    let shapes = rng.gen_range(3..9);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alpha: f32 = rng.gen_range(0.5..1.0);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.05..0.35) * s, rng.gen_range(0.05..0.35) * s);
        let ellipse = rng.gen_bool(0.6);
        let shade: f32 = rng.gen_range(-0.3..0.3);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / rx, (y as f32 + 0.5 - cy) / ry);
                // signed distance in pixels, approximately
                let d = if ellipse {
                    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
                } else {
                    (dx.abs().max(dy.abs()) - 1.0) * rx.min(ry)
                };
                let cover = coverage(1.5, d) * alpha;
                if cover <= 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let i = (c * size + y) * size + x;
                    let fill = col + shade * dy.clamp(-1.0, 1.0);
                    data[i] = data[i] * (1.0 - cover) + fill * cover;
                }
            }
        }
    }

    let grain: f32 = rng.gen_range(0.005..0.03);
    for v in &mut data {
        *v = (*v + grain * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
    }
    Image::new(size, size, data).expect("consistent dimensions")
}

/// Writes `count` synthetic PNGs named `img_0000.png`… into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:04}.png"));
            save_image(&synthetic_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size), &path)?;
            Ok(path)
        })
        .collect()
}

/// In-memory synthetic split, quantized to 8 bits like a PNG round trip.
pub fn synthetic_set(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| synthetic_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size).quantized())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_count_examples() {
        assert_eq!(split_counts(100), [60, 20, 20]);
        assert_eq!(split_counts(3), [1, 1, 1]);
        assert_eq!(split_counts(1), [1, 0, 0]);
        assert_eq!(split_counts(2), [1, 1, 0]);
        assert_eq!(split_counts(101), [61, 20, 20]);
        assert_eq!(split_counts(0), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn splits_are_exhaustive_and_near_proportional(n in 0usize..2000, seed in any::<u64>()) {
            let c = split_counts(n);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            prop_assert!(c[0] >= n * 6 / 10 && c[0] <= n * 6 / 10 + 2);
            let s = assign_splits(n.min(300), seed);
            let cc = split_counts(n.min(300));
            for (k, split) in Split::ALL.iter().enumerate() {
                prop_assert_eq!(s.iter().filter(|x| *x == split).count(), cc[k]);
            }
        }
    }

    #[test]
    fn split_assignment_depends_on_seed_only() {
        let a = assign_splits(100, 7);
        assert_eq!(a, assign_splits(100, 7));
        let b = assign_splits(100, 8);
        assert_ne!(a, b);
    }

    #[test]
    fn synthetic_images_are_deterministic_and_varied() {
        let a = synthetic_image(1, 32);
        assert_eq!(a, synthetic_image(1, 32));
        assert!(a.mean_abs_diff(&synthetic_image(2, 32)) > 0.02);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / a.data().len() as f64;
        let var = a.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var > 1e-3);
    }

    #[test]
    fn ingest_skips_bad_files_and_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_corpus(dir.path(), 10, 24, 3).unwrap();
        image::RgbImage::new(4, 4).save(dir.path().join("tiny.png")).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

        let (m, skipped) = ingest(dir.path(), 7).unwrap();
        assert_eq!(m.entries.len(), 10);
        let names: Vec<_> = skipped.iter().map(|s| s.path.as_str()).collect();
        assert_eq!(names, ["broken.png", "tiny.png"]);
        assert_eq!([m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)], [6, 2, 2]);

        let (again, _) = ingest(dir.path(), 7).unwrap();
        assert_eq!(again, m);
        let (other, _) = ingest(dir.path(), 8).unwrap();
        assert_ne!(other.entries, m.entries);
        assert_eq!(other.count(Split::Train), 6);

        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.hash(), m.hash());
        let val = back.load_split(Split::Val, 16).unwrap();
        assert_eq!(val.len(), 2);
        assert!(val.iter().all(|i| i.height() == 16 && i.width() == 16));

        let victim = &back.entries[0].path;
        std::fs::write(dir.path().join(victim), b"tampered").unwrap();
        let split = back.entries[0].split;
        assert!(matches!(back.load_split(split, 16), Err(Error::Dataset(_))));
    }

    #[test]
    fn empty_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path(), 1), Err(Error::Dataset(_))));
    }

    #[test]
    fn square_resize_center_crops() {
        let mut img = Image::filled(10, 20, 0.0).unwrap();
        for y in 0..10 {
            for x in 5..15 {
                img.set(1, y, x, 1.0);
            }
        }
        let out = square_resize(&img, 10).unwrap();
        assert_eq!((out.height(), out.width()), (10, 10));
        assert!(out.data()[100..200].iter().all(|&v| v == 1.0));
    }
}
