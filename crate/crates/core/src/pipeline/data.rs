//! Dataset layout on disk and a synthetic paired corpus.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "not a directory"));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Low/normal pairs matched by file name: `root/low/NAME.png` with
/// `root/high/NAME.png`.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub names: Vec<String>,
    pub low: Vec<Image>,
    pub high: Vec<Image>,
}

impl PairedDataset {
    pub fn load(root: &Path) -> Result<Self> {
        let low_dir = root.join("low");
        let high_dir = root.join("high");
        let lows = list_pngs(&low_dir)?;
        let highs = list_pngs(&high_dir)?;
        let low_names: Vec<String> = lows.iter().map(|p| file_name(p)).collect();
        let high_names: Vec<String> = highs.iter().map(|p| file_name(p)).collect();
        if low_names != high_names {
            let missing: Vec<&String> = low_names
                .iter()
                .filter(|n| !high_names.contains(n))
                .chain(high_names.iter().filter(|n| !low_names.contains(n)))
                .collect();
            return Err(Error::data(
                root,
                format!("unmatched files between low/ and high/: {missing:?}"),
            ));
        }
        if low_names.is_empty() {
            return Err(Error::data(&low_dir, "no PNG files"));
        }
        let mut low = Vec::new();
        let mut high = Vec::new();
        for (l, h) in lows.iter().zip(&highs) {
            let (li, hi) = (load_image(l)?, load_image(h)?);
            if !li.same_dims(&hi) {
                return Err(Error::data(l, "pair dimensions differ"));
            }
            low.push(li);
            high.push(hi);
        }
        Ok(Self {
            names: low_names,
            low,
            high,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Write the pairs in the on-disk layout.
    pub fn save(&self, root: &Path) -> Result<()> {
        for sub in ["low", "high"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for ((name, l), h) in self.names.iter().zip(&self.low).zip(&self.high) {
            save_image(l, root.join("low").join(name))?;
            save_image(h, root.join("high").join(name))?;
        }
        Ok(())
    }
}

/// Images of a flat folder, or of `root/high/` when that exists.
pub fn load_image_folder(root: &Path) -> Result<(Vec<String>, Vec<Image>)> {
    let dir = if root.join("high").is_dir() {
        root.join("high")
    } else {
        root.to_path_buf()
    };
    let files = list_pngs(&dir)?;
    if files.is_empty() {
        return Err(Error::data(&dir, "no PNG files"));
    }
    let images = files.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    Ok((files.iter().map(|p| file_name(p)).collect(), images))
}

/// Random smooth image: per channel, a base level plus three low-frequency
/// cosines.
pub fn smooth_image<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    let mut waves = [[(0.0f64, 0.0f64, 0.0f64, 0.0f64); 3]; 3];
    let mut base = [0.0f64; 3];
    for c in 0..3 {
        base[c] = rng.random_range(0.3..0.7);
        for wv in waves[c].iter_mut() {
            *wv = (
                rng.random_range(0.05..0.15),
                rng.random_range(0..3) as f64,
                rng.random_range(0..3) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
    }
    Image::from_fn(h, w, |y, x| {
        std::array::from_fn(|c| {
            let mut v = base[c];
            for &(amp, fy, fx, ph) in &waves[c] {
                let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph;
                v += amp * t.cos();
            }
            v.clamp(0.0, 1.0) as f32
        })
    })
}

/// Dark version of `img`: `0.6 v^2` plus Gaussian noise, clamped.
pub fn darken<R: Rng + ?Sized>(img: &Image, noise_std: f64, rng: &mut R) -> Image {
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let mut out = img.clone();
    for v in out.data_mut() {
        let d = 0.6 * (*v as f64).powi(2) + noise.sample(rng);
        *v = d.clamp(0.0, 1.0) as f32;
    }
    out
}

/// `n` synthetic pairs of size `h x w`, fully determined by `seed`.
pub fn synthetic_pairs(n: usize, h: usize, w: usize, seed: u64) -> PairedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low = Vec::with_capacity(n);
    let mut high = Vec::with_capacity(n);
    for _ in 0..n {
        let gt = smooth_image(h, w, &mut rng);
        low.push(darken(&gt, 0.01, &mut rng));
        high.push(gt);
    }
    PairedDataset {
        names: (0..n).map(|i| format!("{i:04}.png")).collect(),
        low,
        high,
    }
}
