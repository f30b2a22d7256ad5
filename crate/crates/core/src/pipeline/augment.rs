//! Paired random crop and horizontal flip.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// One augmentation decision, shared by both images of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip: bool,
}

/// Draw a `size x size` window inside `h x w` (after padding up to `size`).
pub fn sample_window<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, size: usize, hflip: bool) -> Window {
    let (h, w) = (h.max(size), w.max(size));
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    let flip = hflip && rng.random_bool(0.5);
    Window { y, x, size, flip }
}

/// Reflect-pad up to the window size if needed, crop, then flip.
pub fn apply(img: &Image, win: Window) -> Result<Image> {
    let padded;
    let src = if img.height() < win.size || img.width() < win.size {
        padded = img.reflect_pad(win.size, win.size);
        &padded
    } else {
        img
    };
    let out = src.crop(win.y, win.x, win.size, win.size)?;
    Ok(if win.flip { out.flip_horizontal() } else { out })
}

/// Same window and flip for both images.
pub fn augment_pair<R: Rng + ?Sized>(
    rng: &mut R,
    low: &Image,
    gt: &Image,
    size: usize,
    hflip: bool,
) -> Result<(Image, Image, Window)> {
    if !low.same_dims(gt) {
        return Err(Error::Shape(format!(
            "pair {}x{} vs {}x{}",
            low.height(),
            low.width(),
            gt.height(),
            gt.width()
        )));
    }
    let win = sample_window(rng, low.height(), low.width(), size, hflip);
    Ok((apply(low, win)?, apply(gt, win)?, win))
}
