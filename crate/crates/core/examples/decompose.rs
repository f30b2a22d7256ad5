//! Pixel-level interventions on one image: brightness and chroma scaling in
//! YCrCb, then frequency fusion that keeps the brightness branch's phase.
//!
//! `cargo run --example decompose [image.png]`

use vqlight::image::{fft_decompose, load_image, save_image, Image};
use vqlight::pci::{brightness_intervene, color_intervene, frequency_fuse};
use vqlight::pipeline::data::synthetic_pairs;

fn mean_ycrcb(img: &Image) -> [f64; 3] {
    let y = img.to_ycrcb().unwrap();
    let mut m = [0.0; 3];
    for px in y.data().chunks_exact(3) {
        for c in 0..3 {
            m[c] += px[c] as f64;
        }
    }
    m.map(|v| v / (img.height() * img.width()) as f64)
}

fn max_phase_gap(a: &Image, b: &Image) -> f64 {
    let (pa, pb) = (fft_decompose(a).unwrap(), fft_decompose(b).unwrap());
    // Phase is meaningless where the amplitude vanishes.
    pa.phase
        .iter()
        .zip(&pb.phase)
        .zip(&pa.amplitude)
        .filter(|(_, &amp)| amp > 1e-6)
        .map(|((x, y), _)| {
            let d = (x - y).rem_euclid(std::f64::consts::TAU);
            d.min(std::f64::consts::TAU - d)
        })
        .fold(0.0, f64::max)
}

fn main() -> vqlight::Result<()> {
    let img = match std::env::args().nth(1) {
        Some(p) => load_image(p)?,
        None => synthetic_pairs(1, 64, 64, 7).low.remove(0),
    };
    let [y, cr, cb] = mean_ycrcb(&img);
    println!(
        "input {}x{}  mean Y {y:.4} Cr {cr:.4} Cb {cb:.4}",
        img.height(),
        img.width()
    );

    let i_b = brightness_intervene(&img, 2.5)?;
    let i_c = color_intervene(&img, [0.5, 0.5])?;
    for (name, out) in [("brightness x2.5", &i_b), ("chroma x0.5", &i_c)] {
        let [y, cr, cb] = mean_ycrcb(out);
        println!("{name:<16} mean Y {y:.4} Cr {cr:.4} Cb {cb:.4}");
    }

    for alpha in [0.0, 0.3, 1.0] {
        let fused = frequency_fuse(&i_b, &i_c, alpha)?;
        let [y, ..] = mean_ycrcb(&fused);
        println!(
            "fuse alpha {alpha:.1}  mean Y {y:.4}  max phase gap to brightness branch {:.2e}",
            max_phase_gap(&fused, &i_b)
        );
    }

    let dir = std::env::temp_dir().join("vqlight-decompose");
    std::fs::create_dir_all(&dir).map_err(|e| vqlight::Error::io(&dir, e))?;
    save_image(&i_b, dir.join("brightness.png"))?;
    save_image(&i_c, dir.join("color.png"))?;
    save_image(&frequency_fuse(&i_b, &i_c, 0.3)?, dir.join("fused.png"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
