//! Fit a NIQE model. With no arguments, refits the bundled model from its
//! synthetic corpus; otherwise fits on the PNG files of a directory.
//!
//! cargo run --example niqe_fit -- [IMAGE_DIR] [OUT]

use std::path::PathBuf;

use vqlight::metrics::{fit_desk_model, NiqeFitOptions, NiqeModel};
use vqlight::pipeline::data::list_pngs;

fn main() -> vqlight::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, out) = match args.as_slice() {
        [] => (fit_desk_model()?, PathBuf::from("niqe_desk.vqm")),
        [dir, rest @ ..] => {
            let images = list_pngs(dir.as_ref())?
                .iter()
                .map(vqlight::image::load_image)
                .collect::<vqlight::Result<Vec<_>>>()?;
            let out = rest.first().map(PathBuf::from).unwrap_or_else(|| "niqe.vqm".into());
            (NiqeModel::fit(&images, NiqeFitOptions::default())?, out)
        }
    };
    model.save(&out)?;
    println!("fitted on {} patches -> {}", model.patches, out.display());
    Ok(())
}
