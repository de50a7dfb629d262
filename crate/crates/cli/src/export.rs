//! 8-bit grayscale PNG export of normalized magnitudes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use pmri_core::complex::{normalize_unit_range, rss_combine, RealImage};
use pmri_core::cplx::Tensor;

use crate::error::{at, CliError, Result};
use crate::manifest::prepare_file;

/// Rank 2 exports `|x|`; rank 3 exports one coil or, by default, the RSS.
pub fn tensor_magnitude(t: Tensor, coil: Option<usize>) -> Result<RealImage> {
    match (t.dims.len(), coil) {
        (2, None) => Ok(t.into_image()?.magnitude()),
        (2, Some(_)) => Err(CliError::Config("--coil needs a rank-3 tensor".into())),
        (3, None) => Ok(rss_combine(&t.into_stack()?)),
        (3, Some(c)) => {
            let stack = t.into_stack()?;
            if c >= stack.coils() {
                return Err(CliError::Config(format!("coil {c} of {}", stack.coils())));
            }
            Ok(stack.image(c).magnitude())
        }
        _ => Err(pmri_core::Error::BadFile(format!("cannot export a rank-{} tensor", t.dims.len())).into()),
    }
}

/// Min-max scales to `0..=255`; a constant image is an error.
pub fn to_gray8(img: &RealImage) -> Result<Vec<u8>> {
    let (unit, _) = normalize_unit_range(img)?;
    Ok(unit
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn write_png(img: &RealImage, path: &Path, force: bool) -> Result<()> {
    let pixels = to_gray8(img)?;
    prepare_file(path, force)?;
    let file = at(path, File::create(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::File {
        context: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&pixels).map_err(png_err)?;
    w.finish().map_err(png_err)
}

pub fn export(input: &Path, output: &Path, coil: Option<usize>, force: bool) -> Result<()> {
    let img = tensor_magnitude(Tensor::load(input)?, coil)?;
    write_png(&img, output, force)
}
