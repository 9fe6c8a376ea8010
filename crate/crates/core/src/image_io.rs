//! PNG and binary PGM/PPM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use thiserror::Error;

use crate::raster::Raster;

#[derive(Error, Debug)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported image format (expected .png, .pgm, .ppm or .pnm)")]
    Format { path: String },
}

fn format_for(path: &Path) -> Result<ImageFormat, ImageIoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(ImageIoError::Format {
            path: path.display().to_string(),
        }),
    }
}

/// Reads an image. Single-channel sources stay grayscale; everything else becomes RGB
/// (alpha is discarded, 16-bit samples are reduced to 8 bits).
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster, ImageIoError> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let codec_err = |source| ImageIoError::Codec {
        path: path.display().to_string(),
        source,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| codec_err(image::ImageError::IoError(e)))?
        .with_guessed_format()
        .map_err(|e| codec_err(image::ImageError::IoError(e)))?;
    let mut reader = reader;
    if reader.format().is_none() {
        reader.set_format(format);
    }
    let img = reader.decode().map_err(codec_err)?;
    Ok(from_dynamic(img))
}

fn from_dynamic(img: DynamicImage) -> Raster {
    let grayscale = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    if grayscale {
        let g = img.into_luma8();
        let (w, h) = g.dimensions();
        Raster::new(w, h, 1, g.into_raw()).expect("decoder geometry")
    } else {
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        Raster::new(w, h, 3, rgb.into_raw()).expect("decoder geometry")
    }
}

/// Writes PNG, or binary PGM/PPM depending on the extension.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let (w, h) = raster.dimensions();
    let codec_err = |source| ImageIoError::Codec {
        path: path.display().to_string(),
        source,
    };
    let color = if raster.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    if format == ImageFormat::Pnm {
        let subtype = if raster.channels() == 1 {
            PnmSubtype::Graymap(SampleEncoding::Binary)
        } else {
            PnmSubtype::Pixmap(SampleEncoding::Binary)
        };
        let file = File::create(path).map_err(|e| codec_err(image::ImageError::IoError(e)))?;
        let mut writer = BufWriter::new(file);
        PnmEncoder::new(&mut writer)
            .with_subtype(subtype)
            .write_image(raster.data(), w, h, color)
            .map_err(codec_err)?;
        return writer
            .flush()
            .map_err(|e| codec_err(image::ImageError::IoError(e)));
    }
    image::save_buffer_with_format(path, raster.data(), w, h, color, format).map_err(codec_err)
}
