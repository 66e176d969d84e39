//! Image files. PNG and binary PPM are read; PNG is written.

use std::path::Path;

use uts_core::tiling::{RgbImage, TileGrid};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: empty image")]
    Empty { path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads any supported image and converts it to 8-bit RGB.
pub fn read_image(path: &Path) -> Result<RgbImage, ImageIoError> {
    let decoded = image::open(path).map_err(|source| ImageIoError::Codec {
        path: path.display().to_string(),
        source,
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    RgbImage::new(w as usize, h as usize, pixels).map_err(|_| ImageIoError::Empty {
        path: path.display().to_string(),
    })
}

fn to_buffer(img: &RgbImage) -> image::RgbImage {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("pixel count matches dimensions")
}

/// Writes an 8-bit RGB PNG, creating parent directories.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), ImageIoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_buffer(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageIoError::Codec {
            path: path.display().to_string(),
            source,
        })
}

/// Writes every tile of `grid` as `r{row}_c{col}.png` under `dir`.
pub fn export_tiles(dir: &Path, img: &RgbImage, grid: &TileGrid) -> Result<usize, ImageIoError> {
    std::fs::create_dir_all(dir)?;
    let s = grid.tile_size;
    for t in &grid.tiles {
        let mut pixels = Vec::with_capacity(s * s);
        for y in t.pixel_y..t.pixel_y + s {
            pixels.extend_from_slice(&img.pixels[y * img.width + t.pixel_x..][..s]);
        }
        let tile = RgbImage::new(s, s, pixels).expect("tile is non-empty");
        write_png(&dir.join(format!("r{}_c{}.png", t.row, t.col)), &tile)?;
    }
    Ok(grid.len())
}
