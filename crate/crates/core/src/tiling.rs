//! Tile grids over RGB images.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::refine::{ColorMask, MaskState, Palette};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.pixels[y * self.width + x] = c;
    }
}

/// Rec. 601 luma in [0, 255].
pub fn luminance(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub col: usize,
    pub row: usize,
    pub pixel_x: usize,
    pub pixel_y: usize,
    /// Flagged blank; keeps its place in the grid.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub cols: usize,
    pub rows: usize,
    /// Size of the source image, including any dropped border strip.
    pub width: usize,
    pub height: usize,
    /// Row-major: index = row·cols + col.
    pub tiles: Vec<Tile>,
    pub labels: Vec<Option<usize>>,
    pub probs: Vec<Option<[f64; NUM_CLASSES]>>,
}

impl TileGrid {
    /// Geometry of a `width`×`height` image cut into `tile_size` squares.
    /// Partial tiles along the right and bottom edges are dropped.
    pub fn new(width: usize, height: usize, tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::invalid("tile size must be positive"));
        }
        let (cols, rows) = (width / tile_size, height / tile_size);
        if cols == 0 || rows == 0 {
            return Err(Error::invalid(format!(
                "{width}×{height} image is smaller than one {tile_size}×{tile_size} tile"
            )));
        }
        let tiles = (0..rows)
            .flat_map(|row| {
                (0..cols).map(move |col| Tile {
                    col,
                    row,
                    pixel_x: col * tile_size,
                    pixel_y: row * tile_size,
                    excluded: false,
                })
            })
            .collect();
        let n = cols * rows;
        Ok(TileGrid {
            tile_size,
            cols,
            rows,
            width,
            height,
            tiles,
            labels: vec![None; n],
            probs: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn index_of(&self, col: usize, row: usize) -> Option<usize> {
        (col < self.cols && row < self.rows).then(|| row * self.cols + col)
    }

    /// Pixel extent covered by full tiles.
    pub fn covered(&self) -> (usize, usize) {
        (self.cols * self.tile_size, self.rows * self.tile_size)
    }

    /// Sets every tile's label, checking the range.
    pub fn set_labels(&mut self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} tiles",
                labels.len(),
                self.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange(bad));
        }
        self.labels = labels.iter().map(|&l| Some(l)).collect();
        Ok(())
    }

    /// Included tiles' labels; `None` entries are skipped.
    pub fn included_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.tiles
            .iter()
            .zip(&self.labels)
            .filter(|(t, _)| !t.excluded)
            .filter_map(|(_, l)| *l)
    }
}

/// Cuts `image` into full `tile_size` tiles. With `blank_threshold` set, a
/// tile whose mean luminance exceeds it is flagged excluded.
pub fn partition(image: &RgbImage, tile_size: usize, blank_threshold: Option<f64>) -> Result<TileGrid> {
    if image.pixels.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mut grid = TileGrid::new(image.width, image.height, tile_size)?;
    if let Some(threshold) = blank_threshold {
        for tile in &mut grid.tiles {
            let mut sum = 0.0;
            for y in tile.pixel_y..tile.pixel_y + tile_size {
                let row = &image.pixels[y * image.width + tile.pixel_x..][..tile_size];
                sum += row.iter().map(|&c| luminance(c)).sum::<f64>();
            }
            tile.excluded = sum / (tile_size * tile_size) as f64 > threshold;
        }
    }
    Ok(grid)
}

/// Tile `index` as a `size×size×3` tensor scaled to [0, 1].
pub fn extract_tile(image: &RgbImage, grid: &TileGrid, index: usize) -> Result<Tensor> {
    let tile = grid.tiles.get(index).ok_or(Error::OutOfRange {
        index,
        len: grid.len(),
    })?;
    let s = grid.tile_size;
    if tile.pixel_x + s > image.width || tile.pixel_y + s > image.height {
        return Err(Error::invalid("tile lies outside the image"));
    }
    let mut data = Vec::with_capacity(s * s * 3);
    for y in tile.pixel_y..tile.pixel_y + s {
        for c in &image.pixels[y * image.width + tile.pixel_x..][..s] {
            data.extend(c.iter().map(|&v| v as f64 / 255.0));
        }
    }
    Tensor::new(vec![s, s, 3], data)
}

/// Paints every tile in its class color at full resolution. Excluded tiles
/// and the dropped border strip are black.
pub fn assemble_mask(grid: &TileGrid, palette: &Palette) -> Result<ColorMask> {
    let mut mask = ColorMask::black(grid.width, grid.height, MaskState::Raw);
    let s = grid.tile_size;
    for (i, tile) in grid.tiles.iter().enumerate() {
        if tile.excluded {
            continue;
        }
        let label = grid.labels[i].ok_or_else(|| {
            Error::invalid(format!("tile (col {}, row {}) has no label", tile.col, tile.row))
        })?;
        let color = palette.color(label)?.map(f64::from);
        for y in tile.pixel_y..tile.pixel_y + s {
            let start = y * grid.width + tile.pixel_x;
            mask.pixels[start..start + s].fill(color);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TILE_SIZE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..w * h).map(|_| rng.gen()).collect();
        RgbImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn grid_offsets_for_64() {
        let g = partition(&RgbImage::filled(64, 64, [0; 3]), TILE_SIZE, None).unwrap();
        let offsets: Vec<_> = g.tiles.iter().map(|t| (t.pixel_x, t.pixel_y)).collect();
        assert_eq!(offsets, vec![(0, 0), (32, 0), (0, 32), (32, 32)]);
    }

    #[test]
    fn grid_counts() {
        let g = partition(&RgbImage::filled(512, 512, [0; 3]), TILE_SIZE, None).unwrap();
        assert_eq!(g.len(), 256);
        let g = partition(&RgbImage::filled(65, 64, [0; 3]), TILE_SIZE, None).unwrap();
        assert_eq!(g.len(), 4);
        assert!(partition(&RgbImage::filled(31, 64, [0; 3]), TILE_SIZE, None).is_err());
    }

    #[test]
    fn blank_filter_flags_without_moving() {
        let mut img = RgbImage::filled(64, 32, [250, 250, 250]);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, [120, 40, 90]);
            }
        }
        let g = partition(&img, TILE_SIZE, Some(220.0)).unwrap();
        assert!(!g.tiles[0].excluded);
        assert!(g.tiles[1].excluded);
        assert_eq!((g.tiles[1].pixel_x, g.tiles[1].pixel_y), (32, 0));
        let plain = partition(&img, TILE_SIZE, None).unwrap();
        assert!(plain.tiles.iter().all(|t| !t.excluded));
    }

    #[test]
    fn white_tile_is_all_ones() {
        let img = RgbImage::filled(32, 32, [255; 3]);
        let g = partition(&img, TILE_SIZE, None).unwrap();
        let t = extract_tile(&img, &g, 0).unwrap();
        assert_eq!(t.shape(), &[32, 32, 3]);
        assert!(t.data().iter().all(|&v| v == 1.0));
        assert!(extract_tile(&img, &g, 1).is_err());
    }

    #[test]
    fn marker_lands_at_local_offset() {
        let mut img = RgbImage::filled(64, 64, [0; 3]);
        img.set(33, 34, [255, 0, 0]);
        let g = partition(&img, TILE_SIZE, None).unwrap();
        let idx = g.index_of(1, 1).unwrap();
        let t = extract_tile(&img, &g, idx).unwrap();
        // HWC: row 2, column 1.
        assert_eq!(t.data()[(2 * 32 + 1) * 3], 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn extract_matches_crop_oracle() {
        let img = random_image(100, 70, 1);
        let g = partition(&img, TILE_SIZE, None).unwrap();
        for (i, tile) in g.tiles.iter().enumerate() {
            let t = extract_tile(&img, &g, i).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let c = img.get(tile.pixel_x + x, tile.pixel_y + y);
                    for ch in 0..3 {
                        assert_eq!(t.data()[(y * 32 + x) * 3 + ch], c[ch] as f64 / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_tumor_tile_mask() {
        let mut g = TileGrid::new(32, 32, TILE_SIZE).unwrap();
        g.set_labels(&[0]).unwrap();
        let m = assemble_mask(&g, &Palette::default()).unwrap();
        assert!(m.pixels.iter().all(|&p| p == [255.0, 0.0, 0.0]));
    }

    #[test]
    fn checkerboard_mask_per_pixel() {
        let mut g = TileGrid::new(128, 96, TILE_SIZE).unwrap();
        let labels: Vec<usize> = g.tiles.iter().map(|t| if (t.col + t.row) % 2 == 0 { 0 } else { 2 }).collect();
        g.set_labels(&labels).unwrap();
        g.tiles[5].excluded = true;
        let pal = Palette::default();
        let m = assemble_mask(&g, &pal).unwrap();
        for y in 0..96 {
            for x in 0..128 {
                let i = g.index_of(x / 32, y / 32).unwrap();
                let want = if i == 5 { [0.0; 3] } else { pal.color(labels[i]).unwrap().map(f64::from) };
                assert_eq!(m.pixels[y * 128 + x], want);
            }
        }
    }

    #[test]
    fn unlabeled_included_tile_rejected() {
        let mut g = TileGrid::new(64, 32, TILE_SIZE).unwrap();
        g.labels[0] = Some(1);
        assert!(assemble_mask(&g, &Palette::default()).is_err());
        g.tiles[1].excluded = true;
        assert!(assemble_mask(&g, &Palette::default()).is_ok());
    }

    proptest! {
        #[test]
        fn tile_count_formula(w in 32usize..300, h in 32usize..300) {
            let g = TileGrid::new(w, h, TILE_SIZE).unwrap();
            prop_assert_eq!(g.len(), (w / 32) * (h / 32));
            for t in &g.tiles {
                prop_assert_eq!(t.pixel_x, t.col * 32);
                prop_assert_eq!(t.pixel_y, t.row * 32);
                prop_assert!(t.pixel_x + 32 <= w && t.pixel_y + 32 <= h);
            }
        }

        #[test]
        fn constant_labels_paint_covered_area(w in 32usize..150, h in 32usize..150, label in 0usize..3) {
            let img = RgbImage::filled(w, h, [10, 20, 30]);
            let mut g = partition(&img, TILE_SIZE, None).unwrap();
            g.set_labels(&vec![label; g.len()]).unwrap();
            let pal = Palette::default();
            let m = assemble_mask(&g, &pal).unwrap();
            let (cw, ch) = g.covered();
            let want = pal.color(label).unwrap().map(f64::from);
            for y in 0..h {
                for x in 0..w {
                    let p = m.pixels[y * w + x];
                    if x < cw && y < ch {
                        prop_assert_eq!(p, want);
                    } else {
                        prop_assert_eq!(p, [0.0; 3]);
                    }
                }
            }
        }
    }
}
