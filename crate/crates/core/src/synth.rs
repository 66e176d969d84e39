//! Procedural three-class tissue textures with exact tile labels.
//!
//! Every 32×32 tile is painted independently from its own seed, so the label
//! of a tile is exactly the class whose texture filled it:
//!
//! - tumor: dense dark-purple nuclei on a pink background,
//! - stroma: smooth pink-to-green gradients with faint fibre streaks,
//! - fat: pale rounded cells with white interiors and thin pink membranes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tiling::{RgbImage, TileGrid};
use crate::{TissueClass, NUM_CLASSES, TILE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumorTexture {
    pub background: [u8; 3],
    pub nucleus: [u8; 3],
    pub nuclei_per_tile: (usize, usize),
    pub radius: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StromaTexture {
    pub from: [u8; 3],
    pub to: [u8; 3],
    /// Streak wavelength in pixels.
    pub streak_period: f64,
    pub streak_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FatTexture {
    pub membrane: [u8; 3],
    pub interior: [u8; 3],
    /// Spacing of the jittered cell-center lattice.
    pub cell_spacing: f64,
    pub membrane_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Textures {
    pub tumor: TumorTexture,
    pub stroma: StromaTexture,
    pub fat: FatTexture,
}

impl Default for Textures {
    fn default() -> Self {
        Textures {
            tumor: TumorTexture {
                background: [226, 160, 196],
                nucleus: [92, 40, 120],
                nuclei_per_tile: (12, 20),
                radius: (1.8, 3.6),
            },
            stroma: StromaTexture {
                from: [218, 130, 170],
                to: [170, 196, 150],
                streak_period: 6.0,
                streak_amplitude: 10.0,
            },
            fat: FatTexture {
                membrane: [214, 150, 186],
                interior: [248, 244, 248],
                cell_spacing: 11.0,
                membrane_width: 1.6,
            },
        }
    }
}

/// How classes are laid out over the tiles of an ROI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassLayout {
    Pure(TissueClass),
    /// One label per tile, row-major.
    PerTile(Vec<usize>),
    /// Independent uniformly drawn class per tile.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub layout: ClassLayout,
    pub textures: Textures,
    /// Amplitude of uniform pixel noise as a fraction of 255.
    pub noise: f64,
    pub seed: u64,
    pub patient_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 96,
            height: 96,
            layout: ClassLayout::Pure(TissueClass::Tumor),
            textures: Textures::default(),
            noise: 0.08,
            seed: 0,
            patient_id: String::from("P000"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub image: RgbImage,
    /// Geometry plus ground-truth labels.
    pub grid: TileGrid,
    pub patient_id: String,
}

fn tile_rng(seed: u64, tile: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tile as u64 + 1);
    rng
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    core::array::from_fn(|c| a[c] as f64 + (b[c] as f64 - a[c] as f64) * t)
}

fn paint(class: TissueClass, tex: &Textures, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let s = TILE_SIZE;
    let mut px = vec![[0.0; 3]; s * s];
    match class {
        TissueClass::Tumor => {
            let t = &tex.tumor;
            px.fill(t.background.map(f64::from));
            let count = rng.gen_range(t.nuclei_per_tile.0..=t.nuclei_per_tile.1);
            for _ in 0..count {
                let cx = rng.gen_range(0.0..s as f64);
                let cy = rng.gen_range(0.0..s as f64);
                let r = rng.gen_range(t.radius.0..t.radius.1);
                let shade = rng.gen_range(0.85..1.15);
                let color = t.nucleus.map(|v| (v as f64 * shade).min(255.0));
                for y in 0..s {
                    for x in 0..s {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            px[y * s + x] = color;
                        }
                    }
                }
            }
        }
        TissueClass::Stroma => {
            let t = &tex.stroma;
            let angle = rng.gen_range(0.0..2.0 * PI);
            let (ca, sa) = (libm::cos(angle), libm::sin(angle));
            let phase = rng.gen_range(0.0..2.0 * PI);
            let offset = rng.gen_range(-0.2..0.2);
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 - s as f64 / 2.0) / s as f64;
                    let v = (y as f64 - s as f64 / 2.0) / s as f64;
                    let along = (u * ca + v * sa + 0.5 + offset).clamp(0.0, 1.0);
                    let across = -u * sa + v * ca;
                    let streak = t.streak_amplitude
                        * libm::sin(2.0 * PI * across * s as f64 / t.streak_period + phase);
                    let base = lerp(t.from, t.to, along);
                    px[y * s + x] = base.map(|c| c + streak);
                }
            }
        }
        TissueClass::Fat => {
            let t = &tex.fat;
            // Jittered lattice of cell centers, extended one cell beyond the
            // tile so border cells are closed.
            let n = libm::ceil(s as f64 / t.cell_spacing) as i64 + 1;
            let mut centers = Vec::new();
            for j in -1..=n {
                for i in -1..=n {
                    let jx = rng.gen_range(-0.3..0.3) * t.cell_spacing;
                    let jy = rng.gen_range(-0.3..0.3) * t.cell_spacing;
                    centers.push((
                        (i as f64 + 0.5) * t.cell_spacing + jx,
                        (j as f64 + 0.5) * t.cell_spacing + jy,
                    ));
                }
            }
            for y in 0..s {
                for x in 0..s {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
                    for &(cx, cy) in &centers {
                        let d = libm::sqrt((fx - cx) * (fx - cx) + (fy - cy) * (fy - cy));
                        if d < d1 {
                            d2 = d1;
                            d1 = d;
                        } else if d < d2 {
                            d2 = d;
                        }
                    }
                    px[y * s + x] = if d2 - d1 < t.membrane_width {
                        t.membrane.map(f64::from)
                    } else {
                        t.interior.map(f64::from)
                    };
                }
            }
        }
    }
    px
}

/// Renders one ROI and its ground-truth tile grid.
pub fn generate_roi(spec: &SynthSpec) -> Result<Roi> {
    if spec.width == 0
        || spec.height == 0
        || spec.width % TILE_SIZE != 0
        || spec.height % TILE_SIZE != 0
    {
        return Err(Error::invalid(format!(
            "ROI size {}×{} is not a positive multiple of {TILE_SIZE}",
            spec.width, spec.height
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::invalid(format!("noise {} outside [0, 1]", spec.noise)));
    }
    let mut grid = TileGrid::new(spec.width, spec.height, TILE_SIZE)?;
    let labels: Vec<usize> = match &spec.layout {
        ClassLayout::Pure(c) => vec![c.index(); grid.len()],
        ClassLayout::PerTile(l) => l.clone(),
        ClassLayout::Random => {
            let mut rng = tile_rng(spec.seed, usize::MAX - 1);
            (0..grid.len()).map(|_| rng.gen_range(0..NUM_CLASSES)).collect()
        }
    };
    grid.set_labels(&labels)?;

    let mut image = RgbImage::filled(spec.width, spec.height, [0; 3]);
    let amp = spec.noise * 255.0;
    for (i, tile) in grid.tiles.iter().enumerate() {
        let mut rng = tile_rng(spec.seed, i);
        let class = TissueClass::from_index(labels[i])?;
        let px = paint(class, &spec.textures, &mut rng);
        for y in 0..TILE_SIZE {
            for x in 0..TILE_SIZE {
                let c = px[y * TILE_SIZE + x].map(|v| {
                    let n = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
                    libm::round(v + n).clamp(0.0, 255.0) as u8
                });
                image.set(tile.pixel_x + x, tile.pixel_y + y, c);
            }
        }
    }
    Ok(Roi {
        image,
        grid,
        patient_id: spec.patient_id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRoi {
    /// `roi_0007` style identifier.
    pub name: String,
    /// Class of a pure ROI; `None` for mixed layouts.
    pub class: Option<TissueClass>,
    pub roi: Roi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rois: Vec<DatasetRoi>,
}

impl Dataset {
    pub fn tile_count(&self) -> usize {
        self.rois.iter().map(|r| r.roi.grid.len()).sum()
    }

    pub fn patients(&self) -> Vec<&str> {
        self.rois.iter().map(|r| r.roi.patient_id.as_str()).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.rois {
            if let Some(c) = r.class {
                counts[c.index()] += 1;
            }
        }
        counts
    }
}

/// `n_per_class` ROIs of each class (or `3·n_per_class` random-layout ROIs
/// when `mixed`), rendered from `template` with per-ROI seeds derived from
/// `seed`. Patients own one to three ROIs each.
pub fn generate_dataset(n_per_class: usize, template: &SynthSpec, seed: u64, mixed: bool) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("need at least one ROI per class"));
    }
    let total = n_per_class * NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roi_seeds: Vec<u64> = (0..total).map(|_| rng.gen()).collect();

    // Deal ROIs to patients in shuffled order, 1–3 at a time.
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut patient_of = vec![0usize; total];
    let (mut at, mut patient) = (0, 0);
    while at < total {
        let take = rng.gen_range(1..=3).min(total - at);
        for &roi in &order[at..at + take] {
            patient_of[roi] = patient;
        }
        at += take;
        patient += 1;
    }
    let width = format!("{patient}").len().max(3);

    let mut rois = Vec::with_capacity(total);
    for i in 0..total {
        let class = (!mixed).then(|| TissueClass::ALL[i / n_per_class]);
        let spec = SynthSpec {
            layout: class.map_or(ClassLayout::Random, ClassLayout::Pure),
            seed: roi_seeds[i],
            patient_id: format!("P{:0width$}", patient_of[i]),
            ..template.clone()
        };
        rois.push(DatasetRoi {
            name: format!("roi_{i:04}"),
            class,
            roi: generate_roi(&spec)?,
        });
    }
    Ok(Dataset { rois })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::extract_tile;
    use alloc::collections::BTreeMap;

    #[test]
    fn same_spec_same_pixels() {
        let spec = SynthSpec {
            layout: ClassLayout::Random,
            seed: 9,
            ..SynthSpec::default()
        };
        assert_eq!(generate_roi(&spec).unwrap(), generate_roi(&spec).unwrap());
        let other = SynthSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_roi(&spec).unwrap().image, generate_roi(&other).unwrap().image);
    }

    #[test]
    fn labels_follow_layout() {
        let spec = SynthSpec {
            width: 64,
            height: 32,
            layout: ClassLayout::PerTile(vec![2, 0]),
            ..SynthSpec::default()
        };
        let roi = generate_roi(&spec).unwrap();
        assert_eq!(roi.grid.labels, vec![Some(2), Some(0)]);
        let bad = SynthSpec { width: 70, ..spec };
        assert!(generate_roi(&bad).is_err());
    }

    #[test]
    fn noiseless_tiles_stay_in_class_palette() {
        let tex = Textures::default();
        for class in TissueClass::ALL {
            let spec = SynthSpec {
                layout: ClassLayout::Pure(class),
                noise: 0.0,
                ..SynthSpec::default()
            };
            let roi = generate_roi(&spec).unwrap();
            if class == TissueClass::Fat {
                assert!(roi
                    .image
                    .pixels
                    .iter()
                    .all(|&p| p == tex.fat.interior || p == tex.fat.membrane));
            }
            if class == TissueClass::Tumor {
                assert!(roi.image.pixels.contains(&tex.tumor.background));
            }
        }
    }

    #[test]
    fn dataset_shape() {
        let ds = generate_dataset(3, &SynthSpec::default(), 1, false).unwrap();
        assert_eq!(ds.rois.len(), 9);
        assert_eq!(ds.tile_count(), 81);
        assert_eq!(ds.class_counts(), [3, 3, 3]);
        let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
        for p in ds.patients() {
            *per_patient.entry(p).or_default() += 1;
        }
        assert!(per_patient.values().all(|&n| (1..=3).contains(&n)));
        for r in &ds.rois {
            let c = r.class.unwrap().index();
            assert!(r.roi.grid.labels.iter().all(|&l| l == Some(c)));
        }
        assert_eq!(ds, generate_dataset(3, &SynthSpec::default(), 1, false).unwrap());
    }

    #[test]
    fn large_dataset_class_structure() {
        let template = SynthSpec {
            width: 32,
            height: 32,
            ..SynthSpec::default()
        };
        let ds = generate_dataset(153, &template, 0, false).unwrap();
        assert_eq!(ds.class_counts(), [153, 153, 153]);
        assert_eq!(ds.tile_count(), 459);
    }

    #[test]
    fn mixed_dataset_has_varied_tiles() {
        let ds = generate_dataset(2, &SynthSpec::default(), 4, true).unwrap();
        assert!(ds.rois.iter().all(|r| r.class.is_none()));
        let distinct: usize = ds
            .rois
            .iter()
            .map(|r| {
                let mut l: Vec<_> = r.roi.grid.labels.clone();
                l.sort();
                l.dedup();
                l.len()
            })
            .max()
            .unwrap();
        assert!(distinct > 1);
    }

    fn mean_color(roi: &Roi, i: usize) -> [f64; 3] {
        let t = extract_tile(&roi.image, &roi.grid, i).unwrap();
        let mut m = [0.0; 3];
        for (j, v) in t.data().iter().enumerate() {
            m[j % 3] += v;
        }
        m.map(|v| v / (TILE_SIZE * TILE_SIZE) as f64)
    }

    #[test]
    fn mean_color_three_nn_separates_classes() {
        let ds = generate_dataset(10, &SynthSpec::default(), 21, false).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (k, r) in ds.rois.iter().enumerate() {
            for i in 0..r.roi.grid.len() {
                let item = (mean_color(&r.roi, i), r.roi.grid.labels[i].unwrap());
                if k % 2 == 0 { train.push(item) } else { test.push(item) }
            }
        }
        let mut hits = 0;
        for (f, label) in &test {
            let mut d: Vec<(f64, usize)> = train
                .iter()
                .map(|(g, l)| ((0..3).map(|c| (f[c] - g[c]).powi(2)).sum(), *l))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = [0; 3];
            d[..3].iter().for_each(|(_, l)| votes[*l] += 1);
            let pred = (0..3).max_by_key(|&c| (votes[c], core::cmp::Reverse(c))).unwrap();
            hits += (pred == *label) as usize;
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc > 0.9, "3-NN accuracy {acc}");
    }
}
