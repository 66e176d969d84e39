//! Per-tile CSV manifest.
//!
//! One header line, then one row per tile:
//!
//! ```text
//! image,patient,tile_size,width,height,col,row,x,y,excluded,label,p_tumor,p_stroma,p_fat
//! roi_0000.png,P007,32,96,96,0,0,0,0,0,tumor,,,
//! ```
//!
//! Rows of one image are contiguous and list its tiles in row-major order.
//! `label` is a class name or empty; the three probabilities are all present
//! or all empty. Relative image paths are resolved against the manifest's
//! directory.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use uts_core::tiling::TileGrid;
use uts_core::TissueClass;

pub const HEADER: [&str; 14] = [
    "image", "patient", "tile_size", "width", "height", "col", "row", "x", "y", "excluded", "label",
    "p_tumor", "p_stroma", "p_fat",
];

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
}

fn parse_err(line: u64, msg: impl Into<String>) -> ManifestError {
    ManifestError::Parse {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub patient: String,
    pub grid: TileGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn single(image: impl Into<String>, patient: impl Into<String>, grid: TileGrid) -> Self {
        Manifest {
            entries: vec![ManifestEntry {
                image: image.into(),
                patient: patient.into(),
                grid,
            }],
        }
    }

    pub fn tile_count(&self) -> usize {
        self.entries.iter().map(|e| e.grid.len()).sum()
    }

    /// Labeled-tile counts per class over all entries.
    pub fn class_counts(&self) -> [u64; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            e.grid.included_labels().for_each(|l| c[l] += 1);
        }
        c
    }

    pub fn write_to(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for e in &self.entries {
            let g = &e.grid;
            for (i, t) in g.tiles.iter().enumerate() {
                let label = g.labels[i].map_or("", |l| TissueClass::ALL[l].name());
                let probs = g.probs[i].map_or([String::new(), String::new(), String::new()], |p| {
                    p.map(|v| v.to_string())
                });
                w.write_record([
                    e.image.as_str(),
                    e.patient.as_str(),
                    &g.tile_size.to_string(),
                    &g.width.to_string(),
                    &g.height.to_string(),
                    &t.col.to_string(),
                    &t.row.to_string(),
                    &t.pixel_x.to_string(),
                    &t.pixel_y.to_string(),
                    if t.excluded { "1" } else { "0" },
                    label,
                    &probs[0],
                    &probs[1],
                    &probs[2],
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let io = |source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = File::create(path).map_err(io)?;
        self.write_to(file).map_err(|e| io(e.into()))
    }

    pub fn read_from(input: impl Read) -> Result<Self, ManifestError> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut records = r.records();
        let header = match records.next() {
            Some(h) => h.map_err(|e| csv_err(&e))?,
            None => return Err(parse_err(1, "empty manifest")),
        };
        if header.iter().ne(HEADER) {
            return Err(parse_err(1, format!("expected header `{}`", HEADER.join(","))));
        }
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut filled = 0usize;
        let mut last_line = 1;
        for rec in records {
            let rec = rec.map_err(|e| csv_err(&e))?;
            let line = rec.position().map_or(0, |p| p.line());
            last_line = line;
            if rec.len() != HEADER.len() {
                return Err(parse_err(line, format!("expected {} fields, found {}", HEADER.len(), rec.len())));
            }
            let num = |i: usize| -> Result<usize, ManifestError> {
                rec[i]
                    .parse()
                    .map_err(|_| parse_err(line, format!("{}: `{}` is not a count", HEADER[i], &rec[i])))
            };
            let (image, patient) = (&rec[0], &rec[1]);
            let (tile_size, width, height) = (num(2)?, num(3)?, num(4)?);
            let starts_new = entries.last().is_none_or(|e| {
                e.image != image || filled == e.grid.len()
            });
            if starts_new {
                if let Some(e) = entries.last() {
                    if filled != e.grid.len() {
                        return Err(parse_err(line, format!("image {} has {filled} of {} tiles", e.image, e.grid.len())));
                    }
                }
                let grid = TileGrid::new(width, height, tile_size).map_err(|e| parse_err(line, e.to_string()))?;
                entries.push(ManifestEntry {
                    image: image.to_string(),
                    patient: patient.to_string(),
                    grid,
                });
                filled = 0;
            }
            let e = entries.last_mut().expect("entry pushed above");
            if e.patient != patient || e.grid.tile_size != tile_size || e.grid.width != width || e.grid.height != height {
                return Err(parse_err(line, format!("row disagrees with earlier rows of image {}", e.image)));
            }
            let t = &mut e.grid.tiles[filled];
            if (num(5)?, num(6)?, num(7)?, num(8)?) != (t.col, t.row, t.pixel_x, t.pixel_y) {
                return Err(parse_err(
                    line,
                    format!("expected tile col {} row {} at ({}, {})", t.col, t.row, t.pixel_x, t.pixel_y),
                ));
            }
            t.excluded = match &rec[9] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(line, format!("excluded: `{other}` is not 0 or 1"))),
            };
            e.grid.labels[filled] = match &rec[10] {
                "" => None,
                name => Some(
                    TissueClass::from_name(name)
                        .ok_or_else(|| parse_err(line, format!("unknown class `{name}`")))?
                        .index(),
                ),
            };
            let probs: Vec<&str> = (11..14).map(|i| &rec[i]).collect();
            e.grid.probs[filled] = if probs.iter().all(|p| p.is_empty()) {
                None
            } else {
                let mut p = [0.0; 3];
                for (k, s) in probs.iter().enumerate() {
                    p[k] = s
                        .parse()
                        .map_err(|_| parse_err(line, format!("{}: `{s}` is not a number", HEADER[11 + k])))?;
                }
                Some(p)
            };
            filled += 1;
        }
        if let Some(e) = entries.last() {
            if filled != e.grid.len() {
                return Err(parse_err(last_line, format!("image {} has {filled} of {} tiles", e.image, e.grid.len())));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let file = File::open(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(file)
    }
}

fn csv_err(e: &csv::Error) -> ManifestError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, e.to_string())
}

/// `image` relative to the directory holding `manifest`, unless absolute.
pub fn resolve(manifest: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut a = TileGrid::new(96, 64, 32).unwrap();
        a.set_labels(&[0, 1, 2, 2, 1, 0]).unwrap();
        a.tiles[4].excluded = true;
        a.probs[1] = Some([0.1, 0.7000000000000001, 0.19999999999999998]);
        let b = TileGrid::new(40, 33, 32).unwrap();
        Manifest {
            entries: vec![
                ManifestEntry { image: "a.png".into(), patient: "P1".into(), grid: a },
                ManifestEntry { image: "b.png".into(), patient: "P2".into(), grid: b },
            ],
        }
    }

    fn round_trip(m: &Manifest) -> Manifest {
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        Manifest::read_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn round_trips_exactly() {
        let m = sample();
        assert_eq!(round_trip(&m), m);
        assert_eq!(round_trip(&m).entries[1].grid.labels, vec![None]);
    }

    #[test]
    fn same_image_twice_stays_two_entries() {
        let g = TileGrid::new(32, 32, 32).unwrap();
        let m = Manifest {
            entries: vec![
                ManifestEntry { image: "x.png".into(), patient: "P".into(), grid: g.clone() },
                ManifestEntry { image: "x.png".into(), patient: "P".into(), grid: g },
            ],
        };
        assert_eq!(round_trip(&m), m);
    }

    fn text(m: &Manifest) -> String {
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn line_of(err: ManifestError) -> u64 {
        match err {
            ManifestError::Parse { line, .. } => line,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn header_row_format() {
        let t = text(&sample());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], HEADER.join(","));
        assert_eq!(lines[1], "a.png,P1,32,96,64,0,0,0,0,0,tumor,,,");
        assert_eq!(lines.len(), 1 + 6 + 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let t = text(&sample());
        let bad = t.replacen("stroma,0.1", "bone,0.1", 1);
        assert_eq!(line_of(Manifest::read_from(bad.as_bytes()).unwrap_err()), 3);
        let bad = t.replacen("a.png,P1,32,96,64,0,1,0,32", "a.png,P1,32,96,64,0,1,0,31", 1);
        assert_eq!(line_of(Manifest::read_from(bad.as_bytes()).unwrap_err()), 5);
        let truncated: String = t.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert_eq!(line_of(Manifest::read_from(truncated.as_bytes()).unwrap_err()), 4);
        let bad = t.replacen(",0.1,", ",0.1x,", 1);
        assert_eq!(line_of(Manifest::read_from(bad.as_bytes()).unwrap_err()), 3);
        assert_eq!(line_of(Manifest::read_from("nope\n".as_bytes()).unwrap_err()), 1);
    }

    #[test]
    fn counts_per_class() {
        let mut m = Manifest::default();
        for (i, c) in TissueClass::ALL.iter().cycle().take(459).enumerate() {
            let mut g = TileGrid::new(32, 32, 32).unwrap();
            g.set_labels(&[c.index()]).unwrap();
            m.entries.push(ManifestEntry { image: format!("roi_{i}.png"), patient: format!("P{i}"), grid: g });
        }
        let back = round_trip(&m);
        assert_eq!(back.class_counts(), [153, 153, 153]);
        assert_eq!(back.tile_count(), 459);
    }

    #[test]
    fn resolves_relative_to_manifest() {
        assert_eq!(resolve(Path::new("/d/m.csv"), "x.png"), PathBuf::from("/d/x.png"));
        assert_eq!(resolve(Path::new("/d/m.csv"), "/e/x.png"), PathBuf::from("/e/x.png"));
    }
}
