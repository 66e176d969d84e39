use uts_core::metrics::{self, tissue_ratios};
use uts_core::refine::{self, Palette, RefineConfig};
use uts_core::synth::{generate_roi, ClassLayout, SynthSpec};
use uts_core::tiling::{self, assemble_mask};

#[test]
fn ground_truth_labels_flow_through_mask_refine_and_metrics() {
    // 4x3 tiles with a fixed label layout
    let labels = vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2];
    let spec = SynthSpec {
        width: 128,
        height: 96,
        layout: ClassLayout::PerTile(labels.clone()),
        seed: 5,
        ..SynthSpec::default()
    };
    let roi = generate_roi(&spec).unwrap();

    let mut grid = tiling::partition(&roi.image, 32, None).unwrap();
    assert_eq!(grid.len(), 12);
    grid.set_labels(&labels).unwrap();
    assert_eq!(grid.labels, roi.grid.labels);

    let palette = Palette::default();
    let raw = assemble_mask(&grid, &palette).unwrap();
    for (i, t) in grid.tiles.iter().enumerate() {
        let want = palette.colors()[labels[i]].map(f64::from);
        assert_eq!(raw.pixels[(t.pixel_y + 7) * raw.width + t.pixel_x + 11], want);
    }

    let cfg = RefineConfig::default();
    let out = refine::refine_pipeline(&raw, &roi.image, &palette, &cfg).unwrap();
    assert!(out.discrete.pixels.iter().all(|p| palette.label_of(p.map(|v| v as u8)).is_some()));
    // tile centers far from any boundary keep their class
    let center = |x: usize, y: usize| out.discrete.pixels[y * 128 + x];
    assert_eq!(center(16, 16), [255.0, 0.0, 0.0]);
    assert_eq!(center(112, 80), [255.0, 255.0, 0.0]);
    assert!(out.ops.max_per_pixel <= 2 * cfg.window as u64);

    let ratios = tissue_ratios(&grid).unwrap();
    assert_eq!(ratios.counts, [4, 4, 4]);
    let truth: Vec<usize> = grid.included_labels().collect();
    let cm = metrics::confusion(&truth, &truth).unwrap();
    let report = metrics::macro_metrics(&cm).unwrap();
    assert_eq!(report.macro_avg, [1.0; 6]);
}
