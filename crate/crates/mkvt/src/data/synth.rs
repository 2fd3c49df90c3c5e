//! Synthetic paired-dataset generator: each class is a (shape, intensity,
//! quadrant) triple, images render the class pattern plus seeded pixel noise,
//! and captions come from the template "a <intensity> <shape> in the
//! <quadrant>".

use std::path::Path;

use crate::data::{
    build_vocab, tokenize_to_ids, write_manifest, write_netpbm, ImageSample, ManifestRow,
    PairDataset, PairRecord, TextSample,
};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor3};

/// The attribute grid is 3 shapes x 3 intensities x 4 quadrants.
pub const MAX_SYNTH_CLASSES: usize = 36;

const SHAPES: [&str; 3] = ["square", "circle", "cross"];
const INTENSITIES: [(&str, f64); 3] = [("dim", 0.25), ("gray", 0.6), ("bright", 0.95)];
const QUADRANTS: [(&str, (usize, usize)); 4] = [
    ("upper left", (0, 0)),
    ("upper right", (0, 1)),
    ("lower left", (1, 0)),
    ("lower right", (1, 1)),
];
const NOISE_SIGMA: f64 = 0.05;

/// Generation settings.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub caption_len: usize,
    pub vocab_cap: usize,
}

#[derive(Clone, Copy)]
struct ClassSpec {
    shape: usize,
    intensity: usize,
    quadrant: usize,
}

/// Classes enumerate the grid with shape varying fastest, then quadrant,
/// then intensity, so small class counts differ in mask geometry (shape and
/// position) before falling back to brightness bands.
fn class_spec(class: usize) -> ClassSpec {
    ClassSpec {
        shape: class % 3,
        quadrant: (class / 3) % 4,
        intensity: (class / 12) % 3,
    }
}

fn caption_for(spec: &ClassSpec) -> String {
    format!(
        "a {} {} in the {}",
        INTENSITIES[spec.intensity].0, SHAPES[spec.shape], QUADRANTS[spec.quadrant].0
    )
}

fn render_class(spec: &ClassSpec, size: usize, rng: &mut Rng) -> Tensor3 {
    let mut img = Tensor3::zeros(size, size, 3);
    let half = size / 2;
    let (qr, qc) = QUADRANTS[spec.quadrant].1;
    // Each quadrant anchors its pattern at a distinct sub-offset, so the same
    // shape sits at a different phase of any fixed block grid depending on
    // where it lives. Patterns use at most half - margin rows, so the shift
    // stays inside the image.
    let unit = (half / 8).max(1);
    let (top, left) = (qr * (half + unit), qc * (half + unit));
    let value = INTENSITIES[spec.intensity].1;
    let margin = (half / 5).max(1);
    let lo = margin;
    let hi = half - margin;

    for r in 0..half {
        for c in 0..half {
            let inside = match SHAPES[spec.shape] {
                "square" => r >= lo && r < hi && c >= lo && c < hi,
                "circle" => {
                    let center = (half as f64 - 1.0) / 2.0;
                    let dr = r as f64 - center;
                    let dc = c as f64 - center;
                    let radius = half as f64 * 0.35;
                    dr * dr + dc * dc <= radius * radius
                }
                "cross" => {
                    let bar = (half / 6).max(1);
                    let mid = half / 2;
                    let in_band = |x: usize| x + bar >= mid && x < mid + bar;
                    (in_band(c) && r >= lo && r < hi) || (in_band(r) && c >= lo && c < hi)
                }
                _ => unreachable!(),
            };
            if inside {
                for ch in 0..3 {
                    img.set(top + r, left + c, ch, value);
                }
            }
        }
    }

    for v in img.data_mut().iter_mut() {
        *v = (*v + NOISE_SIGMA * rng.normal_approx()).clamp(0.0, 1.0);
    }
    img
}

/// Renders `n_pairs` images balanced over the first `n_classes` grid entries,
/// writes them as PPM files plus a `manifest.csv` under `out_dir`, and
/// returns the materialized dataset (without split assignment).
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<PairDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {}",
            cfg.n_classes
        )));
    }
    if cfg.n_classes > MAX_SYNTH_CLASSES {
        return Err(Error::Config(format!(
            "{} classes exceed the {MAX_SYNTH_CLASSES}-entry attribute grid",
            cfg.n_classes
        )));
    }
    if cfg.n_pairs < cfg.n_classes {
        return Err(Error::InvalidInput(format!(
            "{} pairs cannot cover {} classes",
            cfg.n_pairs, cfg.n_classes
        )));
    }
    if cfg.image_size < 8 || cfg.image_size % 2 != 0 {
        return Err(Error::Config(format!(
            "image size must be an even number of at least 8 pixels, got {}",
            cfg.image_size
        )));
    }

    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut rng = Rng::new(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.n_pairs);
    let mut images = Vec::with_capacity(cfg.n_pairs);
    let mut captions = Vec::with_capacity(cfg.n_pairs);

    for i in 0..cfg.n_pairs {
        let class = i % cfg.n_classes;
        let spec = class_spec(class);
        let pair_id = format!("pair_{i:05}");
        let pixels = render_class(&spec, cfg.image_size, &mut rng);
        let rel_path = format!("images/{pair_id}.ppm");
        write_netpbm(&out_dir.join(&rel_path), &pixels)?;
        let caption = caption_for(&spec);
        rows.push(ManifestRow {
            pair_id: pair_id.clone(),
            image_path: rel_path,
            caption: caption.clone(),
            label: 1,
            split: None,
        });
        images.push(ImageSample {
            id: pair_id,
            pixels,
            source: format!("synthetic class {class}"),
        });
        captions.push(caption);
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;

    let vocab = build_vocab(&captions, cfg.vocab_cap)?;
    let texts: Vec<TextSample> = rows
        .iter()
        .map(|r| TextSample {
            id: r.pair_id.clone(),
            raw: r.caption.clone(),
            token_ids: tokenize_to_ids(&r.caption, &vocab, cfg.caption_len),
        })
        .collect();
    let pairs: Vec<PairRecord> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| PairRecord {
            pair_id: r.pair_id.clone(),
            image: i,
            text: i,
            label: 1,
        })
        .collect();

    Ok(PairDataset { images, texts, pairs, splits: Vec::new(), vocab })
}
