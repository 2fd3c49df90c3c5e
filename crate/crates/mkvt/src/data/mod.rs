//! Dataset ingestion, preprocessing, seeded splitting, and the synthetic
//! paired-dataset generator.

mod ppm;
mod synth;
mod text;

pub use ppm::{decode_netpbm, encode_netpbm, read_netpbm, write_netpbm};
pub use synth::{generate_synthetic, SynthConfig, MAX_SYNTH_CLASSES};
pub use text::{build_vocab, split_words, tokenize_to_ids, Vocab, PAD_ID, UNK_ID};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor3};

/// One image with pixels normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Tensor3,
    /// Source path, or a descriptor for generated images.
    pub source: String,
}

/// One caption with its fixed-length token ids.
#[derive(Clone, Debug)]
pub struct TextSample {
    pub id: String,
    pub raw: String,
    pub token_ids: Vec<u32>,
}

/// Split assignment of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split value {other:?}"))),
        }
    }
}

/// An (image, caption, label) record referencing the sample stores by index.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub pair_id: String,
    pub image: usize,
    pub text: usize,
    pub label: u8,
}

/// Aligned image-caption pairs with their split assignment and vocabulary.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub images: Vec<ImageSample>,
    pub texts: Vec<TextSample>,
    pub pairs: Vec<PairRecord>,
    /// Parallel to `pairs`; empty until a split is assigned or loaded.
    pub splits: Vec<Split>,
    pub vocab: Vocab,
}

impl PairDataset {
    pub fn has_split_assignment(&self) -> bool {
        self.splits.len() == self.pairs.len()
    }

    /// Pair indices belonging to one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    /// Seeded shuffle followed by contiguous train/val/test assignment. The
    /// val and test counts are `round(n * fraction)`; the remainder lands in
    /// train.
    pub fn assign_splits(&mut self, seed: u64, fractions: (f64, f64, f64)) -> Result<()> {
        self.splits = assign_splits(self.pairs.len(), seed, fractions)?;
        Ok(())
    }
}

/// Split assignment for `n` records; see `PairDataset::assign_splits`.
pub fn assign_splits(n: usize, seed: u64, fractions: (f64, f64, f64)) -> Result<Vec<Split>> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split fractions sum to {sum}, expected 1")));
    }
    if f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(Error::InvalidInput("split fractions must be nonnegative".into()));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 pairs to split, got {n}")));
    }
    let n_val = (n as f64 * f_val).round() as usize;
    let n_test = (n as f64 * f_test).round() as usize;
    if n_val + n_test > n {
        return Err(Error::InvalidInput("val and test fractions leave no training data".into()));
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Reads a PPM/PGM file, normalizes to [0, 1], and resizes to a square of
/// `target_size` pixels by nearest neighbor.
pub fn read_image(path: &Path, target_size: usize) -> Result<ImageSample> {
    let pixels = read_netpbm(path)?.resize_nearest(target_size, target_size);
    Ok(ImageSample {
        id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        pixels,
        source: path.display().to_string(),
    })
}

/// Random horizontal flip plus a seeded random crop of `crop_frac` of the
/// area, resized back to the original shape. Pixels stay in [0, 1].
pub fn augment(img: &ImageSample, rng: &mut Rng, flip_prob: f64, crop_frac: f64) -> ImageSample {
    assert!((0.0..=1.0).contains(&flip_prob), "flip_prob out of range");
    assert!(crop_frac > 0.0 && crop_frac <= 1.0, "crop_frac out of range");
    let (h, w, _) = img.pixels.shape();

    let mut pixels = if rng.next_f64() < flip_prob {
        img.pixels.flip_horizontal()
    } else {
        img.pixels.clone()
    };

    if crop_frac < 1.0 {
        let side = crop_frac.sqrt();
        let crop_h = ((h as f64 * side).round() as usize).clamp(1, h);
        let crop_w = ((w as f64 * side).round() as usize).clamp(1, w);
        let top = rng.below(h - crop_h + 1);
        let left = rng.below(w - crop_w + 1);
        pixels = pixels.crop(top, left, crop_h, crop_w).resize_nearest(h, w);
    }

    ImageSample {
        id: img.id.clone(),
        pixels,
        source: img.source.clone(),
    }
}

/// One manifest row before sample resolution.
#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub pair_id: String,
    pub image_path: String,
    pub caption: String,
    pub label: u8,
    pub split: Option<Split>,
}

/// Reads a manifest CSV with header `pair_id,image_path,caption,label[,split]`.
/// Rows come back sorted by pair id so downstream construction is canonical.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("cannot open manifest {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?
        .clone();
    check_header(&headers, &["pair_id", "image_path", "caption", "label"])?;
    let has_split = headers.iter().any(|h| h == "split");

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2; // header is row 1
        let record = record.map_err(|e| Error::Format(format!("manifest row {row_no}: {e}")))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Format(format!("manifest row {row_no}: missing column {i}")))
        };
        let label_text = field(3)?;
        let label: u8 = label_text
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("manifest row {row_no}: bad label {label_text:?}")))?;
        if label > 1 {
            return Err(Error::Format(format!(
                "manifest row {row_no}: label must be 0 or 1, got {label}"
            )));
        }
        let split = if has_split {
            match record.get(4).map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(
                    Split::parse(s)
                        .map_err(|e| Error::Format(format!("manifest row {row_no}: {e}")))?,
                ),
            }
        } else {
            None
        };
        rows.push(ManifestRow {
            pair_id: field(0)?.to_string(),
            image_path: field(1)?.to_string(),
            caption: field(2)?.to_string(),
            label,
            split,
        });
    }
    rows.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(rows)
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, want) in expected.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *want => {}
            other => {
                return Err(Error::Format(format!(
                    "manifest column {i} must be {want:?}, found {other:?}"
                )))
            }
        }
    }
    Ok(())
}

/// Writes a manifest CSV. The split column is included only when every row
/// carries one.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let with_split = !rows.is_empty() && rows.iter().all(|r| r.split.is_some());
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("cannot write manifest {}: {e}", path.display())))?;
    let mut header = vec!["pair_id", "image_path", "caption", "label"];
    if with_split {
        header.push("split");
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Format(format!("manifest write: {e}")))?;
    for r in rows {
        let label = r.label.to_string();
        let mut record = vec![r.pair_id.as_str(), r.image_path.as_str(), r.caption.as_str(), &label];
        let split_text;
        if with_split {
            split_text = r.split.expect("checked above").as_str();
            record.push(split_text);
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Format(format!("manifest write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Format(format!("manifest write: {e}")))?;
    Ok(())
}

/// Preprocessing knobs used while materializing a dataset from a manifest.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub image_size: usize,
    pub caption_len: usize,
    pub vocab_cap: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { image_size: 32, caption_len: 16, vocab_cap: 1024 }
    }
}

/// Loads a manifest and its images into a `PairDataset`: images are deduped
/// by path and normalized, the vocabulary is built over all captions, and
/// captions are tokenized to fixed length. Split assignments present in the
/// manifest are honored; otherwise `splits` is left empty for the caller.
pub fn load_dataset(manifest_path: &Path, opts: &LoadOptions) -> Result<PairDataset> {
    let rows = read_manifest(manifest_path)?;
    let captions: Vec<&str> = rows.iter().map(|r| r.caption.as_str()).collect();
    let vocab = build_vocab(&captions, opts.vocab_cap)?;
    build_dataset(manifest_path, rows, opts.image_size, opts.caption_len, vocab)
}

/// Like `load_dataset`, but tokenizes with an existing vocabulary (the one a
/// checkpoint was trained with) instead of building a fresh one.
pub fn load_dataset_with_vocab(
    manifest_path: &Path,
    image_size: usize,
    caption_len: usize,
    vocab: Vocab,
) -> Result<PairDataset> {
    let rows = read_manifest(manifest_path)?;
    build_dataset(manifest_path, rows, image_size, caption_len, vocab)
}

fn build_dataset(
    manifest_path: &Path,
    rows: Vec<ManifestRow>,
    image_size: usize,
    caption_len: usize,
    vocab: Vocab,
) -> Result<PairDataset> {
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "manifest {} has no data rows",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut images: Vec<ImageSample> = Vec::new();
    let mut image_index: HashMap<String, usize> = HashMap::new();
    let mut texts: Vec<TextSample> = Vec::new();
    let mut pairs: Vec<PairRecord> = Vec::new();

    for row in &rows {
        let image = match image_index.get(&row.image_path) {
            Some(&i) => i,
            None => {
                let full: PathBuf = if Path::new(&row.image_path).is_absolute() {
                    PathBuf::from(&row.image_path)
                } else {
                    base.join(&row.image_path)
                };
                let mut sample = read_image(&full, image_size)?;
                sample.id = row.pair_id.clone();
                let i = images.len();
                images.push(sample);
                image_index.insert(row.image_path.clone(), i);
                i
            }
        };
        let text = texts.len();
        texts.push(TextSample {
            id: row.pair_id.clone(),
            raw: row.caption.clone(),
            token_ids: tokenize_to_ids(&row.caption, &vocab, caption_len),
        });
        pairs.push(PairRecord {
            pair_id: row.pair_id.clone(),
            image,
            text,
            label: row.label,
        });
    }

    let splits = if rows.iter().all(|r| r.split.is_some()) {
        rows.iter().map(|r| r.split.expect("checked")).collect()
    } else {
        Vec::new()
    };

    Ok(PairDataset { images, texts, pairs, splits, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_for_one_hundred_pairs() {
        let splits = assign_splits(100, 42, (0.70, 0.15, 0.15)).unwrap();
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 70);
        assert_eq!(count(Split::Val), 15);
        assert_eq!(count(Split::Test), 15);
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        for seed in 0..100u64 {
            let n = 3 + (seed as usize * 7) % 120;
            let a = assign_splits(n, seed, (0.70, 0.15, 0.15)).unwrap();
            let b = assign_splits(n, seed, (0.70, 0.15, 0.15)).unwrap();
            assert_eq!(a, b);
            // Every index gets exactly one split by construction; the three
            // counts must cover n.
            assert_eq!(a.len(), n);
        }
    }

    #[test]
    fn split_rejects_tiny_and_inconsistent_inputs() {
        assert!(assign_splits(2, 1, (0.70, 0.15, 0.15)).is_err());
        assert!(assign_splits(10, 1, (0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn rounding_remainder_goes_to_train() {
        let splits = assign_splits(10, 3, (0.70, 0.15, 0.15)).unwrap();
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        // round(1.5) = 2 for both val and test, remainder 6 to train.
        assert_eq!(count(Split::Val), 2);
        assert_eq!(count(Split::Test), 2);
        assert_eq!(count(Split::Train), 6);
    }

    fn gray_image(values: &[f64], h: usize, w: usize) -> ImageSample {
        ImageSample {
            id: "test".into(),
            pixels: Tensor3::from_vec(h, w, 1, values.to_vec()).unwrap(),
            source: "memory".into(),
        }
    }

    #[test]
    fn augment_identity_configuration_changes_nothing() {
        let img = gray_image(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        let mut rng = Rng::new(5);
        let out = augment(&img, &mut rng, 0.0, 1.0);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn forced_flip_twice_restores_the_image() {
        let img = gray_image(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        let mut rng = Rng::new(5);
        let once = augment(&img, &mut rng, 1.0, 1.0);
        let twice = augment(&once, &mut rng, 1.0, 1.0);
        assert_eq!(twice.pixels, img.pixels);
        assert_ne!(once.pixels, img.pixels);
    }

    #[test]
    fn augment_is_seed_deterministic_and_stays_in_range() {
        let img = gray_image(&(0..64).map(|i| i as f64 / 63.0).collect::<Vec<_>>(), 8, 8);
        let a = augment(&img, &mut Rng::new(9), 0.5, 0.6);
        let b = augment(&img, &mut Rng::new(9), 0.5, 0.6);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.pixels.shape(), img.pixels.shape());
        assert!(a.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn manifest_round_trip_preserves_rows() {
        let dir = std::env::temp_dir().join(format!("mkvt-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        let rows = vec![
            ManifestRow {
                pair_id: "pair_00000".into(),
                image_path: "images/a.ppm".into(),
                caption: "a bright square, kind of".into(),
                label: 1,
                split: None,
            },
            ManifestRow {
                pair_id: "pair_00001".into(),
                image_path: "images/b.ppm".into(),
                caption: "something else".into(),
                label: 0,
                split: None,
            },
        ];
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].caption, rows[0].caption);
        assert_eq!(back[1].label, 0);
        std::fs::remove_dir_all(&dir).ok();
    }
}
