//! MNIST-shaped image sets: IDX ingest, pixel scaling, class histograms,
//! contiguous k-fold planning and id-based removal.
//!
//! Every image carries the index it had in its source file. That index is the
//! image's identity for the rest of the pipeline: fold predictions, flag sets,
//! review decisions and removal lists all refer to it.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_ROWS: usize = 28;
pub const IMAGE_COLS: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_ROWS * IMAGE_COLS;
pub const NUM_CLASSES: usize = 10;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// One raw 28×28 grayscale image, row-major.
pub type Image = [u8; IMAGE_PIXELS];

/// Stable identity of an image: its 0-based index in the source IDX file.
pub type ImageId = u32;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported image shape {rows}x{cols}, expected 28x28")]
    BadShape { rows: usize, cols: usize },
    #[error("label byte {value} at position {position} is not a digit class")]
    BadLabel { position: usize, value: u8 },
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("{images} images but {ids} ids")]
    IdCountMismatch { images: usize, ids: usize },
    #[error("duplicate image id {0}")]
    DuplicateId(ImageId),
    #[error("invalid fold count k={k} for {n} items")]
    InvalidK { n: usize, k: usize },
    #[error("id {0} is not in the image set")]
    UnknownId(ImageId),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let word = bytes
        .get(offset..offset + 4)
        .ok_or(DatasetError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })?;
    Ok(u32::from_be_bytes(word.try_into().unwrap()))
}

/// Parses an IDX3 image payload.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != IMAGE_ROWS || cols != IMAGE_COLS {
        return Err(DatasetError::BadShape { rows, cols });
    }
    let expected = 16 + count * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[16..expected]
        .chunks_exact(IMAGE_PIXELS)
        .map(|chunk| chunk.try_into().unwrap())
        .collect())
}

/// Parses an IDX1 label payload.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some((position, &value)) = labels
        .iter()
        .enumerate()
        .find(|(_, &v)| v as usize >= NUM_CLASSES)
    {
        return Err(DatasetError::BadLabel { position, value });
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

pub fn encode_idx_images(images: &[Image]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_ROWS as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_COLS as u32).to_be_bytes());
    for image in images {
        out.extend_from_slice(image);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(bytes).map_err(io)?;
    file.sync_all().map_err(io)
}

/// Scales 8-bit intensities to `[0, 1]` by dividing by 255.
pub fn normalize(image: &Image) -> Vec<f32> {
    let mut out = vec![0.0; IMAGE_PIXELS];
    normalize_into(image, &mut out);
    out
}

pub fn normalize_into<T: num_traits::Float>(image: &Image, out: &mut [T]) {
    let scale = T::from(255.0).unwrap();
    for (dst, &px) in out.iter_mut().zip(image.iter()) {
        *dst = T::from(px).unwrap() / scale;
    }
}

/// Lossless 8-bit grayscale PNG of one image.
pub fn encode_png(image: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, IMAGE_COLS as u32, IMAGE_ROWS as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().expect("in-memory PNG header");
    writer.write_image_data(image).expect("in-memory PNG data");
    writer.finish().expect("in-memory PNG finish");
    out
}

/// Inverse of [`encode_png`]; `None` unless the PNG is 28×28 8-bit grayscale.
pub fn decode_png(bytes: &[u8]) -> Option<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().ok()?;
    let mut buf = vec![0; reader.output_buffer_size()?];
    let info = reader.next_frame(&mut buf).ok()?;
    if info.width as usize != IMAGE_COLS
        || info.height as usize != IMAGE_ROWS
        || info.color_type != png::ColorType::Grayscale
        || info.bit_depth != png::BitDepth::Eight
    {
        return None;
    }
    buf.truncate(info.buffer_size());
    buf.try_into().ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRole {
    TrainPool,
    Test,
}

/// Labeled images with stable original-file ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    images: Vec<Image>,
    labels: Vec<u8>,
    ids: Vec<ImageId>,
    role: SetRole,
}

impl ImageSet {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<u8>,
        ids: Vec<ImageId>,
        role: SetRole,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DatasetError::LengthMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if images.len() != ids.len() {
            return Err(DatasetError::IdCountMismatch {
                images: images.len(),
                ids: ids.len(),
            });
        }
        if let Some((position, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(DatasetError::BadLabel { position, value });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(DatasetError::DuplicateId(id));
            }
        }
        Ok(Self {
            images,
            labels,
            ids,
            role,
        })
    }

    /// Pairs parsed images and labels, assigning ids `0..count` in file order.
    pub fn from_parts(images: Vec<Image>, labels: Vec<u8>, role: SetRole) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DatasetError::LengthMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        let ids = (0..images.len() as ImageId).collect();
        Self::new(images, labels, ids, role)
    }

    pub fn load(
        images_path: impl AsRef<Path>,
        labels_path: impl AsRef<Path>,
        role: SetRole,
    ) -> Result<Self> {
        Self::from_parts(
            load_idx_images(images_path)?,
            load_idx_labels(labels_path)?,
            role,
        )
    }

    /// Writes the images and labels as an IDX pair. Ids are not part of the
    /// IDX format and must be stored separately by the caller.
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        write_file(images_path, &encode_idx_images(&self.images))?;
        write_file(labels_path, &encode_idx_labels(&self.labels))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn role(&self) -> SetRole {
        self.role
    }

    pub fn image(&self, position: usize) -> &Image {
        &self.images[position]
    }

    pub fn label(&self, position: usize) -> u8 {
        self.labels[position]
    }

    /// Map from id to position within this set.
    pub fn id_index(&self) -> HashMap<ImageId, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Subset at the given positions, in the order given.
    pub fn select(&self, positions: &[usize]) -> ImageSet {
        ImageSet {
            images: positions.iter().map(|&p| self.images[p]).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            role: self.role,
        }
    }

    /// First `n` images (or all of them if the set is smaller).
    pub fn head(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn histogram(&self) -> ClassHistogram {
        class_histogram(&self.labels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: [usize; NUM_CLASSES],
    pub total: usize,
}

pub fn class_histogram(labels: &[u8]) -> ClassHistogram {
    let mut counts = [0usize; NUM_CLASSES];
    for &label in labels {
        counts[label as usize] += 1;
    }
    ClassHistogram {
        counts,
        total: labels.len(),
    }
}

/// Contiguous, unshuffled k-fold partition of positions `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    pub validation: Vec<Range<usize>>,
}

impl FoldPlan {
    pub fn validation_range(&self, fold: usize) -> Range<usize> {
        self.validation[fold].clone()
    }

    /// Positions outside fold `fold`'s validation block, in original order.
    pub fn training_positions(&self, fold: usize) -> Vec<usize> {
        let val = &self.validation[fold];
        (0..val.start).chain(val.end..self.n).collect()
    }

    pub fn validation_positions(&self, fold: usize) -> Vec<usize> {
        self.validation[fold].clone().collect()
    }
}

/// Fold `i` validates on `[i*(n/k), (i+1)*(n/k))`; the last fold also takes
/// the `n % k` leftover items.
pub fn kfold_split(n: usize, k: usize) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(DatasetError::InvalidK { n, k });
    }
    let block = n / k;
    let validation = (0..k)
        .map(|i| {
            let start = i * block;
            let end = if i + 1 == k { n } else { start + block };
            start..end
        })
        .collect();
    Ok(FoldPlan { n, k, validation })
}

/// Drops every image whose id is in `removal`, keeping relative order.
pub fn remove_indices(set: &ImageSet, removal: &BTreeSet<ImageId>) -> Result<ImageSet> {
    let present: HashSet<ImageId> = set.ids.iter().copied().collect();
    if let Some(&missing) = removal.iter().find(|id| !present.contains(id)) {
        return Err(DatasetError::UnknownId(missing));
    }
    let keep: Vec<usize> = set
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| !removal.contains(id))
        .map(|(i, _)| i)
        .collect();
    Ok(set.select(&keep))
}

/// Seeded class-proportional sample of `n` images, returned in original order.
/// Per-class quotas use largest-remainder rounding so they sum to `n`.
pub fn stratified_subset(set: &ImageSet, n: usize, seed: u64) -> ImageSet {
    stratified_split(set, n, seed).0
}

/// Like [`stratified_subset`], also returning the complement (original order).
pub fn stratified_split(set: &ImageSet, n: usize, seed: u64) -> (ImageSet, ImageSet) {
    let n = n.min(set.len());
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (pos, &label) in set.labels.iter().enumerate() {
        by_class[label as usize].push(pos);
    }
    let total = set.len().max(1);
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * n as f64 / total as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut short = n - quota.iter().sum::<usize>();
    for &class in order.iter().cycle() {
        if short == 0 {
            break;
        }
        if quota[class] < by_class[class].len() {
            quota[class] += 1;
            short -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; set.len()];
    for (class, positions) in by_class.iter_mut().enumerate() {
        positions.shuffle(&mut rng);
        for &p in positions.iter().take(quota[class]) {
            chosen[p] = true;
        }
    }
    let (picked, rest): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&p| chosen[p]);
    (set.select(&picked), set.select(&rest))
}
