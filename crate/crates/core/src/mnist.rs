//! MNIST ingestion: big-endian IDX files, parsed bit-exact.
//!
//! Pixels stay as raw bytes here; scaling to [0,1] happens where views are
//! cut. The writer exists so the bundled mini fixture and ingestion
//! round-trip tests use the same code path as the loader.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;

/// Environment variable that overrides where the dataset is looked up.
pub const DATA_DIR_ENV: &str = "ADCOMM_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// sha256 of the four official files, for the fetch helper.
pub const OFFICIAL_SHA256: [(&str, &str); 4] = [
    (TRAIN_IMAGES, "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    (TRAIN_LABELS, "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    (TEST_IMAGES, "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    (TEST_LABELS, "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

/// One partition: `count` images of SIDE x SIDE bytes plus one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub count: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Partition {
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Partition,
    pub test: Partition,
}

fn ingest(path: &Path, offset: usize, message: String) -> Error {
    Error::Ingestion { path: path.to_path_buf(), offset: offset as u64, message }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(ingest(path, at, format!("truncated: wanted 4 header bytes, file ends at {}", bytes.len())));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().unwrap()))
}

fn parse_images(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(ingest(path, 0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(ingest(path, 8, format!("{rows}x{cols} images, expected {SIDE}x{SIDE}")));
    }
    let want = 16 + count * SIDE * SIDE;
    if bytes.len() != want {
        return Err(ingest(
            path,
            bytes.len().min(want),
            format!("{count} images need {want} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((count, bytes[16..].to_vec()))
}

fn parse_labels(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(ingest(path, 0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let want = 8 + count;
    if bytes.len() != want {
        return Err(ingest(
            path,
            bytes.len().min(want),
            format!("{count} labels need {want} bytes, file has {}", bytes.len()),
        ));
    }
    if let Some(bad) = bytes[8..].iter().position(|&l| l > 9) {
        return Err(ingest(path, 8 + bad, format!("label {} out of range 0..=9", bytes[8 + bad])));
    }
    Ok((count, bytes[8..].to_vec()))
}

/// Load one images+labels pair; counts must agree.
pub fn load_partition(images_path: &Path, labels_path: &Path) -> Result<Partition> {
    let (ni, images) = parse_images(images_path)?;
    let (nl, labels) = parse_labels(labels_path)?;
    if ni != nl {
        return Err(ingest(labels_path, 4, format!("{nl} labels for {ni} images")));
    }
    Ok(Partition { count: ni, images, labels })
}

/// Write a partition back out in IDX format.
pub fn save_partition(part: &Partition, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + part.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(part.count as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend_from_slice(&part.images);
    fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + part.labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(part.count as u32).to_be_bytes());
    lab.extend_from_slice(&part.labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

impl Dataset {
    /// Load train and test partitions from one directory of IDX files.
    pub fn load(dir: &Path) -> Result<Dataset> {
        Ok(Dataset {
            train: load_partition(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
            test: load_partition(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
        })
    }
}

/// Resolve the dataset directory: explicit flag, then the environment
/// override, then `data/mnist` under the current directory.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(p) = std::env::var(DATA_DIR_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("data/mnist")
}

/// Copy the four official files from `source` into `dest`, refusing any file
/// whose sha256 does not match the published value.
pub fn fetch_verified(source: &Path, dest: &Path) -> Result<()> {
    use sha2::{Digest, Sha256};
    fs::create_dir_all(dest)?;
    for (name, want) in OFFICIAL_SHA256 {
        let from = source.join(name);
        let bytes = fs::read(&from)
            .map_err(|e| ingest(&from, 0, format!("cannot read source file: {e}")))?;
        let got = format!("{:x}", Sha256::digest(&bytes));
        if got != want {
            return Err(ingest(&from, 0, format!("sha256 {got} != expected {want}")));
        }
        fs::write(dest.join(name), bytes)?;
    }
    Ok(())
}
