//! Image-folder ingestion and the flat binary dataset cache.
//!
//! Folder layouts:
//! * `root/{train,test}[/val]/<class>/<images>`: splits given explicitly.
//! * `root/**/<class>/<images>`: every leaf folder holding images is a
//!   class; classes are taken in sorted path order and the first
//!   `train_classes` form the train split (1200 for Omniglot).
//!
//! Cache file, little-endian: `b"GSDS"`, `u32` version, `u32` class count,
//! `u32` rank, `rank × u32` image extents, then per class `u32` id length,
//! id bytes, `u32` image count and `count × image_len` `f32` pixels.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::dataset::{DatasetSplit, SplitName};
use crate::error::{Error, Result};

pub const OMNIGLOT_TRAIN_CLASSES: usize = 1200;

const MAGIC: &[u8; 4] = b"GSDS";
const VERSION: u32 = 1;
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub side: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Map `v ↦ 1 − v` after scaling to `[0,1]`, making dark strokes bright.
    pub invert: bool,
}

impl IngestOptions {
    pub fn omniglot() -> Self {
        Self { side: 28, channels: 1, invert: true }
    }

    pub fn mini_imagenet() -> Self {
        Self { side: 84, channels: 3, invert: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedSplits {
    pub train: DatasetSplit,
    pub val: Option<DatasetSplit>,
    pub test: DatasetSplit,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Leaf folders containing at least one image, sorted, with their sorted
/// image files.
fn class_folders(root: &Path) -> Result<Vec<(PathBuf, Vec<PathBuf>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut images = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                images.push(path);
            }
        }
        if !images.is_empty() {
            images.sort();
            out.push((dir, images));
        }
    }
    out.sort();
    Ok(out)
}

fn load_image(path: &Path, opts: &IngestOptions) -> std::result::Result<Vec<f32>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let s = opts.side as u32;
    let img = if img.width() != s || img.height() != s {
        img.resize_exact(s, s, FilterType::Triangle)
    } else {
        img
    };
    let plane = opts.side * opts.side;
    let mut out = vec![0.0f32; opts.channels * plane];
    match opts.channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
        }
        n => return Err(format!("unsupported channel count {n}")),
    }
    if opts.invert {
        out.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    Ok(out)
}

fn read_classes(
    root: &Path,
    folders: &[(PathBuf, Vec<PathBuf>)],
    name: SplitName,
    opts: &IngestOptions,
    failures: &mut Vec<(PathBuf, String)>,
) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::new(name, [opts.channels, opts.side, opts.side]);
    for (dir, files) in folders {
        let mut pixels = Vec::with_capacity(files.len() * split.image_len());
        for f in files {
            match load_image(f, opts) {
                Ok(px) => pixels.extend(px),
                Err(why) => failures.push((f.clone(), why)),
            }
        }
        if !pixels.is_empty() {
            let id = dir.strip_prefix(root).unwrap_or(dir).to_string_lossy().replace('\\', "/");
            split.push_class(id, pixels)?;
        }
    }
    Ok(split)
}

fn no_classes(dir: &Path) -> Error {
    Error::Ingest(vec![(dir.to_path_buf(), "no class folders with images".into())])
}

/// Reads `root` under either layout described in the module docs.
pub fn ingest_image_folders(root: &Path, opts: &IngestOptions, train_classes: usize) -> Result<IngestedSplits> {
    if !root.is_dir() {
        return Err(Error::Ingest(vec![(root.to_path_buf(), "not a directory".into())]));
    }
    let mut failures = Vec::new();
    let explicit = root.join("train").is_dir() && root.join("test").is_dir();
    let out = if explicit {
        let mut load = |name: SplitName| -> Result<Option<DatasetSplit>> {
            let dir = root.join(name.to_string());
            if !dir.is_dir() {
                return Ok(None);
            }
            let folders = class_folders(&dir)?;
            if folders.is_empty() {
                return Err(no_classes(&dir));
            }
            read_classes(&dir, &folders, name, opts, &mut failures).map(Some)
        };
        let train = load(SplitName::Train)?.expect("checked above");
        let val = load(SplitName::Val)?;
        let test = load(SplitName::Test)?.expect("checked above");
        IngestedSplits { train, val, test }
    } else {
        let folders = class_folders(root)?;
        if folders.is_empty() {
            return Err(no_classes(root));
        }
        if folders.len() <= train_classes {
            return Err(Error::Ingest(vec![(
                root.to_path_buf(),
                format!("{} classes found, need more than {train_classes} to form a test split", folders.len()),
            )]));
        }
        let (tr, te) = folders.split_at(train_classes);
        let train = read_classes(root, tr, SplitName::Train, opts, &mut failures)?;
        let test = read_classes(root, te, SplitName::Test, opts, &mut failures)?;
        IngestedSplits { train, val: None, test }
    };
    if !failures.is_empty() {
        return Err(Error::Ingest(failures));
    }
    Ok(out)
}

/// Omniglot: 28×28 inverted grayscale, first 1200 classes for training.
pub fn ingest_omniglot(root: &Path) -> Result<IngestedSplits> {
    ingest_image_folders(root, &IngestOptions::omniglot(), OMNIGLOT_TRAIN_CLASSES)
}

pub fn write_cache(split: &DatasetSplit, w: &mut impl Write) -> Result<()> {
    let u32le = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Cache(format!("{v} does not fit the u32 cache field")))
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32le(split.class_count())?)?;
    let shape = split.image_shape();
    w.write_all(&u32le(shape.len())?)?;
    for d in shape {
        w.write_all(&u32le(d)?)?;
    }
    for class in split.classes() {
        w.write_all(&u32le(class.id.len())?)?;
        w.write_all(class.id.as_bytes())?;
        w.write_all(&u32le(class.count())?)?;
        for v in class.pixels() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Cache(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_cache(r: &mut impl Read, name: SplitName) -> Result<DatasetSplit> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Cache(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Cache(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let classes = read_u32(r)? as usize;
    let rank = read_u32(r)? as usize;
    if rank != 3 {
        return Err(Error::Cache(format!("image rank {rank}, expected 3")));
    }
    let shape = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
    let mut split = DatasetSplit::new(name, shape);
    for _ in 0..classes {
        let len = read_u32(r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|e| Error::Cache(format!("truncated class id: {e}")))?;
        let id = String::from_utf8(id).map_err(|e| Error::Cache(format!("class id: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut raw = vec![0u8; count * split.image_len() * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Cache(format!("truncated pixels of {id}: {e}")))?;
        let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        split.push_class(id, pixels)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Cache("trailing bytes after last class".into()));
    }
    Ok(split)
}

pub fn cache_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = cache_path(dir, split.name);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    write_cache(split, &mut w)?;
    w.flush()?;
    Ok(path)
}

pub fn load_split(dir: &Path, name: SplitName) -> Result<DatasetSplit> {
    let path = cache_path(dir, name);
    let f = fs::File::open(&path).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
    read_cache(&mut BufReader::new(f), name)
}
