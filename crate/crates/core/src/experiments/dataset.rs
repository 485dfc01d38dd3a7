//! Synthetic dataset generation, serialisation and splitting.
//!
//! A dataset directory holds `manifest.txt` (one header block plus one line
//! per sample with its layout and seeds) and `images.bin` (row-major
//! `H×W×3` little-endian `f32` blocks, one per sample, in id order).
//! Targets are always recomputed from the layouts.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{generate_room, render_panorama, LayoutTarget, Panorama, RoomLayout, SceneStyle};
use crate::par;
use crate::rng::{derive_seed, stream, Stream};
use crate::trainer::Sample;

use super::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.txt";
pub const IMAGES: &str = "images.bin";
const FORMAT: u32 = 1;

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub offset: u64,
    pub style_seed: u64,
    pub render_seed: u64,
    pub layout: RoomLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,
    pub generator_hash: String,
    /// SHA-256 over the sample lines and the image bytes.
    pub content_hash: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn block_bytes(h: usize, w: usize) -> u64 {
    (h * w * 3 * 4) as u64
}

/// Renders sample `i`. Seeds are derived per index, so sample `i` does not
/// depend on the dataset size.
pub fn generate_sample(cfg: &ExperimentConfig, i: usize) -> Result<(ManifestEntry, Sample)> {
    let idx = i as u64;
    let layout = generate_room(derive_seed(cfg.data_seed, Stream::Room, idx), &cfg.gen)?;
    let style_seed = derive_seed(cfg.data_seed, Stream::Style, idx);
    let render_seed = derive_seed(cfg.data_seed, Stream::Render, idx);
    let style = SceneStyle::sample(style_seed, layout.corners().len(), cfg.noise_sigma);
    // Stored as f32, so keep the in-memory copy identical to a reload.
    let image = render_panorama(&layout, &style, cfg.height, cfg.width, render_seed)?.quantize_f32();
    let target = LayoutTarget::from_layout(&layout, cfg.width);
    let entry = ManifestEntry {
        id: i,
        offset: idx * block_bytes(cfg.height, cfg.width),
        style_seed,
        render_seed,
        layout: layout.clone(),
    };
    Ok((
        entry,
        Sample {
            id: i,
            image,
            layout,
            target,
        },
    ))
}

fn entry_line(e: &ManifestEntry) -> String {
    let corners: Vec<String> = e.layout.corners().iter().map(|c| format!("{},{}", c[0], c[1])).collect();
    format!(
        "sample id={} offset={} style_seed={} render_seed={} camera_height={} room_height={} corners={}",
        e.id,
        e.offset,
        e.style_seed,
        e.render_seed,
        e.layout.camera_height(),
        e.layout.room_height(),
        corners.join(";")
    )
}

fn image_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn content_hash(entries: &[ManifestEntry], images: &[u8]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(entry_line(e));
        h.update(b"\n");
    }
    h.update(images);
    hex::encode(h.finalize())
}

/// Generates every sample of the configured dataset in memory.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let pairs: Vec<(ManifestEntry, Sample)> = par::map_range(cfg.n_samples, |i| generate_sample(cfg, i))
        .into_iter()
        .collect::<Result<_>>()?;
    let (entries, samples): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let manifest = DatasetManifest {
        height: cfg.height,
        width: cfg.width,
        noise_sigma: cfg.noise_sigma,
        data_seed: cfg.data_seed,
        generator_hash: cfg.generator_hash(),
        content_hash: content_hash(&entries, &image_bytes(&samples)),
        entries,
    };
    Ok(Dataset { manifest, samples })
}

pub(crate) fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Writes `ds` to `dir`. A non-empty directory is refused unless `force`.
pub fn write_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir_is_nonempty(dir)? && !force {
        return Err(Error::invalid(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &ds.manifest;
    let mut text = String::new();
    let _ = writeln!(text, "# panolayout dataset");
    let _ = writeln!(text, "format = {FORMAT}");
    let _ = writeln!(text, "samples = {}", m.entries.len());
    let _ = writeln!(text, "height = {}", m.height);
    let _ = writeln!(text, "width = {}", m.width);
    let _ = writeln!(text, "noise_sigma = {}", m.noise_sigma);
    let _ = writeln!(text, "data_seed = {}", m.data_seed);
    let _ = writeln!(text, "generator_hash = {}", m.generator_hash);
    let _ = writeln!(text, "content_hash = {}", m.content_hash);
    for e in &m.entries {
        let _ = writeln!(text, "{}", entry_line(e));
    }
    let images = dir.join(IMAGES);
    std::fs::write(&images, image_bytes(&ds.samples)).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST);
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|tok| tok.strip_prefix(key)?.strip_prefix('='))
}

fn parse_entry(line: &str, n: usize) -> Result<ManifestEntry> {
    let bad = |what: &str| Error::Dataset(format!("manifest line {n}: {what}"));
    let num = |key: &str| -> Result<&str> { field(line, key).ok_or_else(|| bad(&format!("missing {key}"))) };
    let id: usize = num("id")?.parse().map_err(|_| bad("bad id"))?;
    let sample_err = |reason: String| Error::Sample { sample: id, reason };
    let f = |key: &str| -> Result<f64> {
        num(key)?
            .parse()
            .map_err(|_| sample_err(format!("bad {key}")))
    };
    let u = |key: &str| -> Result<u64> {
        num(key)?
            .parse()
            .map_err(|_| sample_err(format!("bad {key}")))
    };
    let corners = num("corners")?
        .split(';')
        .map(|pair| {
            let (x, z) = pair.split_once(',')?;
            Some([x.parse().ok()?, z.parse().ok()?])
        })
        .collect::<Option<Vec<[f64; 2]>>>()
        .ok_or_else(|| sample_err("bad corner list".into()))?;
    let layout = RoomLayout::new(corners, f("camera_height")?, f("room_height")?)
        .map_err(|e| sample_err(e.to_string()))?;
    Ok(ManifestEntry {
        id,
        offset: u("offset")?,
        style_seed: u("style_seed")?,
        render_seed: u("render_seed")?,
        layout,
    })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut header = std::collections::BTreeMap::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("sample ") {
            entries.push(parse_entry(line, n + 1)?);
        } else if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(Error::Dataset(format!("manifest line {}: unrecognised", n + 1)));
        }
    }
    let get = |k: &str| header.get(k).ok_or_else(|| Error::Dataset(format!("manifest missing {k}")));
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Dataset(format!("manifest: bad {k}")))
    };
    if num("format")? != FORMAT as u64 {
        return Err(Error::Dataset(format!("unsupported dataset format {}", get("format")?)));
    }
    let count = num("samples")? as usize;
    if count != entries.len() {
        return Err(Error::Dataset(format!(
            "manifest declares {count} samples but lists {}",
            entries.len()
        )));
    }
    for (i, e) in entries.iter().enumerate() {
        if e.id != i {
            return Err(Error::Dataset(format!("manifest entry {i} has id {}", e.id)));
        }
    }
    Ok(DatasetManifest {
        height: num("height")? as usize,
        width: num("width")? as usize,
        noise_sigma: get("noise_sigma")?
            .parse()
            .map_err(|_| Error::Dataset("manifest: bad noise_sigma".into()))?,
        data_seed: num("data_seed")?,
        generator_hash: get("generator_hash")?.clone(),
        content_hash: get("content_hash")?.clone(),
        entries,
    })
}

/// Loads a dataset directory, checking every image block and the content
/// hash. A short image file is reported against the first incomplete sample.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(IMAGES);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (h, w) = (manifest.height, manifest.width);
    let block = block_bytes(h, w);
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let end = e.offset + block;
        if end > bytes.len() as u64 {
            return Err(Error::Sample {
                sample: e.id,
                reason: format!("image block [{}, {end}) truncated; file has {} bytes", e.offset, bytes.len()),
            });
        }
        let data: Vec<f64> = bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        let image = Panorama::new(h, w, data).map_err(|err| Error::Sample {
            sample: e.id,
            reason: err.to_string(),
        })?;
        samples.push(Sample {
            id: e.id,
            image,
            layout: e.layout.clone(),
            target: LayoutTarget::from_layout(&e.layout, w),
        });
    }
    let expected = manifest.entries.len() as u64 * block;
    if bytes.len() as u64 != expected {
        return Err(Error::Dataset(format!(
            "{} has {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    if content_hash(&manifest.entries, &bytes) != manifest.content_hash {
        return Err(Error::Dataset(format!("{}: content hash mismatch", dir.display())));
    }
    Ok(Dataset { manifest, samples })
}

/// Sample ids of each split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIds {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic split from the dataset content hash and the training seed:
/// one shuffle, then test, validation, labeled, unlabeled in that order.
/// Labeled sets of smaller budgets are prefixes of larger ones.
pub fn make_splits(manifest: &DatasetManifest, cfg: &ExperimentConfig) -> Result<SplitIds> {
    let n = manifest.entries.len();
    if cfg.n_test + cfg.n_val + cfg.label_budget > n {
        return Err(Error::Config(format!(
            "splits need {} samples, dataset has {n}",
            cfg.n_test + cfg.n_val + cfg.label_budget
        )));
    }
    let hash = u64::from_str_radix(&manifest.content_hash[..16], 16)
        .map_err(|_| Error::Dataset("content hash is not hex".into()))?;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream(cfg.seed ^ hash, Stream::Split, 0));
    let (test, rest) = ids.split_at(cfg.n_test);
    let (val, pool) = rest.split_at(cfg.n_val);
    let (labeled, unl) = pool.split_at(cfg.label_budget);
    let take = if cfg.supervised_only {
        0
    } else {
        cfg.n_unlabeled.unwrap_or(unl.len()).min(unl.len())
    };
    Ok(SplitIds {
        labeled: labeled.to_vec(),
        unlabeled: unl[..take].to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            height: 16,
            width: 32,
            n_samples: 12,
            n_val: 2,
            n_test: 3,
            label_budget: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_stable() {
        let cfg = small();
        let ds = generate_dataset(&cfg).unwrap();
        let s = make_splits(&ds.manifest, &cfg).unwrap();
        let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(s, make_splits(&ds.manifest, &cfg).unwrap());
        let mut bigger = cfg.clone();
        bigger.label_budget = 4;
        let s4 = make_splits(&ds.manifest, &bigger).unwrap();
        assert_eq!(&s4.labeled[..2], &s.labeled[..]);
        assert_eq!(s4.test, s.test);
        let mut sup = cfg.clone();
        sup.supervised_only = true;
        assert!(make_splits(&ds.manifest, &sup).unwrap().unlabeled.is_empty());
    }

    #[test]
    fn sample_independent_of_count() {
        let cfg = small();
        let mut more = cfg.clone();
        more.n_samples = 20;
        assert_eq!(generate_sample(&cfg, 5).unwrap().1, generate_sample(&more, 5).unwrap().1);
    }
}
