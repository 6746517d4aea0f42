use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::patchops::{apply, sample_transform, warp, AffineTransform, Patch, TransformDistribution};
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Index of the clean image within the test set.
    pub source_index: usize,
    pub patch_id: String,
    pub transform: AffineTransform,
    /// Tensor file (relative to the manifest) holding the perturbed image.
    pub chunk: String,
    /// Row of the image within the chunk tensor.
    pub row: usize,
    /// Byte offset of the image's first value within the chunk file.
    pub byte_offset: u64,
    pub true_label: usize,
    pub target_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub testset_digest: String,
    pub image_shape: Vec<usize>,
    pub patch_count: usize,
    pub image_count: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(text).map_err(|e| {
            // serde_json reports line/column; map to an approximate byte offset
            let offset = text
                .split(|&b| b == b'\n')
                .take(e.line().saturating_sub(1))
                .map(|l| l.len() + 1)
                .sum::<usize>()
                + e.column().saturating_sub(1);
            Error::format(offset, format!("bad manifest: {e}"))
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(0, format!("unsupported manifest version {}", m.format_version)));
        }
        if m.entries.len() != m.patch_count * m.image_count {
            return Err(Error::format(
                0,
                format!(
                    "{} entries but {} patches x {} images",
                    m.entries.len(),
                    m.patch_count,
                    m.image_count
                ),
            ));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_json(&codec::read_file(&dir.join(MANIFEST_FILE))?)
    }
}

fn chunk_name(patch_index: usize) -> String {
    format!("patched-{patch_index:03}.pft")
}

fn chunk_header_len(rank: usize) -> u64 {
    (4 + 1 + 4 + 8 * rank) as u64
}

/// Perturbs every test image with every patch under one fresh transform
/// each, writing one chunk tensor `[N, C, H, W]` per patch plus
/// `manifest.json` into `out_dir`.
pub fn emit_patched_dataset(
    testset: &LabeledDataset,
    bundle: &[Patch],
    dist: &TransformDistribution,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    let canvas = testset.canvas()?;
    let image_shape = testset.image_shape();
    for p in bundle {
        if p.channels() != image_shape[0] {
            return Err(Error::Shape(format!(
                "patch {} has {} channels, images have {}",
                p.patch_id,
                p.channels(),
                image_shape[0]
            )));
        }
    }
    let image_bytes = (image_shape.iter().product::<usize>() * 4) as u64;
    let per_patch: Vec<Vec<ManifestEntry>> = bundle
        .par_iter()
        .enumerate()
        .map(|(pi, patch)| -> Result<Vec<ManifestEntry>> {
            let chunk = chunk_name(pi);
            let mut data = Vec::with_capacity(testset.images.len());
            let mut entries = Vec::with_capacity(testset.len());
            for i in 0..testset.len() {
                let t = emission_transform(dist, seed, pi, i);
                let out = apply(&testset.image(i), &warp(patch, &t, canvas)?)?;
                data.extend_from_slice(out.data());
                entries.push(ManifestEntry {
                    source_index: i,
                    patch_id: patch.patch_id.clone(),
                    transform: t,
                    chunk: chunk.clone(),
                    row: i,
                    byte_offset: chunk_header_len(4) + i as u64 * image_bytes,
                    true_label: testset.labels[i],
                    target_label: patch.target_class,
                });
            }
            let mut shape = vec![testset.len()];
            shape.extend_from_slice(&image_shape);
            codec::save_tensor(&out_dir.join(&chunk), &Tensor::from_raw(shape, data))?;
            Ok(entries)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        testset_digest: testset.digest.clone(),
        image_shape,
        patch_count: bundle.len(),
        image_count: testset.len(),
        entries: per_patch.into_iter().flatten().collect(),
    };
    codec::write_file(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn emission_transform(dist: &TransformDistribution, seed: u64, patch_index: usize, image: usize) -> AffineTransform {
    let mut r = rng::stream(seed, &[rng::tag("emit"), patch_index as u64, image as u64]);
    sample_transform(dist, &mut r)
}

/// Recomputes one perturbed image from its recorded source, patch and
/// transform.
pub fn replay_entry(testset: &LabeledDataset, bundle: &[Patch], entry: &ManifestEntry) -> Result<Tensor> {
    let patch = bundle
        .iter()
        .find(|p| p.patch_id == entry.patch_id)
        .ok_or_else(|| Error::invalid(format!("manifest references unknown patch {}", entry.patch_id)))?;
    if entry.source_index >= testset.len() {
        return Err(Error::invalid(format!("source index {} out of range", entry.source_index)));
    }
    apply(
        &testset.image(entry.source_index),
        &warp(patch, &entry.transform, testset.canvas()?)?,
    )
}

/// Replays every entry and compares it bit-for-bit with the stored image.
/// Returns the number of entries checked.
pub fn verify_manifest(manifest: &Manifest, testset: &LabeledDataset, bundle: &[Patch], dir: &Path) -> Result<usize> {
    if manifest.testset_digest != testset.digest {
        return Err(Error::invalid("manifest was generated from a different test set"));
    }
    let mut chunks: Vec<(String, Vec<u8>)> = Vec::new();
    for (n, entry) in manifest.entries.iter().enumerate() {
        if chunks.last().map(|c| &c.0) != Some(&entry.chunk) {
            chunks.push((entry.chunk.clone(), codec::read_file(&dir.join(&entry.chunk))?));
        }
        let bytes = &chunks.last().unwrap().1;
        let want = replay_entry(testset, bundle, entry)?;
        let mut r = Reader::new(bytes);
        r.take(entry.byte_offset as usize, "chunk prefix")?;
        let stored = r.take(want.len() * 4, "stored image")?;
        let same = stored
            .chunks_exact(4)
            .zip(want.data())
            .all(|(b, v)| b == v.to_le_bytes());
        if !same {
            return Err(Error::invalid(format!(
                "entry {n} ({} on image {}) does not replay",
                entry.patch_id, entry.source_index
            )));
        }
    }
    Ok(manifest.entries.len())
}
