//! IDX (MNIST) files: big-endian header, unsigned-byte payload.

use std::path::Path;

use super::LabeledDataset;
use crate::codec::{read_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn magic(r: &mut Reader<'_>, want: u32) -> Result<()> {
    let got = r.u32_be("IDX magic")?;
    if got != want {
        return Err(Error::format(0, format!("bad IDX magic {got:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

fn dim(r: &mut Reader<'_>) -> Result<usize> {
    Ok(r.u32_be("IDX dimension")? as usize)
}

/// Parses an image file into `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = Reader::new(bytes);
    magic(&mut r, IDX_IMAGES_MAGIC)?;
    let (n, rows, cols) = (dim(&mut r)?, dim(&mut r)?, dim(&mut r)?);
    let at = r.position();
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(at, "image payload size overflows"))?;
    let payload = r.take(len, "IDX image payload")?;
    r.finish()?;
    Ok((n, rows, cols, payload.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes);
    magic(&mut r, IDX_LABELS_MAGIC)?;
    let n = dim(&mut r)?;
    let payload = r.take(n, "IDX label payload")?;
    r.finish()?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair as `[N, 1, rows, cols]` images. The class
/// count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if labels.len() != n {
        // offset 4 holds the item count in both files
        return Err(Error::format(
            4,
            format!("{} holds {} labels but the image file holds {n} images", labels_path.display(), labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(Tensor::from_raw(vec![n, 1, rows, cols], pixels), labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_images() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 255, 0, 204, 153]);
        b
    }

    fn fixture_labels(n: u8) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1, 0, 0, 0, n];
        b.extend((0..n).map(|i| [7u8, 2, 5][i as usize % 3]));
        b
    }

    #[test]
    fn handcrafted_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, fixture_images()).unwrap();
        std::fs::write(&lp, fixture_labels(2)).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.images.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.8, 0.6]);
        assert_eq!(d.labels, vec![7, 2]);
        assert_eq!(d.class_count, 8);

        std::fs::write(&lp, fixture_labels(3)).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn guards_report_offsets() {
        let mut bad = fixture_images();
        bad[3] = 1;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
        let short = &fixture_images()[..20];
        assert!(matches!(parse_idx_images(short), Err(Error::Format { offset: 16, .. })));
        assert!(matches!(parse_idx_labels(&fixture_labels(2)[..9]), Err(Error::Format { offset: 8, .. })));
        assert!(parse_idx_labels(&fixture_images()).is_err());
    }
}
