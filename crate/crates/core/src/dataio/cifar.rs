use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::LabeledImageSet;
use crate::error::{AmocError, Result};

const SIDE: usize = 32;
const CHANNELS: usize = 3;
/// One label byte followed by 1024 R, 1024 G and 1024 B bytes.
pub const RECORD_BYTES: usize = 1 + CHANNELS * SIDE * SIDE;

/// Loads a CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    load_records(path, 10, SIDE)
}

/// Loads records in the CIFAR binary layout with an arbitrary square side.
pub fn load_records(
    path: impl AsRef<Path>,
    num_classes: usize,
    side: usize,
) -> Result<LabeledImageSet> {
    let bytes = fs::read(path.as_ref())?;
    decode_records(&bytes, num_classes, side)
}

pub(crate) fn decode_records(bytes: &[u8], num_classes: usize, side: usize) -> Result<LabeledImageSet> {
    let pixels = CHANNELS * side * side;
    let record = 1 + pixels;
    if bytes.len() % record != 0 {
        return Err(AmocError::Format(format!(
            "file size {} is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut images = Array4::<f64>::zeros((n, CHANNELS, side, side));
    let mut labels = Vec::with_capacity(n);
    let dst = images.as_slice_mut().expect("standard layout");
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(AmocError::CorruptRecord {
                index: i,
                reason: format!("label byte {label} >= {num_classes}"),
            });
        }
        labels.push(label);
        for (d, &b) in dst[i * pixels..(i + 1) * pixels].iter_mut().zip(&rec[1..]) {
            *d = f64::from(b) / 255.0;
        }
    }
    Ok(LabeledImageSet {
        images,
        labels,
        num_classes,
    })
}

pub(crate) fn encode_records(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let shape = set.images.shape();
    if shape[1] != CHANNELS || shape[2] != shape[3] {
        return Err(AmocError::Argument(format!(
            "record format needs 3×s×s images, got {shape:?}"
        )));
    }
    if set.num_classes > 256 {
        return Err(AmocError::Argument("labels must fit in a byte".into()));
    }
    let pixels = shape[1] * shape[2] * shape[3];
    let mut out = Vec::with_capacity(set.len() * (pixels + 1));
    let src = set.images.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    for (i, &label) in set.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            src[i * pixels..(i + 1) * pixels]
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

/// Serializes a set in the CIFAR binary record layout (pixels quantized to bytes).
pub fn write_records(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_records(set)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(RECORD_BYTES - 1));
        r
    }

    #[test]
    fn zero_record_gives_black_image() {
        let set = decode_records(&record(3, 0), 10, 32).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![3]);
        assert!(set.images.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn byte_255_is_exactly_one() {
        let set = decode_records(&record(0, 255), 10, 32).unwrap();
        assert!(set.images.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn channel_major_layout() {
        let mut r = record(1, 0);
        r[1] = 10; // R(0,0)
        r[1 + 1024] = 20; // G(0,0)
        r[1 + 2048 + 33] = 30; // B(1,1)
        let set = decode_records(&r, 10, 32).unwrap();
        assert_eq!(set.images[[0, 0, 0, 0]], 10.0 / 255.0);
        assert_eq!(set.images[[0, 1, 0, 0]], 20.0 / 255.0);
        assert_eq!(set.images[[0, 2, 1, 1]], 30.0 / 255.0);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let mut bytes = record(0, 1);
        bytes.pop();
        assert!(matches!(
            decode_records(&bytes, 10, 32),
            Err(AmocError::Format(_))
        ));
    }

    #[test]
    fn label_ten_is_corrupt() {
        let mut bytes = record(0, 1);
        bytes.extend(record(10, 1));
        match decode_records(&bytes, 10, 32) {
            Err(AmocError::CorruptRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected corrupt record, got {other:?}"),
        }
    }

    #[test]
    fn record_order_preserved_and_bytes_round_trip() {
        let mut bytes = Vec::new();
        for i in 0..5u8 {
            let mut r = record(i % 10, i * 40);
            r[7] = 200 - i;
            bytes.extend(r);
        }
        let set = decode_records(&bytes, 10, 32).unwrap();
        assert_eq!(set.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(encode_records(&set).unwrap(), bytes);
    }
}
