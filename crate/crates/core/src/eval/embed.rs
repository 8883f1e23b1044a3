use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2};
use serde_json::json;

use crate::dataio::LabeledImageSet;
use crate::error::{arg_err, AmocError, Result};
use crate::model::{BnMode, DualBnEncoder};

/// Unit-norm embedding of every image, in dataset order, with eval statistics.
pub fn export_embeddings(encoder: &DualBnEncoder, data: &LabeledImageSet, bn: BnMode) -> Result<Array2<f64>> {
    let n = data.len();
    let mut out = Array2::zeros((n, encoder.embed_dim()));
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let x = data.images.slice(s![start..end, .., .., ..]).to_owned();
        out.slice_mut(s![start..end, ..]).assign(&encoder.embed(&x, bn)?);
    }
    Ok(out)
}

/// u64-LE header length, JSON header `{rows, cols, dtype}`, then row-major f32 LE.
pub fn write_embeddings(path: impl AsRef<Path>, emb: &Array2<f64>) -> Result<()> {
    let header = serde_json::to_vec(&json!({"rows": emb.nrows(), "cols": emb.ncols(), "dtype": "f32"}))?;
    let mut buf = Vec::with_capacity(8 + header.len() + 4 * emb.len());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in emb.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| AmocError::Format(format!("embedding file: {m}"));
    if bytes.len() < 8 {
        return Err(bad("too short"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&e.to_string()))?;
    let rows = header["rows"].as_u64().ok_or_else(|| bad("missing rows"))? as usize;
    let cols = header["cols"].as_u64().ok_or_else(|| bad("missing cols"))? as usize;
    if header["dtype"] != "f32" {
        return Err(bad("dtype must be f32"));
    }
    let body = &bytes[8 + hlen..];
    if body.len() != rows * cols * 4 {
        return Err(bad("size does not match header"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).unwrap())
}

/// One label per line.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| AmocError::Format(format!("bad label on line {}", i + 1))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// Rows projected onto the leading components.
    pub projected: Array2<f64>,
    /// Share of total variance captured by each kept component.
    pub explained_ratio: Vec<f64>,
}

/// Principal components of the centered rows, largest first. Component
/// signs are fixed so each has a positive largest-magnitude loading.
pub fn pca(x: &Array2<f64>, k: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if n < 2 || k == 0 || k > d {
        return arg_err(format!("PCA of {n}x{d} into {k} components"));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Array2::zeros((d, k));
    let mut ratio = Vec::with_capacity(k);
    for (c, &j) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(j);
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap()).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            comps[[i, c]] = sign * v[i];
        }
        ratio.push(if total > 0.0 { eig.eigenvalues[j].max(0.0) / total } else { 0.0 });
    }
    Ok(Pca {
        projected: centered.dot(&comps),
        explained_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_toy_dataset;
    use crate::model::ArchConfig;
    use crate::seed::from_seed;

    #[test]
    fn embeddings_unit_norm_and_duplicates_match() {
        let enc = DualBnEncoder::new(&ArchConfig::tiny(), &mut from_seed(1)).unwrap();
        let data = synth_toy_dataset(2, 6, 2, 8).unwrap();
        let mut dup = data.clone();
        let first = data.images.slice(s![0..1, .., .., ..]).to_owned();
        dup.images.slice_mut(s![1..2, .., .., ..]).assign(&first);
        let e = export_embeddings(&enc, &dup, BnMode::Adv).unwrap();
        for r in e.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.25);
        write_embeddings(dir.path().join("e.bin"), &e).unwrap();
        assert_eq!(read_embeddings(dir.path().join("e.bin")).unwrap(), e);
        write_labels(dir.path().join("l.txt"), &[0, 1, 1]).unwrap();
        assert_eq!(read_labels(dir.path().join("l.txt")).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = from_seed(3);
        use rand::Rng;
        let x = Array2::from_shape_fn((200, 3), |(_, j)| rng.random_range(-1.0..1.0) * [5.0, 1.0, 0.1][j]);
        let p = pca(&x, 2).unwrap();
        assert!(p.explained_ratio[0] > 0.9);
        assert!(p.explained_ratio[0] >= p.explained_ratio[1]);
        assert_eq!(p.projected.dim(), (200, 2));
    }
}
