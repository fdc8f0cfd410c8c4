//! Import of external 8-bit grayscale images listed in a CSV manifest.
//!
//! Columns: `path,label_1,…,label_L` and an optional trailing `exclude`
//! column. Empty label cells mark the sample's labels as unknown; rows with
//! a truthy `exclude` are skipped. Image files are either binary PGM (`P5`,
//! maxval 255) or headerless square byte arrays.

use std::path::Path;

use super::{DataError, DatasetBundle, Split};
use crate::tensor::Tensor;

/// Grayscale image as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_gray(bytes: &[u8]) -> Result<GrayImage, DataError> {
    if bytes.starts_with(b"P5") {
        return parse_pgm(bytes);
    }
    let side = (bytes.len() as f64).sqrt().round() as usize;
    if side == 0 || side * side != bytes.len() {
        return Err(DataError::Manifest(format!(
            "raw image of {} bytes is not square",
            bytes.len()
        )));
    }
    Ok(GrayImage {
        width: side,
        height: side,
        pixels: bytes.to_vec(),
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Manifest("malformed PGM header".into()));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| DataError::Manifest("malformed PGM header".into()))?;
        fields.push(v);
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(DataError::Manifest(format!("PGM maxval {maxval} is not 8-bit")));
    }
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| DataError::Manifest("truncated PGM payload".into()))?
        .to_vec();
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Nearest-neighbour resize to `size × size`, scaled to `[0,1]`.
pub fn resize_nearest(img: &GrayImage, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * img.height as f64 / size as f64).floor() as usize;
        let sy = sy.min(img.height - 1);
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * img.width as f64 / size as f64).floor() as usize;
            let sx = sx.min(img.width - 1);
            out.push(img.pixels[sy * img.width + sx] as f64 / 255.0);
        }
    }
    out
}

fn truthy(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes")
}

/// Reads a manifest; relative image paths resolve against the manifest's
/// directory. All samples land in the unlabeled split; call
/// [`super::make_splits`] afterwards.
pub fn import_manifest(path: impl AsRef<Path>, image_size: usize) -> Result<DatasetBundle, DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Manifest(e.to_string()))?
        .clone();
    if headers.get(0) != Some("path") {
        return Err(DataError::Manifest("first column must be \"path\"".into()));
    }
    let has_exclude = headers.iter().next_back() == Some("exclude");
    let num_labels = headers.len() - 1 - usize::from(has_exclude);
    if num_labels == 0 {
        return Err(DataError::Manifest("no label columns".into()));
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut known = Vec::new();
    for (row_no, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Manifest(e.to_string()))?;
        if has_exclude && truthy(rec.get(num_labels + 1).unwrap_or("")) {
            continue;
        }
        let cells: Vec<&str> = (1..=num_labels).map(|c| rec.get(c).unwrap_or("")).collect();
        let row_known = cells.iter().all(|c| !c.is_empty());
        for c in &cells {
            labels.push(match *c {
                "" | "0" => 0u8,
                "1" => 1,
                other => {
                    return Err(DataError::Manifest(format!(
                        "row {}: label value {other:?} is not 0/1",
                        row_no + 1
                    )))
                }
            });
        }
        known.push(row_known);
        let img_path = base.join(rec.get(0).unwrap_or(""));
        let img = parse_gray(&std::fs::read(&img_path)?)?;
        images.extend(resize_nearest(&img, image_size));
    }
    let n = known.len();
    DatasetBundle::new(
        image_size,
        Tensor::new(vec![n, image_size * image_size], images)?,
        num_labels,
        labels,
        known,
        vec![Split::UnlabeledTrain; n],
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_downsample() {
        let img = GrayImage {
            width: 4,
            height: 4,
            pixels: (0..16).map(|v| v * 10).collect(),
        };
        let same = resize_nearest(&img, 4);
        assert_eq!(same[5], 50.0 / 255.0);
        let half = resize_nearest(&img, 2);
        assert_eq!(half, vec![50.0 / 255.0, 70.0 / 255.0, 130.0 / 255.0, 150.0 / 255.0]);
    }

    #[test]
    fn imports_pgm_and_raw_with_exclusion() {
        let dir = tempfile::tempdir().unwrap();
        let mut pgm = b"P5\n# c\n2 2\n255\n".to_vec();
        pgm.extend_from_slice(&[0, 255, 255, 0]);
        std::fs::write(dir.path().join("a.pgm"), &pgm).unwrap();
        std::fs::write(dir.path().join("b.raw"), [10u8; 9]).unwrap();
        std::fs::write(
            dir.path().join("m.csv"),
            "path,label_1,label_2,exclude\na.pgm,1,0,0\nb.raw,,1,0\nb.raw,0,0,1\n",
        )
        .unwrap();
        let b = import_manifest(dir.path().join("m.csv"), 2).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.images().row(0), &[0.0, 1.0, 1.0, 0.0]);
        assert!(b.label_known(0));
        assert!(!b.label_known(1));
        assert_eq!(b.label_row_unguarded(0), &[1, 0]);
    }

    #[test]
    fn rejects_bad_label_value() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.raw"), [1u8; 4]).unwrap();
        std::fs::write(dir.path().join("m.csv"), "path,l1\nb.raw,2\n").unwrap();
        assert!(import_manifest(dir.path().join("m.csv"), 2).is_err());
    }
}
