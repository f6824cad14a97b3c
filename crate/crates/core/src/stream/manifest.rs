//! CSV manifests: a `path,label[,domain]` header followed by one row per
//! image. Paths resolve relative to the manifest's directory.

use std::fs;
use std::path::Path;

use super::{Dataset, Image, Item};
use crate::error::{Error, Result};

fn row_err(row: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        row,
        message: message.into(),
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| row_err(0, format!("unreadable header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_domain = match cols.as_slice() {
        ["path", "label"] => false,
        ["path", "label", "domain"] => true,
        _ => return Err(row_err(0, format!("header must be `path,label[,domain]`, got {cols:?}"))),
    };

    let mut items: Vec<Item> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_err(row, e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(row_err(row, format!("expected {} fields, got {}", cols.len(), rec.len())));
        }
        let label: usize = rec[1]
            .parse()
            .map_err(|_| row_err(row, format!("label `{}` is not a class id", &rec[1])))?;
        let domain = if has_domain {
            Some(
                rec[2]
                    .parse()
                    .map_err(|_| row_err(row, format!("domain `{}` is not an integer", &rec[2])))?,
            )
        } else {
            None
        };
        let img_path = base.join(&rec[0]);
        let decoded = image::open(&img_path)
            .map_err(|e| row_err(row, format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        let data = decoded.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        let image = Image::new(h as usize, w as usize, 3, data)?;
        if let Some(first) = items.first() {
            if first.image.shape() != image.shape() {
                return Err(row_err(
                    row,
                    format!("image shape {:?} differs from {:?}", image.shape(), first.image.shape()),
                ));
            }
        }
        items.push(Item {
            id: items.len(),
            image,
            label,
            domain,
        });
    }
    if items.is_empty() {
        return Err(row_err(0, "manifest has no rows"));
    }
    let n_classes = items.iter().map(|it| it.label).max().unwrap_or(0) + 1;
    let names = (0..n_classes).map(|k| format!("class_{k}")).collect();
    Dataset::new(items, names)
}

/// Write a 3-channel dataset as PNG files plus `manifest.csv` in `dir`.
/// The domain column is emitted when every item carries a domain id.
pub fn save_manifest(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let with_domain = !ds.is_empty() && ds.items().iter().all(|it| it.domain.is_some());
    let mut out = String::from(if with_domain { "path,label,domain\n" } else { "path,label\n" });
    for it in ds.items() {
        let (h, w, c) = it.image.shape();
        if c != 3 {
            return Err(crate::error::invalid!("manifest export supports 3-channel images only"));
        }
        let bytes: Vec<u8> = it
            .image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let name = format!("img_{:06}.png", it.id);
        let file = dir.join(&name);
        image::save_buffer(&file, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
        match it.domain {
            Some(d) if with_domain => out.push_str(&format!("{name},{},{d}\n", it.label)),
            _ => out.push_str(&format!("{name},{}\n", it.label)),
        }
    }
    let csv_path = dir.join("manifest.csv");
    fs::write(&csv_path, out).map_err(|e| Error::io(csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::synthetic::{rotated_blobs, split_blobs, BlobSpec};

    fn quantized(ds: &Dataset) -> Dataset {
        let items = ds
            .items()
            .iter()
            .map(|it| {
                let mut it = it.clone();
                for v in &mut it.image.data {
                    *v = (*v * 255.0).round() / 255.0;
                }
                it
            })
            .collect();
        Dataset::new(items, ds.class_names().to_vec()).unwrap()
    }

    fn small() -> BlobSpec {
        BlobSpec {
            n_classes: 2,
            per_class: 2,
            image_size: 4,
            ..BlobSpec::default()
        }
    }

    #[test]
    fn four_rows_two_classes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = split_blobs(&small()).unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        let back = load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.n_classes(), 2);
        assert_eq!(back.len(), 4);
        assert!(back.items().iter().all(|it| it.domain.is_none()));
    }

    #[test]
    fn round_trip_with_and_without_domain() {
        let dir = tempfile::tempdir().unwrap();
        let ds = quantized(&rotated_blobs(&small(), &[0.0, 30.0]).unwrap());
        save_manifest(&ds, dir.path()).unwrap();
        let back = load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, ds);

        let dir2 = tempfile::tempdir().unwrap();
        let plain = quantized(&split_blobs(&small()).unwrap());
        save_manifest(&plain, dir2.path()).unwrap();
        assert_eq!(load_manifest(dir2.path().join("manifest.csv")).unwrap(), plain);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "path,label\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 0, .. })));
    }

    #[test]
    fn errors_carry_row_index() {
        let dir = tempfile::tempdir().unwrap();
        let ds = split_blobs(&small()).unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "path,label\nimg_000000.png,0\nimg_000001.png,x\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 2, .. })));

        fs::write(&p, "path,label\nimg_000000.png,0\nmissing.png,1\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { row: 2, .. })));

        let big = split_blobs(&BlobSpec {
            image_size: 8,
            ..small()
        })
        .unwrap();
        let other = dir.path().join("big");
        save_manifest(&big, &other).unwrap();
        fs::write(&p, "path,label\nimg_000000.png,0\nbig/img_000001.png,1\n").unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { row: 2, .. }), "{err}");
        assert!(load_manifest(dir.path().join("nope.csv")).is_err());
    }
}
