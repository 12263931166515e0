//! Dataset manifest I/O. One record per line, tab-separated: relative image
//! path, caption, then repeating `x0,y0,x1,y1,category` groups. Images are
//! lossless PNG.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::boxes::NormBox;
use crate::tensor::{FeatureGrid, Real};
use crate::{Error, Result};

use super::synth::{build_plan_public, render_image, SyntheticSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image_path: String,
    pub caption: String,
    pub annotations: Vec<(NormBox, String)>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Render the whole split and write images plus the manifest. Returns the
/// records in file order.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let plan = build_plan_public(spec)?;
    let mut records = Vec::with_capacity(spec.num_images);
    let mut manifest = String::new();
    for idx in 0..spec.num_images {
        let rendered = render_image(spec, &plan, idx)?;
        let rel = format!("images/{idx:05}.png");
        let img = image::RgbImage::from_raw(
            rendered.size as u32,
            rendered.size as u32,
            rendered.pixels.clone(),
        )
        .ok_or_else(|| Error::Image("pixel buffer size mismatch".into()))?;
        img.save(out_dir.join(&rel)).map_err(|e| Error::Image(e.to_string()))?;

        let mut line = format!("{rel}\t{}", rendered.caption);
        for obj in &rendered.objects {
            line.push_str(&format!(
                "\t{:.6},{:.6},{:.6},{:.6},{}",
                obj.box_.x0, obj.box_.y0, obj.box_.x1, obj.box_.y1, obj.category
            ));
        }
        manifest.push_str(&line);
        manifest.push('\n');
        records.push(DatasetRecord {
            image_path: rel,
            caption: rendered.caption,
            annotations: rendered.objects.iter().map(|o| (o.box_, o.category.clone())).collect(),
        });
    }
    let mut f = fs::File::create(out_dir.join(MANIFEST_NAME))?;
    f.write_all(manifest.as_bytes())?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))
        .map_err(|e| Error::Missing(format!("manifest at {}: {e}", dir.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let path = fields
            .next()
            .ok_or_else(|| Error::Data(format!("manifest line {lineno}: missing path")))?;
        let caption = fields
            .next()
            .ok_or_else(|| Error::Data(format!("manifest line {lineno}: missing caption")))?;
        let mut annotations = Vec::new();
        for group in fields {
            let parts: Vec<&str> = group.splitn(5, ',').collect();
            if parts.len() != 5 {
                return Err(Error::Data(format!("manifest line {lineno}: bad group '{group}'")));
            }
            let nums: Vec<f64> = parts[..4]
                .iter()
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::Data(format!("manifest line {lineno}: bad number '{p}'")))
                })
                .collect::<Result<_>>()?;
            annotations.push((NormBox::new(nums[0], nums[1], nums[2], nums[3])?, parts[4].to_string()));
        }
        records.push(DatasetRecord {
            image_path: path.to_string(),
            caption: caption.to_string(),
            annotations,
        });
    }
    Ok(records)
}

/// Load a record's PNG as a zero-centered float grid.
pub fn load_image<T: Real>(dir: &Path, record: &DatasetRecord) -> Result<FeatureGrid<T>> {
    let img = image::open(dir.join(&record.image_path))
        .map_err(|e| Error::Image(format!("{}: {e}", record.image_path)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img
        .as_raw()
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0 - 0.5))
        .collect();
    FeatureGrid::new(h, w, 3, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 3,
            image_size: 32,
            num_images: 3,
            categories: vec!["red circle".into(), "blue square".into()],
            objects_min: 1,
            objects_max: 2,
            object_scale: (0.25, 0.45),
        }
    }

    #[test]
    fn manifest_roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let written = gen_synthetic_dataset(&spec(), dir.path()).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(written.len(), read.len());
        for (w, r) in written.iter().zip(&read) {
            assert_eq!(w.image_path, r.image_path);
            assert_eq!(w.caption, r.caption);
            assert_eq!(w.annotations.len(), r.annotations.len());
            for ((wb, wc), (rb, rc)) in w.annotations.iter().zip(&r.annotations) {
                assert_eq!(wc, rc);
                assert!((wb.x0 - rb.x0).abs() < 1e-6);
                assert!((wb.y1 - rb.y1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_synthetic_dataset(&spec(), d1.path()).unwrap();
        gen_synthetic_dataset(&spec(), d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join(MANIFEST_NAME)).unwrap();
        let m2 = std::fs::read(d2.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(m1, m2);
        let i1 = std::fs::read(d1.path().join("images/00000.png")).unwrap();
        let i2 = std::fs::read(d2.path().join("images/00000.png")).unwrap();
        assert_eq!(i1, i2);
    }

    #[test]
    fn loaded_images_are_centered_floats() {
        let dir = tempfile::tempdir().unwrap();
        let records = gen_synthetic_dataset(&spec(), dir.path()).unwrap();
        let grid: FeatureGrid<f32> = load_image(dir.path(), &records[0]).unwrap();
        assert_eq!(grid.height(), 32);
        assert_eq!(grid.channels(), 3);
        assert!(grid.values().iter().all(|&v| (-0.5..=0.5).contains(&v)));
    }
}
