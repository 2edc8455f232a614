//! On-disk dataset layout: `images.bltn` holds one `N x C x H x W` tensor,
//! `annotations.csv` one row per image in the same order.

use std::path::Path;

use biasprobe::io::write_atomic;
use biasprobe::relation::{normalize_annotations, AnnotationTable, RawTable};
use biasprobe::tensor::Tensor;

use crate::{failed, invalid, CliError};

pub const IMAGES: &str = "images.bltn";
pub const ANNOTATIONS: &str = "annotations.csv";
pub const RELATIONS: &str = "relations.csv";

pub fn write_dataset(dir: &Path, images: &[Tensor], table: &AnnotationTable) -> Result<(), CliError> {
    let first = images.first().ok_or_else(|| invalid("cannot store an empty dataset"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(invalid("all images must share one shape"));
        }
        data.extend_from_slice(im.data());
    }
    let stacked = Tensor::new(shape, data).map_err(failed)?;
    let path = dir.join(IMAGES);
    write_atomic(&path, &stacked.to_bytes()).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(failed)?;
    let path = dir.join(ANNOTATIONS);
    write_atomic(&path, &csv).map_err(|e| failed(format!("{}: {e}", path.display())))
}

/// Splits the stacked tensor along its first axis.
pub fn read_images(path: &Path) -> Result<Vec<Tensor>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let stacked = Tensor::read_from(std::io::BufReader::new(file)).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let shape = stacked.shape().to_vec();
    if shape.len() < 2 {
        return Err(invalid(format!("{}: expected a stacked image tensor, got shape {shape:?}", path.display())));
    }
    let inner = shape[1..].to_vec();
    let size: usize = inner.iter().product();
    stacked
        .data()
        .chunks(size)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()).map_err(failed))
        .collect()
}

pub fn read_table(path: &Path, flips: &[String], threshold: f64) -> Result<AnnotationTable, CliError> {
    let file = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let raw = RawTable::read_csv(file).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    for f in flips {
        if !raw.attribute_names.contains(f) {
            return Err(invalid(format!("--flip names unknown attribute `{f}`")));
        }
    }
    let flags: Vec<bool> = raw.attribute_names.iter().map(|n| flips.contains(n)).collect();
    let (table, _warnings) = normalize_annotations(&raw, &flags, threshold).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(table)
}

pub fn read_dataset(dir: &Path, flips: &[String], threshold: f64) -> Result<(Vec<Tensor>, AnnotationTable), CliError> {
    let images = read_images(&dir.join(IMAGES))?;
    let table = read_table(&dir.join(ANNOTATIONS), flips, threshold)?;
    if images.len() != table.len() {
        return Err(invalid(format!(
            "{}: {} images but {} annotation rows",
            dir.display(),
            images.len(),
            table.len()
        )));
    }
    Ok((images, table))
}
