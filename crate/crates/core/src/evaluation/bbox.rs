use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::network::BBox;

/// Fraction of the `n` highest-scored pixels that fall inside `bbox`, where
/// `n` is the box area. Ties go to the lower row-major index.
pub fn bbox_ratio(heatmap: &Heatmap, bbox: &BBox) -> Result<f64> {
    let (h, w) = (heatmap.height(), heatmap.width());
    let n = bbox.area();
    if n == 0 {
        return Err(Error::InvalidArgument("bounding box is empty".into()));
    }
    if bbox.x + bbox.w > w || bbox.y + bbox.h > h {
        return Err(Error::InvalidArgument(format!("box {bbox:?} exceeds a {h}x{w} heatmap")));
    }
    let v = heatmap.data();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let inside = idx[..n].iter().filter(|&&i| bbox.contains(i % w, i / w)).count();
    Ok(inside as f64 / n as f64)
}
