//! Cropping, align-corners trilinear resampling, and per-channel min-max
//! intensity rescaling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    hidden_tissue_stem, load_case, load_label_map, save_case, save_label_map, voxel_count,
    CasePaths, CaseRecord, DatasetManifest, Dims, LabelMap, Volume,
};
use crate::error::{Error, Result};

/// Half-open voxel box `[lo, hi)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: Dims) -> Self {
        BoundingBox {
            lo: [0; 3],
            hi: dims,
        }
    }

    /// From six integers `z0, y0, x0, z1, y1, x1`.
    pub fn from_ints(v: [usize; 6]) -> Self {
        BoundingBox {
            lo: [v[0], v[1], v[2]],
            hi: [v[3], v[4], v[5]],
        }
    }

    pub fn extent(&self) -> Dims {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    fn check(&self, dims: Dims) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] >= self.hi[a] || self.hi[a] > dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "bounding box {self:?} invalid for {dims:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Bounding box of voxels that are nonzero in any channel.
pub fn nonzero_bbox(volume: &Volume) -> Option<BoundingBox> {
    let dims = volume.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                if (0..volume.channels()).any(|c| volume.channel(c)[i] != 0.0) {
                    any = true;
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p + 1);
                    }
                }
            }
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

/// Source coordinate of output index `o` under the align-corners convention.
fn source_coord(o: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

fn axis_weights(out_len: usize, in_len: usize, offset: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = source_coord(o, out_len, in_len);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (offset + i0, offset + i1, s - i0 as f64)
        })
        .collect()
}

fn resolve_bbox(volume: &Volume, bbox: Option<BoundingBox>) -> Result<BoundingBox> {
    let b = match bbox {
        Some(b) => b,
        None => nonzero_bbox(volume)
            .ok_or_else(|| Error::InvalidArgument("empty bounding box: all-zero volume".into()))?,
    };
    b.check(volume.dims())?;
    Ok(b)
}

/// Crops to `bbox` (default: nonzero bounding box) and resamples every
/// channel to `target` with trilinear interpolation. Output corner voxel
/// centers coincide with the crop's corner voxel centers.
pub fn resample_and_crop(
    volume: &Volume,
    target: Dims,
    bbox: Option<BoundingBox>,
) -> Result<Volume> {
    if target.iter().any(|&t| t < 2) {
        return Err(Error::InvalidArgument(format!(
            "target shape {target:?} must be >= 2 per axis"
        )));
    }
    let b = resolve_bbox(volume, bbox)?;
    let ext = b.extent();
    let dims = volume.dims();
    let wz = axis_weights(target[0], ext[0], b.lo[0]);
    let wy = axis_weights(target[1], ext[1], b.lo[1]);
    let wx = axis_weights(target[2], ext[2], b.lo[2]);
    let mut out = Volume::zeros(volume.channels(), target);
    out.voxel_spacing = [0, 1, 2].map(|a| {
        volume.voxel_spacing[a] * (ext[a].max(2) - 1) as f32 / (target[a] - 1) as f32
    });
    out.channel_names = volume.channel_names.clone();
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    for c in 0..volume.channels() {
        let src = volume.channel(c);
        let dst = out.channel_mut(c);
        let mut o = 0;
        for &(z0, z1, tz) in &wz {
            for &(y0, y1, ty) in &wy {
                for &(x0, x1, tx) in &wx {
                    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                    let plane = |z: usize| {
                        let r0 = lerp(src[idx(z, y0, x0)] as f64, src[idx(z, y0, x1)] as f64, tx);
                        let r1 = lerp(src[idx(z, y1, x0)] as f64, src[idx(z, y1, x1)] as f64, tx);
                        lerp(r0, r1, ty)
                    };
                    let v = if tz == 0.0 {
                        plane(z0)
                    } else {
                        lerp(plane(z0), plane(z1), tz)
                    };
                    dst[o] = v as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor counterpart of [`resample_and_crop`] for label maps.
pub fn resample_labels_nearest(
    labels: &LabelMap,
    target: Dims,
    bbox: BoundingBox,
) -> Result<LabelMap> {
    bbox.check(labels.dims())?;
    let ext = bbox.extent();
    let dims = labels.dims();
    let nearest = |o: usize, a: usize| {
        bbox.lo[a] + (source_coord(o, target[a], ext[a]).round() as usize).min(ext[a] - 1)
    };
    let mut data = Vec::with_capacity(voxel_count(target));
    for z in 0..target[0] {
        let sz = nearest(z, 0);
        for y in 0..target[1] {
            let sy = nearest(y, 1);
            for x in 0..target[2] {
                let sx = nearest(x, 2);
                data.push(labels.data()[(sz * dims[1] + sy) * dims[2] + sx]);
            }
        }
    }
    LabelMap::new(data, target, labels.taxonomy())
}

/// Per-channel `(v - min) / (max - min)`; constant channels become zeros.
pub fn rescale_intensity(volume: &Volume) -> Volume {
    let mut out = volume.clone();
    for c in 0..volume.channels() {
        let ch = out.channel_mut(c);
        let (min, max) = ch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if max > min {
            let range = max - min;
            ch.iter_mut().for_each(|v| *v = (*v - min) / range);
        } else {
            ch.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Zeroes every channel outside `mask`.
pub fn apply_brain_mask(volume: &Volume, mask: &[bool], mask_dims: Dims) -> Result<Volume> {
    if mask_dims != volume.dims() || mask.len() != voxel_count(mask_dims) {
        return Err(Error::Shape(format!(
            "mask {:?} vs volume {:?}",
            mask_dims,
            volume.dims()
        )));
    }
    let mut out = volume.clone();
    for c in 0..volume.channels() {
        for (v, &keep) in out.channel_mut(c).iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Preprocesses every case of the dataset at `input` into `output`:
/// nonzero crop, resample to `target`, rescale to [0, 1].
pub fn preprocess_dataset(input: &Path, output: &Path, target: Dims) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(input)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        let (vol, labels) = load_case(&case.stem(input))?;
        let bbox = resolve_bbox(&vol, None)?;
        let resampled = rescale_intensity(&resample_and_crop(&vol, target, Some(bbox))?);
        let labels = labels
            .map(|l| resample_labels_nearest(&l, target, bbox))
            .transpose()?;
        save_case(&resampled, labels.as_ref(), &case.stem(output))?;
        let hidden = hidden_tissue_stem(input, &case.case_id);
        if CasePaths::from_stem(&hidden).header.is_file() {
            let tissue = load_label_map(&hidden)?;
            let tissue = resample_labels_nearest(&tissue, target, bbox)?;
            save_label_map(&tissue, &hidden_tissue_stem(output, &case.case_id))?;
        }
        cases.push(CaseRecord {
            induced_prob_path: None,
            ..case.clone()
        });
    }
    let out = DatasetManifest {
        shape: target,
        cases,
        ..manifest
    };
    out.save(output)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let v = Volume::new(vec![0.37; 2 * 5 * 6 * 7], 2, [5, 6, 7]).unwrap();
        let out = resample_and_crop(&v, [9, 3, 11], None).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.37));
    }

    #[test]
    fn linear_ramp_resampled_exactly() {
        let dims = [16, 3, 3];
        let data: Vec<f32> = (0..voxel_count(dims))
            .map(|i| (i / 9) as f32 / 15.0)
            .collect();
        let v = Volume::new(data, 1, dims).unwrap();
        let out = resample_and_crop(&v, [9, 3, 3], Some(BoundingBox::full(dims))).unwrap();
        for z in 0..9 {
            let expected = z as f64 / 8.0;
            for i in 0..9 {
                let got = out.data()[z * 9 + i] as f64;
                assert!((got - expected).abs() < 1e-6, "{z}: {got} vs {expected}");
            }
        }
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[8 * 9], 1.0);
    }

    #[test]
    fn identity_resample() {
        let dims = [4, 5, 6];
        let data: Vec<f32> = (0..4 * voxel_count(dims)).map(|i| (i % 13) as f32 * 0.07).collect();
        let v = Volume::new(data, 4, dims).unwrap();
        let out = resample_and_crop(&v, dims, Some(BoundingBox::full(dims))).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn all_zero_without_bbox_errors() {
        let v = Volume::zeros(4, [4, 4, 4]);
        assert!(resample_and_crop(&v, [4, 4, 4], None).is_err());
    }

    #[test]
    fn crops_to_nonzero_box() {
        let dims = [6, 6, 6];
        let mut v = Volume::zeros(1, dims);
        for z in 1..4 {
            for y in 2..5 {
                for x in 0..2 {
                    v.data_mut()[(z * 6 + y) * 6 + x] = 1.0;
                }
            }
        }
        let b = nonzero_bbox(&v).unwrap();
        assert_eq!(b, BoundingBox { lo: [1, 2, 0], hi: [4, 5, 2] });
        let out = resample_and_crop(&v, [4, 4, 4], None).unwrap();
        assert!(out.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn labels_use_nearest() {
        let dims = [4, 1, 1];
        let l = LabelMap::new(vec![0, 1, 2, 3], dims, crate::data::Taxonomy::Tumor).unwrap();
        let out = resample_labels_nearest(&l, [7, 1, 1], BoundingBox::full(dims)).unwrap();
        assert_eq!(out.data(), &[0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn rescale_examples() {
        let v = Volume::new(vec![2.0, 4.0, 6.0, 5.0, 5.0, 5.0], 2, [1, 1, 3]).unwrap();
        let out = rescale_intensity(&v);
        assert_eq!(out.channel(0), &[0.0, 0.5, 1.0]);
        assert_eq!(out.channel(1), &[0.0, 0.0, 0.0]);
        assert_eq!(rescale_intensity(&out), out);
    }

    #[test]
    fn mask_cases() {
        let dims = [2, 2, 2];
        let v = Volume::new((1..=16).map(|i| i as f32 / 16.0).collect(), 2, dims).unwrap();
        assert_eq!(apply_brain_mask(&v, &[true; 8], dims).unwrap(), v);
        assert!(apply_brain_mask(&v, &[false; 8], dims)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        let half: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let out = apply_brain_mask(&v, &half, dims).unwrap();
        for c in 0..2 {
            for i in 0..8 {
                let expect = if i < 4 { v.channel(c)[i] } else { 0.0 };
                assert_eq!(out.channel(c)[i], expect);
            }
        }
        assert!(apply_brain_mask(&v, &[true; 4], [1, 2, 2]).is_err());
    }
}
