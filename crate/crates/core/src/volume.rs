//! Volume data model and the grid operations around it: slice-subsampling
//! degradation, linear-in-z up-sampling, slice extraction/stacking,
//! intensity normalization and co-registered patch sampling.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical voxel spacing in millimetres along (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self> {
        let s = Self { z, y, x };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(v: f64) -> Self {
        Self { z: v, y: v, x: v }
    }

    fn validate(&self) -> Result<()> {
        if [self.z, self.y, self.x]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {self:?}"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn with_z(self, z: f64) -> Self {
        Self { z, ..self }
    }
}

/// A scalar volume indexed `[z, y, x]` with per-axis spacing and free-form
/// string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f64>,
    spacing: Spacing,
    meta: BTreeMap<String, String>,
}

impl Volume3D {
    pub fn new(data: Array3<f64>, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "volume dims must be positive, got {:?}",
                data.dim()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume contains {bad}")));
        }
        Ok(Self {
            data,
            spacing,
            meta: BTreeMap::new(),
        })
    }

    pub fn from_shape_fn(
        dims: (usize, usize, usize),
        spacing: Spacing,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn(dims, f), spacing)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// `(depth, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn depth(&self) -> usize {
        self.data.dim().0
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn slice(&self, z: usize) -> Slice2D {
        Slice2D {
            data: self.data.index_axis(Axis(0), z).to_owned(),
            index: z,
        }
    }

    pub(crate) fn derived(&self, data: Array3<f64>, spacing: Spacing) -> Result<Self> {
        let mut v = Self::new(data, spacing)?;
        v.meta = self.meta.clone();
        Ok(v)
    }
}

/// One `H x W` slice taken along z.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub data: Array2<f64>,
    pub index: usize,
}

impl Slice2D {
    pub fn new(data: Array2<f64>, index: usize) -> Self {
        Self { data, index }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// A co-registered (LR-on-HR-grid, HR) crop pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr_patch: Array3<f64>,
    pub hr_patch: Array3<f64>,
    pub origin: (usize, usize, usize),
}

/// Keeps slices `offset, offset + k, offset + 2k, ...`; spacing along z grows by `k`.
pub fn degrade(vol: &Volume3D, k: usize, offset: usize) -> Result<Volume3D> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "degradation factor K must be positive".into(),
        ));
    }
    if offset >= k {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} must be < K = {k}"
        )));
    }
    if offset >= vol.depth() {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} must be < depth {}",
            vol.depth()
        )));
    }
    let kept = vol.data.slice(s![offset..;k, .., ..]).to_owned();
    let out = vol
        .derived(kept, vol.spacing.with_z(vol.spacing.z * k as f64))?
        .with_meta("degrade_k", k.to_string())
        .with_meta("degrade_offset", offset.to_string());
    Ok(out)
}

/// Depth of the up-sampled grid whose every `k`-th slice is an input slice.
pub fn upsampled_depth(depth: usize, k: usize) -> usize {
    k * (depth - 1) + 1
}

/// Linear interpolation along z only; slice `k * n` of the output is input
/// slice `n`, and there is no extrapolation past the last input slice.
pub fn trilinear_upsample(vol: &Volume3D, k: usize) -> Result<Volume3D> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "up-sampling factor K must be >= 1".into(),
        ));
    }
    let (d, h, w) = vol.dims();
    if d < 2 {
        return Err(Error::Shape(format!(
            "up-sampling needs depth >= 2, got {d}"
        )));
    }
    let mut out = Array3::zeros((upsampled_depth(d, k), h, w));
    for n in 0..d - 1 {
        let a = vol.data.index_axis(Axis(0), n);
        let b = vol.data.index_axis(Axis(0), n + 1);
        for j in 0..k {
            let t = j as f64 / k as f64;
            let mut dst = out.index_axis_mut(Axis(0), k * n + j);
            if j == 0 {
                dst.assign(&a);
            } else {
                ndarray::Zip::from(&mut dst)
                    .and(&a)
                    .and(&b)
                    .for_each(|o, &av, &bv| *o = (1.0 - t) * av + t * bv);
            }
        }
    }
    out.index_axis_mut(Axis(0), k * (d - 1))
        .assign(&vol.data.index_axis(Axis(0), d - 1));
    Ok(vol
        .derived(out, vol.spacing.with_z(vol.spacing.z / k as f64))?
        .with_meta("method", "trilinear"))
}

/// Percentile by linear interpolation between closest ranks.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Clips at the upper `clip_percentile`, then maps `min -> 0`, `clip -> 1`.
/// Constant volumes become all zeros.
pub fn normalize_intensity(vol: &Volume3D, clip_percentile: f64) -> Result<Volume3D> {
    if !(0.0..=100.0).contains(&clip_percentile) {
        return Err(Error::InvalidArgument(format!(
            "clip percentile {clip_percentile} outside [0, 100]"
        )));
    }
    let values: Vec<f64> = vol.data.iter().copied().collect();
    let hi = percentile(&values, clip_percentile);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(hi);
    let range = hi - lo;
    let data = if range > 0.0 {
        vol.data.mapv(|v| (v.min(hi) - lo) / range)
    } else {
        Array3::zeros(vol.dims())
    };
    vol.derived(data, vol.spacing)
}

pub fn extract_slices(vol: &Volume3D) -> Vec<Slice2D> {
    (0..vol.depth()).map(|z| vol.slice(z)).collect()
}

pub fn stack_slices(slices: &[Slice2D], spacing: Spacing) -> Result<Volume3D> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
    let (h, w) = first.dims();
    if let Some(bad) = slices.iter().find(|s| s.dims() != (h, w)) {
        return Err(Error::Shape(format!(
            "slice {} is {:?}, expected {:?}",
            bad.index,
            bad.dims(),
            (h, w)
        )));
    }
    let mut data = Array3::zeros((slices.len(), h, w));
    for (z, sl) in slices.iter().enumerate() {
        data.index_axis_mut(Axis(0), z).assign(&sl.data);
    }
    Volume3D::new(data, spacing)
}

/// `count` random co-registered crops from two volumes on the same grid.
pub fn sample_patch_pairs(
    lr: &Volume3D,
    hr: &Volume3D,
    patch: (usize, usize, usize),
    count: usize,
    rng_seed: u64,
) -> Result<Vec<PatchPair>> {
    if lr.dims() != hr.dims() {
        return Err(Error::Shape(format!(
            "LR grid {:?} differs from HR grid {:?}",
            lr.dims(),
            hr.dims()
        )));
    }
    let (d, h, w) = hr.dims();
    let (pd, ph, pw) = patch;
    if pd == 0 || ph == 0 || pw == 0 || pd > d || ph > h || pw > w {
        return Err(Error::Shape(format!(
            "patch {patch:?} does not fit volume {:?}",
            hr.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..count)
        .map(|_| {
            let z = rng.random_range(0..=d - pd);
            let y = rng.random_range(0..=h - ph);
            let x = rng.random_range(0..=w - pw);
            let view = s![z..z + pd, y..y + ph, x..x + pw];
            PatchPair {
                lr_patch: lr.data.slice(view).to_owned(),
                hr_patch: hr.data.slice(view).to_owned(),
                origin: (z, y, x),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(d: usize, h: usize, w: usize) -> Volume3D {
        Volume3D::from_shape_fn(
            (d, h, w),
            Spacing::new(2.0, 0.5, 0.5).unwrap(),
            |(z, y, x)| (z * 100 + y * 10 + x) as f64,
        )
        .unwrap()
    }

    #[test]
    fn degrade_keeps_every_kth_slice() {
        let v = ramp(13, 2, 3);
        let lr = degrade(&v, 4, 0).unwrap();
        assert_eq!(lr.depth(), 4);
        for (i, z) in [0, 4, 8, 12].into_iter().enumerate() {
            assert_eq!(lr.slice(i).data, v.slice(z).data);
        }
        assert_eq!(lr.spacing().z, 8.0);
        assert_eq!(lr.meta()["degrade_k"], "4");
        assert_eq!(lr.meta()["degrade_offset"], "0");
    }

    #[test]
    fn degrade_identity_and_errors() {
        let v = ramp(5, 2, 2);
        assert_eq!(degrade(&v, 1, 0).unwrap().data(), v.data());
        assert!(degrade(&v, 0, 0).is_err());
        assert!(degrade(&v, 4, 4).is_err());
        assert!(degrade(&ramp(2, 1, 1), 4, 3).is_err());
        let shifted = degrade(&v, 2, 1).unwrap();
        assert_eq!(shifted.depth(), 2);
        assert_eq!(shifted.slice(1).data, v.slice(3).data);
    }

    #[test]
    fn upsample_then_degrade_is_a_fixpoint() {
        let v = ramp(5, 3, 3);
        let lr = degrade(&v, 4, 0).unwrap();
        let up = trilinear_upsample(&lr, 4).unwrap();
        assert_eq!(up.depth(), 5);
        assert_eq!(degrade(&up, 4, 0).unwrap().data(), lr.data());
    }

    #[test]
    fn upsample_midpoint_of_constant_slices() {
        let mut data = Array3::zeros((2, 3, 3));
        data.index_axis_mut(Axis(0), 0).fill(0.2);
        data.index_axis_mut(Axis(0), 1).fill(0.6);
        let v = Volume3D::new(data, Spacing::isotropic(1.0)).unwrap();
        let up = trilinear_upsample(&v, 2).unwrap();
        assert_eq!(up.depth(), 3);
        for x in up.slice(1).data.iter() {
            assert!((x - 0.4).abs() < 1e-15);
        }
        assert_eq!(up.spacing().z, 0.5);
        assert_eq!(trilinear_upsample(&v, 1).unwrap().data(), v.data());
        assert!(trilinear_upsample(&v, 0).is_err());
    }

    #[test]
    fn upsample_linear_ramp() {
        let c = 0.37;
        let v =
            Volume3D::from_shape_fn((4, 2, 2), Spacing::isotropic(1.0), |(z, _, _)| c * z as f64)
                .unwrap();
        let up = trilinear_upsample(&v, 4).unwrap();
        assert_eq!(up.depth(), 13);
        for z in 0..13 {
            for x in up.slice(z).data.iter() {
                assert!((x - c * z as f64 / 4.0).abs() < 1e-14, "z={z}");
            }
        }
    }

    #[test]
    fn normalize_cases() {
        let v = Volume3D::new(
            Array3::from_shape_vec((3, 1, 1), vec![0.0, 5.0, 10.0]).unwrap(),
            Spacing::isotropic(1.0),
        )
        .unwrap();
        let n = normalize_intensity(&v, 100.0).unwrap();
        assert_eq!(
            n.data().iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.5, 1.0]
        );

        let c = Volume3D::new(Array3::from_elem((2, 2, 2), 7.0), Spacing::isotropic(1.0)).unwrap();
        assert!(normalize_intensity(&c, 99.9)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn normalize_clips_outlier() {
        // 999 voxels in [0, 1] plus one hot voxel at 100.
        let mut vals: Vec<f64> = (0..999).map(|i| i as f64 / 998.0).collect();
        vals.push(100.0);
        let v = Volume3D::new(
            Array3::from_shape_vec((10, 10, 10), vals.clone()).unwrap(),
            Spacing::isotropic(1.0),
        )
        .unwrap();
        let n = normalize_intensity(&v, 99.9).unwrap();
        // brute-force percentile: rank 0.999 * 999 = 998.001 between sorted[998] = 1 and sorted[999] = 100
        let expected_clip = 1.0 + 0.001 * 99.0;
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((percentile(&vals, 99.9) - expected_clip).abs() < 1e-9);
        assert_eq!(n.data()[[9, 9, 9]], 1.0);
        assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        // the voxel at the clip value maps to exactly 1
        let probe = Volume3D::new(
            Array3::from_shape_vec((1, 1, 3), vec![0.0, expected_clip, 100.0]).unwrap(),
            Spacing::isotropic(1.0),
        )
        .unwrap();
        let hi = percentile(&[0.0, expected_clip, 100.0], 50.0);
        assert_eq!(hi, expected_clip);
        let pn = normalize_intensity(&probe, 50.0).unwrap();
        assert_eq!(pn.data()[[0, 0, 1]], 1.0);
        assert_eq!(pn.data()[[0, 0, 2]], 1.0);
    }

    #[test]
    fn slices_round_trip() {
        for d in [1, 3] {
            let v = ramp(d, 2, 4);
            let slices = extract_slices(&v);
            assert_eq!(slices.len(), d);
            assert!(slices.iter().enumerate().all(|(i, s)| s.index == i));
            let back = stack_slices(&slices, v.spacing()).unwrap();
            assert_eq!(back, v);
        }
        let bad = vec![
            Slice2D::new(Array2::zeros((2, 2)), 0),
            Slice2D::new(Array2::zeros((2, 3)), 1),
        ];
        assert!(stack_slices(&bad, Spacing::isotropic(1.0)).is_err());
        assert!(stack_slices(&[], Spacing::isotropic(1.0)).is_err());
    }

    #[test]
    fn patch_sampling() {
        let hr = ramp(9, 8, 8);
        let lr = hr.clone();
        assert!(sample_patch_pairs(&lr, &hr, (3, 4, 4), 0, 1)
            .unwrap()
            .is_empty());
        let a = sample_patch_pairs(&lr, &hr, (3, 4, 4), 5, 42).unwrap();
        let b = sample_patch_pairs(&lr, &hr, (3, 4, 4), 5, 42).unwrap();
        assert_eq!(a, b);
        let full = sample_patch_pairs(&lr, &hr, (9, 8, 8), 1, 7).unwrap();
        assert_eq!(&full[0].hr_patch, hr.data());
        assert_eq!(full[0].origin, (0, 0, 0));
        assert!(sample_patch_pairs(&lr, &hr, (10, 8, 8), 1, 7).is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_spacing() {
        assert!(Volume3D::new(
            Array3::from_elem((2, 1, 1), f64::NAN),
            Spacing::isotropic(1.0)
        )
        .is_err());
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = Volume3D> {
        (2usize..8, 1usize..4, 1usize..4).prop_flat_map(|(d, h, w)| {
            proptest::collection::vec(-1.0f64..1.0, d * h * w).prop_map(move |vals| {
                Volume3D::new(
                    Array3::from_shape_vec((d, h, w), vals).unwrap(),
                    Spacing::isotropic(1.0),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn degrade_inverts_upsample(v in arb_volume(), k in 1usize..6) {
            let up = trilinear_upsample(&v, k).unwrap();
            prop_assert_eq!(up.depth(), k * (v.depth() - 1) + 1);
            let back = degrade(&up, k, 0).unwrap();
            prop_assert_eq!(back.data(), v.data());
        }

        #[test]
        fn upsample_reproduces_affine_ramps(a in -2.0f64..2.0, b in -2.0f64..2.0, d in 2usize..7, k in 1usize..6) {
            let v = Volume3D::from_shape_fn((d, 2, 2), Spacing::isotropic(1.0), |(z, _, _)| a + b * z as f64).unwrap();
            let up = trilinear_upsample(&v, k).unwrap();
            for ((z, _, _), val) in up.data().indexed_iter() {
                let expect = a + b * z as f64 / k as f64;
                prop_assert!((val - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent_without_clipping(v in arb_volume()) {
            let once = normalize_intensity(&v, 100.0).unwrap();
            let twice = normalize_intensity(&once, 100.0).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
