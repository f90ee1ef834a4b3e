//! Up-sampling along z by interpolating latent means of neighboring slices,
//! and latent-space distance diagnostics.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::VaeState;
use crate::volume::{upsampled_depth, Volume3D};

/// Anything that maps slices to latent means and latents back to slices.
pub trait SliceCodec: Sync {
    fn image_size(&self) -> (usize, usize);
    fn encode_mu(&self, slices: &[ArrayView2<f64>]) -> Result<Vec<Vec<f64>>>;
    fn decode(&self, zs: &[Vec<f64>]) -> Result<Vec<Array2<f64>>>;
}

impl SliceCodec for VaeState {
    fn image_size(&self) -> (usize, usize) {
        self.arch.image_size
    }

    fn encode_mu(&self, slices: &[ArrayView2<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .encode_batch(slices)?
            .into_iter()
            .map(|c| c.mu)
            .collect())
    }

    fn decode(&self, zs: &[Vec<f64>]) -> Result<Vec<Array2<f64>>> {
        self.decode_batch(zs)
    }
}

/// Flattens a slice into its latent and reshapes it back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityCodec {
    pub height: usize,
    pub width: usize,
}

impl SliceCodec for IdentityCodec {
    fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn encode_mu(&self, slices: &[ArrayView2<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(slices.iter().map(|s| s.iter().copied().collect()).collect())
    }

    fn decode(&self, zs: &[Vec<f64>]) -> Result<Vec<Array2<f64>>> {
        zs.iter()
            .map(|z| {
                Array2::from_shape_vec((self.height, self.width), z.clone())
                    .map_err(|e| Error::Shape(format!("latent of length {}: {e}", z.len())))
            })
            .collect()
    }
}

/// Interpolation positions `1/K, ..., (K-1)/K` between two observed slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpGrid {
    pub k: usize,
    pub xis: Vec<f64>,
}

impl InterpGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        Ok(InterpGrid {
            k,
            xis: (1..k).map(|j| j as f64 / k as f64).collect(),
        })
    }
}

/// `(1 - xi) * mu_n + xi * mu_np1`.
pub fn interpolate_codes(mu_n: &[f64], mu_np1: &[f64], xi: f64) -> Result<Vec<f64>> {
    if mu_n.len() != mu_np1.len() {
        return Err(Error::Shape(format!(
            "latent lengths {} and {}",
            mu_n.len(),
            mu_np1.len()
        )));
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::InvalidArgument(format!("xi = {xi} outside [0, 1]")));
    }
    Ok(mu_n
        .iter()
        .zip(mu_np1)
        .map(|(a, b)| (1.0 - xi) * a + xi * b)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpsampleOptions {
    /// Keep observed slices verbatim instead of using their reconstructions.
    pub copy_observed: bool,
}

fn check_slices(codec: &dyn SliceCodec, vol: &Volume3D) -> Result<()> {
    let (_, h, w) = vol.dims();
    if (h, w) != codec.image_size() {
        return Err(Error::Shape(format!(
            "slices {h}x{w}, model expects {:?}",
            codec.image_size()
        )));
    }
    Ok(())
}

fn encode_volume(codec: &dyn SliceCodec, vol: &Volume3D) -> Result<Vec<Vec<f64>>> {
    let views: Vec<ArrayView2<f64>> = vol.data().axis_iter(Axis(0)).collect();
    codec.encode_mu(&views)
}

/// Output slice `K n` decodes `mu_n`; slice `K n + j` decodes the latent
/// interpolated at `j / K` between `mu_n` and `mu_{n+1}`.
pub fn vae_upsample(
    codec: &dyn SliceCodec,
    lr: &Volume3D,
    k: usize,
    opts: UpsampleOptions,
) -> Result<Volume3D> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let (d, h, w) = lr.dims();
    if d < 2 {
        return Err(Error::Shape(format!(
            "up-sampling needs depth >= 2, got {d}"
        )));
    }
    check_slices(codec, lr)?;
    let mus = encode_volume(codec, lr)?;
    let depth = upsampled_depth(d, k);
    let latents = (0..depth)
        .map(|z| {
            let (n, j) = (z / k, z % k);
            if j == 0 {
                Ok(mus[n].clone())
            } else {
                interpolate_codes(&mus[n], &mus[n + 1], j as f64 / k as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let decoded = codec.decode(&latents)?;
    let mut data = Array3::zeros((depth, h, w));
    for (z, img) in decoded.iter().enumerate() {
        if opts.copy_observed && z % k == 0 {
            data.index_axis_mut(Axis(0), z)
                .assign(&lr.data().index_axis(Axis(0), z / k));
        } else {
            data.index_axis_mut(Axis(0), z).assign(img);
        }
    }
    let spacing = lr.spacing().with_z(lr.spacing().z / k as f64);
    let mut out = Volume3D::new(data, spacing)?;
    *out.meta_mut() = lr.meta().clone();
    Ok(out
        .with_meta("method", "vae_upsample")
        .with_meta("upsample_k", k.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// Interpolated vs encoded ground truth, `xi != 1/2`.
    D1,
    /// Interpolated vs encoded ground truth, `xi = 1/2`.
    D2,
    /// Between encodings of neighboring ground-truth in-between slices.
    D3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub gap_index: usize,
    /// Position within the gap; for `D3` the midpoint of the two slices.
    pub xi: f64,
    pub kind: DistanceKind,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentDistances {
    pub rows: Vec<DistanceRow>,
}

impl LatentDistances {
    pub fn values(&self, kind: DistanceKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.value)
            .collect()
    }

    pub fn d1(&self) -> Vec<f64> {
        self.values(DistanceKind::D1)
    }

    pub fn d2(&self) -> Vec<f64> {
        self.values(DistanceKind::D2)
    }

    pub fn d3(&self) -> Vec<f64> {
        self.values(DistanceKind::D3)
    }

    pub fn extend(&mut self, other: LatentDistances) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["gap_index", "xi", "kind", "value"])
            .expect("in-memory csv");
        for r in &self.rows {
            let kind = match r.kind {
                DistanceKind::D1 => "d1",
                DistanceKind::D2 => "d2",
                DistanceKind::D3 => "d3",
            };
            w.write_record([
                r.gap_index.to_string(),
                r.xi.to_string(),
                kind.to_string(),
                r.value.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }
}

/// Rows per gap: `K - 1` interpolation distances and `K - 2` neighbor distances.
pub fn rows_per_gap(k: usize) -> usize {
    (k - 1) + k.saturating_sub(2)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Latent distances for an HR volume viewed as observed slices every `K`
/// with ground truth in between.
pub fn latent_distances(
    codec: &dyn SliceCodec,
    hr: &Volume3D,
    k: usize,
) -> Result<LatentDistances> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "K = {k}: need K >= 2 for in-between slices"
        )));
    }
    let d = hr.depth();
    if d < 2 || !(d - 1).is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "depth {d} - 1 not divisible by K = {k}"
        )));
    }
    check_slices(codec, hr)?;
    let mus = encode_volume(codec, hr)?;
    let mut out = LatentDistances::default();
    for gap in 0..(d - 1) / k {
        let (a, b) = (&mus[gap * k], &mus[(gap + 1) * k]);
        for j in 1..k {
            let xi = j as f64 / k as f64;
            let z_hat = interpolate_codes(a, b, xi)?;
            let kind = if 2 * j == k {
                DistanceKind::D2
            } else {
                DistanceKind::D1
            };
            out.rows.push(DistanceRow {
                gap_index: gap,
                xi,
                kind,
                value: euclid(&z_hat, &mus[gap * k + j]),
            });
        }
        for j in 1..k - 1 {
            let (p, q) = (&mus[gap * k + j], &mus[gap * k + j + 1]);
            let xi = (j as f64 + 0.5) / k as f64;
            out.rows.push(DistanceRow {
                gap_index: gap,
                xi,
                kind: DistanceKind::D3,
                value: euclid(p, q),
            });
        }
    }
    Ok(out)
}

/// Slices of a volume through a fixed `y` row (a coronal-style view).
pub fn coronal(vol: &Volume3D, y: usize) -> Array2<f64> {
    vol.data().slice(s![.., y, ..]).to_owned()
}
