//! Synthetic layered phantoms and on-disk dataset manifests.
//!
//! Each structure is an ellipsoid sliced along z: its in-plane radii follow the
//! ellipsoid profile and its centre drifts sinusoidally with correlation
//! length `smoothness_z`, so anatomy moves and deforms smoothly but
//! non-affinely between slices. A structure is drawn as a soft halo, a thin
//! bright shell and a mid-gray core.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::volume::{Spacing, Volume3D};

const BACKGROUND: f64 = 0.08;
const EDGE_SOFTNESS: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub size: (usize, usize, usize),
    pub num_structures: usize,
    /// Correlation length of the in-plane drift, in slices.
    pub smoothness_z: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
}

fn default_spacing() -> Spacing {
    Spacing {
        z: 1.0,
        y: 0.4,
        x: 0.4,
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: (33, 64, 64),
            num_structures: 3,
            smoothness_z: 6.0,
            noise_sd: 0.01,
            seed: 0,
            spacing: default_spacing(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.size;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "phantom size {:?} must be positive",
                self.size
            )));
        }
        if !(self.smoothness_z > 0.0) {
            return Err(Error::InvalidArgument("smoothness_z must be > 0".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidArgument("noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

struct Structure {
    zc: f64,
    rz: f64,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    drift_y: (f64, f64),
    drift_x: (f64, f64),
    shell: f64,
    halo: f64,
    core: f64,
    v_halo: f64,
    v_shell: f64,
    v_core: f64,
}

impl Structure {
    fn random(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Self {
        let (df, hf, wf) = (d as f64, h as f64, w as f64);
        let m = hf.min(wf);
        Self {
            zc: df * rng.random_range(0.3..0.7),
            rz: df * rng.random_range(0.55..0.9),
            cy: hf * rng.random_range(0.35..0.65),
            cx: wf * rng.random_range(0.35..0.65),
            ry: m * rng.random_range(0.16..0.28),
            rx: m * rng.random_range(0.16..0.28),
            drift_y: (
                m * rng.random_range(0.06..0.14),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            drift_x: (
                m * rng.random_range(0.06..0.14),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            shell: rng.random_range(1.2..2.0),
            halo: rng.random_range(0.25..0.4),
            core: 1.0,
            v_halo: rng.random_range(0.25..0.35),
            v_shell: rng.random_range(0.85..0.95),
            v_core: rng.random_range(0.45..0.6),
        }
    }
}

fn inside(signed_dist: f64) -> f64 {
    0.5 * (1.0 - (signed_dist / EDGE_SOFTNESS).tanh())
}

/// Deterministic phantom for `spec`; intensities lie in `[0, 1]`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    spec.validate()?;
    let (d, h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let structures: Vec<Structure> = (0..spec.num_structures)
        .map(|_| Structure::random(&mut rng, d, h, w))
        .collect();
    let mut data = Array3::from_elem((d, h, w), BACKGROUND);
    for z in 0..d {
        let zf = z as f64;
        for s in &structures {
            let profile = 1.0 - ((zf - s.zc) / s.rz).powi(2);
            if profile <= 0.0 {
                continue;
            }
            let scale = profile.sqrt();
            let cy = s.cy + s.drift_y.0 * (zf / spec.smoothness_z + s.drift_y.1).sin();
            let cx = s.cx + s.drift_x.0 * (zf / spec.smoothness_z + s.drift_x.1).sin();
            let (ry, rx) = (s.ry * scale, s.rx * scale);
            let reff = (ry * rx).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    // approximate signed pixel distance to the unit ellipse
                    let dist = ((dy * dy + dx * dx).sqrt() - s.core) * reff;
                    let v = &mut data[[z, y, x]];
                    let halo = inside(dist - s.halo * reff);
                    *v += (s.v_halo - *v) * halo;
                    let shell = inside(dist - s.shell);
                    *v += (s.v_shell - *v) * shell;
                    let core = inside(dist);
                    *v += (s.v_core - *v) * core;
                }
            }
        }
    }
    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).expect("finite sd");
        data.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(Volume3D::new(data, spec.spacing)?
        .with_meta("source", "phantom")
        .with_meta("seed", spec.seed.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub split_seed: u64,
    pub template: PhantomSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Mixes a dataset seed with an item index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.train_ids.iter().any(|id| m.test_ids.contains(id)) {
            return Err(Error::format(path, "train and test ids overlap"));
        }
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        Ok(m)
    }

    pub fn volume_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.json"))
    }

    pub fn load_train(&self) -> Result<Vec<(String, Volume3D)>> {
        self.load_ids(&self.train_ids)
    }

    pub fn load_test(&self) -> Result<Vec<(String, Volume3D)>> {
        self.load_ids(&self.test_ids)
    }

    fn load_ids(&self, ids: &[String]) -> Result<Vec<(String, Volume3D)>> {
        ids.iter()
            .map(|id| Ok((id.clone(), load_volume(&self.volume_path(id))?)))
            .collect()
    }
}

/// Generates `n` phantoms under `root`, splits them deterministically and
/// writes `root/manifest.json`.
pub fn build_dataset(
    n: usize,
    template: &PhantomSpec,
    train_frac: f64,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one volume".into(),
        ));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_frac} outside [0, 1]"
        )));
    }
    template.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ids: Vec<String> = (0..n).map(|i| format!("phantom_{i:03}")).collect();
    ids.par_iter().enumerate().try_for_each(|(i, id)| {
        let spec = PhantomSpec {
            seed: derive_seed(seed, i as u64),
            ..template.clone()
        };
        let vol = make_phantom(&spec)?.with_meta("id", id.as_str());
        save_volume(&vol, &root.join(format!("{id}.json")))
    })?;
    let mut order = ids.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_frac).round() as usize;
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort();
    test_ids.sort();
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        train_ids,
        test_ids,
        split_seed: seed,
        template: template.clone(),
    };
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            size: (17, 32, 32),
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = make_phantom(&small(4)).unwrap();
        let b = make_phantom(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data(), make_phantom(&small(5)).unwrap().data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_noise_free_phantom_is_constant() {
        let spec = PhantomSpec {
            num_structures: 0,
            noise_sd: 0.0,
            ..small(1)
        };
        let v = make_phantom(&spec).unwrap();
        assert!(v.data().iter().all(|x| *x == BACKGROUND));
    }

    fn mad_at_distance(v: &Volume3D, dist: usize) -> f64 {
        let d = v.depth();
        let mut acc = 0.0;
        let mut n = 0;
        for z in 0..d - dist {
            let a = v.data().index_axis(Axis(0), z);
            let b = v.data().index_axis(Axis(0), z + dist);
            acc += a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>();
            n += a.len();
        }
        acc / n as f64
    }

    #[test]
    fn z_coherence_grows_with_distance() {
        for seed in 0..4 {
            let spec = PhantomSpec {
                noise_sd: 0.0,
                smoothness_z: 1e6,
                ..small(seed)
            };
            let v = make_phantom(&spec).unwrap();
            assert!(
                mad_at_distance(&v, 1) < mad_at_distance(&v, 4),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn phantoms_vary_along_z_non_affinely() {
        let v = make_phantom(&small(2)).unwrap();
        assert!(mad_at_distance(&v, 1) > 0.0);
        let lr = crate::volume::degrade(&v, 4, 0).unwrap();
        let up = crate::volume::trilinear_upsample(&lr, 4).unwrap();
        let err: f64 = up
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(err > 0.0);
    }

    #[test]
    fn dataset_split_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            size: (5, 8, 8),
            ..PhantomSpec::default()
        };
        let m = build_dataset(10, &spec, 0.8, 3, dir.path()).unwrap();
        assert_eq!(m.train_ids.len(), 8);
        assert_eq!(m.test_ids.len(), 2);
        assert!(m.train_ids.iter().all(|id| !m.test_ids.contains(id)));

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = build_dataset(10, &spec, 0.8, 3, dir2.path()).unwrap();
        assert_eq!(m.train_ids, m2.train_ids);
        for id in m.train_ids.iter().chain(&m.test_ids) {
            let p = m.volume_path(id);
            let bytes = fs::read(&p).unwrap();
            assert_eq!(bytes, fs::read(m2.volume_path(id)).unwrap());
            // load then save reproduces the stored bytes
            let vol = load_volume(&p).unwrap();
            let again = dir.path().join("again.json");
            save_volume(&vol, &again).unwrap();
            assert_eq!(fs::read(&again).unwrap(), bytes);
            assert_eq!(
                fs::read(crate::io::raw_path(&again)).unwrap(),
                fs::read(crate::io::raw_path(&p)).unwrap()
            );
        }
        assert!(build_dataset(0, &spec, 0.8, 3, dir.path()).is_err());
    }
}
