//! Paired VAE runs differing only in one loss weight.

use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use slicegap_core::interp::{
    coronal, latent_distances, vae_upsample, DistanceKind, LatentDistances,
};
use slicegap_core::io::{write_panel_png, Tile};
use slicegap_core::metrics::{paired_t_test, TTest};
use slicegap_core::synth::DatasetManifest;
use slicegap_core::vae::{TrainPhase, VaeState};
use slicegap_core::volume::{degrade, trilinear_upsample};
use slicegap_core::Volume3D;
use statrs::statistics::{Data, Median};

use crate::commands::train_vae_on;
use crate::config::RunConfig;
use crate::{write_file, write_json, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    /// Control run has `beta = 0`.
    Adv,
    /// Control run has `eta = 0`.
    Comp,
}

impl Which {
    fn name(self) -> &'static str {
        match self {
            Which::Adv => "adv",
            Which::Comp => "comp",
        }
    }
}

/// The phase schedule with the ablated weight zeroed everywhere.
pub fn control_phases(phases: &[TrainPhase], which: Which) -> Vec<TrainPhase> {
    phases
        .iter()
        .map(|p| {
            let mut p = *p;
            match which {
                Which::Adv => p.weights.beta = 0.0,
                Which::Comp => p.weights.eta = 0.0,
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: DistanceKind,
    pub n: usize,
    pub median_treatment: f64,
    pub median_control: f64,
    /// Treatment minus control; absent when the test is undefined.
    pub t_test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub kinds: Vec<KindSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub which: Which,
    pub config_hash: String,
    pub seeds: Vec<SeedSummary>,
    /// All seeds pooled.
    pub pooled: Vec<KindSummary>,
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    Data::new(xs.to_vec()).median()
}

fn summarize(t: &LatentDistances, c: &LatentDistances) -> Vec<KindSummary> {
    [DistanceKind::D1, DistanceKind::D2, DistanceKind::D3]
        .into_iter()
        .map(|kind| {
            let (xt, xc) = (t.values(kind), c.values(kind));
            let t_test = match paired_t_test(&xt, &xc) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("{kind:?}: no t-test ({e})");
                    None
                }
            };
            KindSummary {
                kind,
                n: xt.len(),
                median_treatment: median(&xt),
                median_control: median(&xc),
                t_test,
            }
        })
        .collect()
}

/// Distances over every test volume, with gap indices running across volumes.
fn test_distances(
    vae: &VaeState,
    test: &[(String, Volume3D)],
    k: usize,
) -> CliResult<LatentDistances> {
    let mut all = LatentDistances::default();
    let mut offset = 0;
    for (_, hr) in test {
        let mut d = latent_distances(vae, hr, k)?;
        for r in &mut d.rows {
            r.gap_index += offset;
        }
        offset += (hr.depth() - 1) / k;
        all.extend(d);
    }
    Ok(all)
}

fn recon_panel(hr: &Volume3D, arms: &[&VaeState], k: usize, path: &Path) -> CliResult<()> {
    let lr = degrade(hr, k, 0)?;
    let picks: Vec<usize> = (0..lr.depth())
        .step_by((lr.depth() / 5).max(1))
        .take(5)
        .collect();
    let mut images: Vec<Vec<Array2<f64>>> = vec![picks.iter().map(|&z| lr.slice(z).data).collect()];
    for vae in arms {
        let row = picks
            .iter()
            .map(|&z| Ok(vae.reconstruct(&lr.slice(z))?.data))
            .collect::<CliResult<Vec<_>>>()?;
        images.push(row);
    }
    let rows: Vec<Vec<Tile<'_>>> = images
        .iter()
        .map(|r| {
            r.iter()
                .map(|image| Tile {
                    image,
                    marked: false,
                })
                .collect()
        })
        .collect();
    Ok(write_panel_png(&rows, path)?)
}

fn coronal_panel(
    hr: &Volume3D,
    arms: &[&VaeState],
    k: usize,
    up: slicegap_core::interp::UpsampleOptions,
    path: &Path,
) -> CliResult<()> {
    let y = hr.dims().1 / 2;
    let lr = degrade(hr, k, 0)?;
    let mut images = vec![coronal(hr, y), coronal(&trilinear_upsample(&lr, k)?, y)];
    for vae in arms {
        images.push(coronal(&vae_upsample(*vae, &lr, k, up)?, y));
    }
    let rows: Vec<Vec<Tile<'_>>> = images
        .iter()
        .map(|image| {
            vec![Tile {
                image,
                marked: false,
            }]
        })
        .collect();
    Ok(write_panel_png(&rows, path)?)
}

fn format_summary(s: &AblationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "ablation: {} (treatment keeps the term, control drops it)",
        s.which.name()
    );
    let _ = writeln!(
        out,
        "{:<6} {:>6} {:>12} {:>12} {:>10} {:>10}",
        "kind", "n", "med(treat)", "med(ctrl)", "t", "p"
    );
    for k in &s.pooled {
        let (t, p) = k.t_test.map_or((f64::NAN, f64::NAN), |r| (r.t, r.p));
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>12.5} {:>12.5} {:>10.4} {:>10.3e}",
            format!("{:?}", k.kind).to_lowercase(),
            k.n,
            k.median_treatment,
            k.median_control,
            t,
            p
        );
    }
    out
}

/// Trains treatment and control VAEs for `seeds` consecutive seeds starting
/// at the configured one, then writes panels, distance CSVs and a summary
/// under `OUT/ablate_<which>/`.
pub fn ablate(cfg: &RunConfig, which: Which, seeds: usize) -> CliResult<AblationSummary> {
    if seeds == 0 {
        return Err(crate::CliError::Config("--seeds must be at least 1".into()));
    }
    let manifest = DatasetManifest::load(cfg.dataset()?)?;
    let train_lr = manifest
        .load_train()?
        .iter()
        .map(|(_, v)| degrade(v, cfg.k, 0))
        .collect::<Result<Vec<_>, _>>()?;
    let test = manifest.load_test()?;
    let root = cfg.out.join(format!("ablate_{}", which.name()));
    cfg.echo_to(&root)?;

    let (mut pooled_t, mut pooled_c) = (LatentDistances::default(), LatentDistances::default());
    let mut per_seed = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let seed = cfg.seed + s;
        let treat_cfg = RunConfig {
            seed,
            ..cfg.clone()
        };
        let mut ctrl_cfg = treat_cfg.clone();
        ctrl_cfg.vae.train.phases = control_phases(&cfg.vae.train.phases, which);
        let dir = root.join(format!("seed_{seed}"));
        let treat = train_vae_on(&treat_cfg, &train_lr, None, &dir.join("treatment"))?;
        let ctrl = train_vae_on(&ctrl_cfg, &train_lr, None, &dir.join("control"))?;

        let dt = test_distances(&treat, &test, cfg.k)?;
        let dc = test_distances(&ctrl, &test, cfg.k)?;
        write_file(
            &dir.join("treatment").join("distances.csv"),
            dt.to_csv().as_bytes(),
        )?;
        write_file(
            &dir.join("control").join("distances.csv"),
            dc.to_csv().as_bytes(),
        )?;
        if let Some((_, hr)) = test.first() {
            recon_panel(hr, &[&treat, &ctrl], cfg.k, &dir.join("recon.png"))?;
            coronal_panel(
                hr,
                &[&treat, &ctrl],
                cfg.k,
                cfg.vae.upsample,
                &dir.join("coronal.png"),
            )?;
        }
        per_seed.push(SeedSummary {
            seed,
            kinds: summarize(&dt, &dc),
        });
        pooled_t.extend(dt);
        pooled_c.extend(dc);
    }
    let summary = AblationSummary {
        which,
        config_hash: cfg.hash(),
        pooled: summarize(&pooled_t, &pooled_c),
        seeds: per_seed,
    };
    write_json(&root.join("summary.json"), &summary)?;
    let text = format_summary(&summary);
    write_file(&root.join("summary.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(summary)
}
