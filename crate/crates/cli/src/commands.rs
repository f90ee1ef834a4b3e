use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use slicegap_core::interp::{vae_upsample, UpsampleOptions};
use slicegap_core::io::{load_volume, save_volume, write_panel_png, Tile};
use slicegap_core::metrics::{
    error_map, evaluate_protocol, format_table, EvalOptions, EvalRegion, EvalReport, MsSsimConfig,
};
use slicegap_core::sr::{pairs_from_hr, pairs_from_lr, sr_infer, SrState};
use slicegap_core::synth::{build_dataset, DatasetManifest, PhantomSpec, MANIFEST_FILE};
use slicegap_core::vae::{SliceDataset, VaeState};
use slicegap_core::volume::{degrade, trilinear_upsample};
use slicegap_core::{Error, Volume3D};

use crate::config::RunConfig;
use crate::{read_json, write_file, write_json, CliError, CliResult};

pub const VAE_CKPT: &str = "vae.ckpt.json";
pub const SR_CKPT: &str = "sr.ckpt.json";
pub const NAN_SNAPSHOT: &str = "nan_snapshot.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn parse_size(size: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<usize> = size
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("size `{size}`: {e}")))?;
    match parts[..] {
        [d, h, w] => Ok((d, h, w)),
        _ => Err(CliError::Config(format!("size `{size}` is not DxHxW"))),
    }
}

pub fn phantom_gen(
    n: usize,
    size: &str,
    seed: u64,
    out: &Path,
    train_frac: f64,
    noise_sd: Option<f64>,
) -> CliResult<DatasetManifest> {
    let mut template = PhantomSpec {
        size: parse_size(size)?,
        ..Default::default()
    };
    if let Some(sd) = noise_sd {
        template.noise_sd = sd;
    }
    let m = build_dataset(n, &template, train_frac, seed, out)?;
    log::info!(
        "wrote {} train + {} test phantoms to {}",
        m.train_ids.len(),
        m.test_ids.len(),
        out.display()
    );
    Ok(m)
}

/// HR training volumes from the configured manifest.
fn train_hr(cfg: &RunConfig) -> CliResult<Vec<Volume3D>> {
    let m = DatasetManifest::load(cfg.dataset()?)?;
    Ok(m.load_train()?.into_iter().map(|(_, v)| v).collect())
}

fn degrade_all(vols: &[Volume3D], k: usize) -> CliResult<Vec<Volume3D>> {
    Ok(vols
        .iter()
        .map(|v| degrade(v, k, 0))
        .collect::<Result<Vec<_>, _>>()?)
}

fn ckpt_hook<T: Serialize>(
    dir: &Path,
    iteration: impl Fn(&T) -> usize,
) -> impl FnMut(&T) -> slicegap_core::Result<()> {
    let dir = dir.to_path_buf();
    move |s: &T| {
        let path = dir.join(format!("ckpt_{:07}.json", iteration(s)));
        write_json(&path, s).map_err(|e| Error::Io {
            path,
            source: std::io::Error::other(e.to_string()),
        })
    }
}

/// Turns a NaN abort into a snapshot on disk and the numerical exit code.
fn finish_training<T: Serialize>(
    dir: &Path,
    state: &T,
    outcome: slicegap_core::Result<()>,
) -> CliResult<()> {
    match outcome {
        Ok(()) => Ok(()),
        Err(e @ Error::NonFinite(_)) => {
            write_json(&dir.join(NAN_SNAPSHOT), state)?;
            log::error!(
                "{e}; snapshot written to {}",
                dir.join(NAN_SNAPSHOT).display()
            );
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn stamp(meta: &mut BTreeMap<String, String>, cfg: &RunConfig) {
    meta.insert("config_hash".into(), cfg.hash());
    meta.insert("seed".into(), cfg.seed.to_string());
}

/// Trains the slice VAE on LR slices and writes `OUT/vae/`.
pub fn train_vae(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<VaeState> {
    let lr = degrade_all(&train_hr(cfg)?, cfg.k)?;
    train_vae_on(cfg, &lr, resume, &cfg.out.join("vae"))
}

pub fn train_vae_on(
    cfg: &RunConfig,
    lr: &[Volume3D],
    resume: Option<&Path>,
    dir: &Path,
) -> CliResult<VaeState> {
    let data = SliceDataset::new(lr, cfg.vae.arch.image_size)?;
    let mut state = match resume {
        Some(p) => {
            let s: VaeState = read_json(p)?;
            if s.arch != cfg.vae.arch || s.train != cfg.vae.train || s.seed != cfg.seed {
                log::warn!("resuming with the configuration stored in {}", p.display());
            }
            s
        }
        None => VaeState::new(cfg.vae.arch.clone(), cfg.vae.train.clone(), cfg.seed)?,
    };
    stamp(&mut state.meta, cfg);
    cfg.echo_to(dir)?;
    let outcome = state.train_until(&data, None, &mut ckpt_hook(dir, |s: &VaeState| s.iteration));
    write_file(&dir.join(LOSS_CSV), state.loss_csv().as_bytes())?;
    finish_training(dir, &state, outcome)?;
    write_json(&dir.join(VAE_CKPT), &state)?;
    Ok(state)
}

/// Input/output pairs for a file or a directory of SGV headers.
fn io_pairs(input: &Path, out: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    if !input.is_dir() {
        return Ok(vec![(input.to_path_buf(), out.to_path_buf())]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
        })
        .collect();
    names.sort();
    Ok(names
        .into_iter()
        .map(|p| {
            let o = out.join(p.file_name().expect("file"));
            (p, o)
        })
        .collect())
}

pub fn upsample_vae(ckpt: &Path, input: &Path, k: usize, out: &Path) -> CliResult<()> {
    let vae: VaeState = read_json(ckpt)?;
    for (src, dst) in io_pairs(input, out)? {
        let mut up = vae_upsample(&vae, &load_volume(&src)?, k, UpsampleOptions::default())?;
        up.meta_mut().extend(vae.meta.clone());
        save_volume(&up, &dst)?;
    }
    Ok(())
}

/// Trains the generator; VAE-synthesized pairs when `vae_ckpt` is given,
/// ground-truth pairs otherwise. Writes `OUT/sr/` or `OUT/sr_supervised/`.
pub fn train_sr(cfg: &RunConfig, vae_ckpt: Option<&Path>) -> CliResult<SrState> {
    let hr = train_hr(cfg)?;
    let (pairs, dir, mode) = match vae_ckpt {
        Some(p) => {
            let vae: VaeState = read_json(p)?;
            let lr = degrade_all(&hr, cfg.k)?;
            (
                pairs_from_lr(&vae, &lr, cfg.k, cfg.vae.upsample)?,
                cfg.out.join("sr"),
                "vae_synthesized",
            )
        }
        None => (
            pairs_from_hr(&hr, cfg.k)?,
            cfg.out.join("sr_supervised"),
            "supervised",
        ),
    };
    let mut state = SrState::new(
        cfg.sr.generator.clone(),
        cfg.sr.train.clone(),
        cfg.k,
        cfg.seed,
    )?;
    stamp(&mut state.meta, cfg);
    state.meta.insert("mode".into(), mode.into());
    cfg.echo_to(&dir)?;
    let outcome = state.train_until(
        &pairs,
        None,
        &mut ckpt_hook(&dir, |s: &SrState| s.iteration),
    );
    write_file(&dir.join(LOSS_CSV), state.loss_csv().as_bytes())?;
    finish_training(&dir, &state, outcome)?;
    write_json(&dir.join(SR_CKPT), &state)?;
    Ok(state)
}

pub fn super_resolve(ckpt: &Path, input: &Path, out: &Path, k: Option<usize>) -> CliResult<()> {
    let state: SrState = read_json(ckpt)?;
    let k = k.unwrap_or(state.k);
    for (src, dst) in io_pairs(input, out)? {
        let mut hr = sr_infer(&state, &load_volume(&src)?, k)?;
        hr.meta_mut().extend(state.meta.clone());
        save_volume(&hr, &dst)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub methods: Vec<String>,
    pub test_manifest: PathBuf,
    pub k: usize,
    pub out: PathBuf,
    pub vae_ckpt: Option<PathBuf>,
    pub sr_ckpt: Option<PathBuf>,
    pub supervised_ckpt: Option<PathBuf>,
    pub save_predictions: bool,
}

enum Method {
    Trilinear,
    Vae(VaeState, UpsampleOptions),
    Sr(SrState),
    Truth,
    Loaded(PathBuf),
}

fn need(path: &Option<PathBuf>, flag: &str, method: &str) -> CliResult<PathBuf> {
    path.clone()
        .ok_or_else(|| CliError::Config(format!("method `{method}` needs {flag}")))
}

fn parse_method(spec: &str, req: &EvalRequest, cfg: &RunConfig) -> CliResult<(String, Method)> {
    if let Some((name, dir)) = spec.split_once('=') {
        return Ok((name.to_string(), Method::Loaded(PathBuf::from(dir))));
    }
    let m = match spec {
        "trilinear" => Method::Trilinear,
        "truth" => Method::Truth,
        "vae" => Method::Vae(
            read_json(&need(&req.vae_ckpt, "--vae-ckpt", spec)?)?,
            cfg.vae.upsample,
        ),
        "proposed" => Method::Sr(read_json(&need(&req.sr_ckpt, "--sr-ckpt", spec)?)?),
        "supervised" => Method::Sr(read_json(&need(
            &req.supervised_ckpt,
            "--supervised-ckpt",
            spec,
        )?)?),
        other => return Err(CliError::Config(format!("unknown method `{other}`"))),
    };
    Ok((spec.to_string(), m))
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        region: cfg.eval.region,
        ssim: MsSsimConfig {
            max_val: cfg.eval.max_val,
            levels: cfg.eval.ssim_levels,
            ..Default::default()
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub seed: u64,
    pub k: usize,
    pub region: EvalRegion,
    pub reports: Vec<EvalReport>,
}

/// Scores every method, in the given order, and writes the report plus one
/// error-map panel per test volume.
pub fn evaluate(req: &EvalRequest, cfg: &RunConfig) -> CliResult<EvalSummary> {
    let manifest = DatasetManifest::load(&req.test_manifest)?;
    let test = manifest.load_test()?;
    if test.is_empty() {
        return Err(CliError::Config("test split is empty".into()));
    }
    let gt: BTreeMap<&str, &Volume3D> = test.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let methods = req
        .methods
        .iter()
        .map(|m| parse_method(m, req, cfg))
        .collect::<CliResult<Vec<_>>>()?;
    let opts = eval_options(cfg);
    let preds: Mutex<BTreeMap<(usize, String), Volume3D>> = Mutex::new(BTreeMap::new());
    let mut reports = Vec::with_capacity(methods.len());
    for (mi, (name, method)) in methods.iter().enumerate() {
        let predict = |id: &str, lr: &Volume3D| -> slicegap_core::Result<Volume3D> {
            let pred = match method {
                Method::Trilinear => trilinear_upsample(lr, req.k)?,
                Method::Vae(vae, up) => vae_upsample(vae, lr, req.k, *up)?,
                Method::Sr(sr) => sr_infer(sr, lr, req.k)?,
                Method::Truth => gt[id].clone(),
                Method::Loaded(dir) => load_volume(&dir.join(format!("{id}.json")))?,
            };
            let pred = to_storage_precision(&pred)?;
            if req.save_predictions {
                save_volume(
                    &pred,
                    &req.out
                        .join("predictions")
                        .join(name)
                        .join(format!("{id}.json")),
                )?;
            }
            preds
                .lock()
                .expect("no poisoning")
                .insert((mi, id.to_string()), pred.clone());
            Ok(pred)
        };
        let report = evaluate_protocol(name, &test, predict, req.k, &opts)?;
        log::info!(
            "{name}: PSNR {:.3} SSIM {:.4}",
            report.psnr_mean,
            report.ssim_mean
        );
        reports.push(report);
    }
    let preds = preds.into_inner().expect("no poisoning");
    for (id, hr) in &test {
        let row: Vec<(&str, &Volume3D)> = methods
            .iter()
            .enumerate()
            .map(|(mi, (n, _))| (n.as_str(), &preds[&(mi, id.clone())]))
            .collect();
        error_panel(
            hr,
            &row,
            req.k,
            &req.out.join("panels").join(format!("{id}.png")),
        )?;
    }
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        k: req.k,
        region: opts.region,
        reports,
    };
    write_json(&req.out.join(REPORT_JSON), &summary)?;
    let rows: Vec<(String, &EvalReport)> = summary
        .reports
        .iter()
        .map(|r| (r.method.clone(), r))
        .collect();
    let table = format_table(&rows);
    write_file(&req.out.join(REPORT_TXT), table.as_bytes())?;
    print!("{table}");
    Ok(summary)
}

/// Rounds through f32, the SGV payload type, so that scoring a fresh
/// prediction and scoring its saved copy give the same numbers.
fn to_storage_precision(v: &Volume3D) -> slicegap_core::Result<Volume3D> {
    let mut out = Volume3D::new(v.data().mapv(|x| x as f32 as f64), v.spacing())?;
    *out.meta_mut() = v.meta().clone();
    Ok(out)
}

const ERROR_GAIN: f64 = 4.0;

/// Slices of the middle gap (both bounding observed slices included, and
/// framed): ground truth on top, then a prediction row and an amplified
/// error row per method.
pub fn error_panel(
    hr: &Volume3D,
    preds: &[(&str, &Volume3D)],
    k: usize,
    path: &Path,
) -> CliResult<()> {
    let gaps = (hr.depth() - 1) / k;
    let z0 = k * (gaps / 2);
    let zs: Vec<usize> = (z0..=z0 + k).collect();
    let planes = |v: &Volume3D| -> Vec<Array2<f64>> {
        zs.iter()
            .map(|&z| v.data().slice(s![z, .., ..]).to_owned())
            .collect()
    };
    let mut images: Vec<Vec<Array2<f64>>> = vec![planes(hr)];
    for (_, p) in preds {
        images.push(planes(p));
        let err = error_map(hr, p)?;
        images.push(
            planes(&err)
                .into_iter()
                .map(|e| e.mapv(|v| (v * ERROR_GAIN).min(1.0)))
                .collect(),
        );
    }
    let rows: Vec<Vec<Tile<'_>>> = images
        .iter()
        .map(|row| {
            row.iter()
                .zip(&zs)
                .map(|(image, z)| Tile {
                    image,
                    marked: z % k == 0,
                })
                .collect()
        })
        .collect();
    Ok(write_panel_png(&rows, path)?)
}
