//! Residual 3D generator that refines a trilinearly up-sampled volume.

use std::collections::BTreeMap;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slicegap_nn::{Adam, Bound, Conv, Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::interp::{vae_upsample, SliceCodec, UpsampleOptions};
use crate::volume::{degrade, trilinear_upsample, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_res_blocks: usize,
    pub channels: usize,
    pub kernel: (usize, usize, usize),
    pub residual_scaling: f64,
    pub negative_slope: f64,
    /// Start with a zero output layer, so the untrained generator is the
    /// trilinear baseline.
    pub zero_init_tail: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_res_blocks: 8,
            channels: 16,
            kernel: (3, 3, 3),
            residual_scaling: 1.0,
            negative_slope: 0.2,
            zero_init_tail: true,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.kernel;
        if self.num_res_blocks == 0 || self.channels == 0 {
            return Err(Error::Config(
                "num_res_blocks and channels must be >= 1".into(),
            ));
        }
        if [a, b, c].iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel {:?} must have odd extents",
                self.kernel
            )));
        }
        if !self.residual_scaling.is_finite() || !(0.0..1.0).contains(&self.negative_slope) {
            return Err(Error::Config(
                "residual_scaling must be finite and negative_slope in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch: (usize, usize, usize),
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Cosine-anneal the learning rate to `lr * min_lr_fraction` over
    /// `iterations`; `None` keeps it constant.
    pub cosine_min_lr_fraction: Option<f64>,
    /// Checkpoint interval in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        SrTrainConfig {
            iterations: 20_000,
            batch_size: 4,
            patch: (9, 16, 16),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            cosine_min_lr_fraction: None,
            checkpoint_every: 0,
        }
    }
}

impl SrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.patch;
        if self.iterations == 0 || self.batch_size == 0 || d == 0 || h == 0 || w == 0 {
            return Err(Error::Config(
                "iterations, batch_size and patch extents must be positive".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "lr must be positive and Adam betas in [0, 1)".into(),
            ));
        }
        if let Some(f) = self.cosine_min_lr_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "cosine_min_lr_fraction {f} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate for the step that takes the counter from `iter` to `iter + 1`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.cosine_min_lr_fraction {
            None => self.lr,
            Some(f) => {
                let t = (iter as f64 / self.iterations as f64).min(1.0);
                self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Generator {
    head: Conv,
    blocks: Vec<(Conv, Conv)>,
    tail: Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrLossRecord {
    pub iter: usize,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrState {
    pub spec: GeneratorSpec,
    pub train: SrTrainConfig,
    /// Slice-spacing ratio the generator was trained for.
    pub k: usize,
    pub seed: u64,
    pub iteration: usize,
    pub params: ParamSet,
    net: Generator,
    pub opt: Adam,
    pub history: Vec<SrLossRecord>,
    pub meta: BTreeMap<String, String>,
}

/// Network input and target on the same HR grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub input: Array3<f64>,
    pub target: Array3<f64>,
}

fn to_tensor(vols: &[Array3<f64>]) -> Tensor {
    let (d, h, w) = vols[0].dim();
    let data = vols.iter().flat_map(|v| v.iter().copied()).collect();
    Tensor::new(vec![vols.len(), 1, d, h, w], data).expect("uniform patches")
}

impl SrState {
    pub fn new(spec: GeneratorSpec, train: SrTrainConfig, k: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        train.validate()?;
        if k < 2 {
            return Err(Error::Config(format!(
                "K = {k}: super-resolution needs K >= 2"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let kern = [spec.kernel.0, spec.kernel.1, spec.kernel.2];
        let c = spec.channels;
        let head = Conv::new(&mut params, "sr.head", 1, c, &kern, false, &mut rng);
        let blocks = (0..spec.num_res_blocks)
            .map(|b| {
                let c1 = Conv::new(
                    &mut params,
                    &format!("sr.b{b}.c0"),
                    c,
                    c,
                    &kern,
                    false,
                    &mut rng,
                );
                let c2 = Conv::new(
                    &mut params,
                    &format!("sr.b{b}.c1"),
                    c,
                    c,
                    &kern,
                    false,
                    &mut rng,
                );
                (c1, c2)
            })
            .collect();
        let tail = Conv::new(&mut params, "sr.tail", c, 1, &kern, false, &mut rng);
        if spec.zero_init_tail {
            zero_tail(&mut params, &tail);
        }
        let opt = Adam::new(&params, train.lr, train.beta1, train.beta2);
        Ok(SrState {
            spec,
            train,
            k,
            seed,
            iteration: 0,
            params,
            net: Generator { head, blocks, tail },
            opt,
            history: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    /// Sets the output layer to zero, turning the generator into the identity
    /// on its (pre-up-sampled) input.
    pub fn zero_output_layer(&mut self) {
        let tail = self.net.tail;
        zero_tail(&mut self.params, &tail);
    }

    /// `x: [N, 1, D, H, W]` to `x + residual(x)`.
    pub fn generator_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let net = &self.net;
        let slope = self.spec.negative_slope;
        let mut h = net.head.forward(g, &self.params, b, x);
        h = g.leaky_relu(h, slope);
        for (c1, c2) in &net.blocks {
            let r = c1.forward(g, &self.params, b, h);
            let r = g.leaky_relu(r, slope);
            let r = c2.forward(g, &self.params, b, r);
            let r = g.scale(r, self.spec.residual_scaling);
            h = g.add(h, r);
        }
        let res = net.tail.forward(g, &self.params, b, h);
        g.add(x, res)
    }

    /// Mean absolute error of the generator on a batch of pairs.
    pub fn l1_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        inputs: &[Array3<f64>],
        targets: &[Array3<f64>],
    ) -> Var {
        let x = g.constant(to_tensor(inputs));
        let y = g.constant(to_tensor(targets));
        let out = self.generator_graph(g, b, x);
        let diff = g.sub(out, y);
        let a = g.abs(diff);
        g.mean(a)
    }

    fn sample_batch(
        &self,
        pairs: &[TrainPair],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Array3<f64>>, Vec<Array3<f64>>)> {
        let (pd, ph, pw) = self.train.patch;
        let mut xs = Vec::with_capacity(self.train.batch_size);
        let mut ys = Vec::with_capacity(self.train.batch_size);
        for _ in 0..self.train.batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (d, h, w) = p.input.dim();
            if pd > d || ph > h || pw > w {
                return Err(Error::Shape(format!(
                    "patch {:?} larger than volume {:?}",
                    self.train.patch,
                    (d, h, w)
                )));
            }
            let z = rng.random_range(0..=d - pd);
            let y = rng.random_range(0..=h - ph);
            let x = rng.random_range(0..=w - pw);
            let view = s![z..z + pd, y..y + ph, x..x + pw];
            xs.push(p.input.slice(view).to_owned());
            ys.push(p.target.slice(view).to_owned());
        }
        Ok((xs, ys))
    }

    /// One Adam step on a freshly sampled batch of patches.
    pub fn step(&mut self, pairs: &[TrainPair]) -> Result<SrLossRecord> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.iteration as u64 + 1);
        let (xs, ys) = self.sample_batch(pairs, &mut rng)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let loss = self.l1_graph(&mut g, &b, &xs, &ys);
        let l1 = g.value(loss).item();
        let record = SrLossRecord {
            iter: self.iteration + 1,
            l1,
        };
        if !l1.is_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {}: l1 = {l1}",
                record.iter
            )));
        }
        let grads = self.params.collect_grads(&b, &g.backward(loss));
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!(
                "iteration {}: non-finite gradient",
                record.iter
            )));
        }
        drop(g);
        self.opt.lr = self.train.lr_at(self.iteration);
        self.opt.step(&mut self.params, &grads);
        self.iteration += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn train_until(
        &mut self,
        pairs: &[TrainPair],
        until: Option<usize>,
        on_checkpoint: &mut dyn FnMut(&SrState) -> Result<()>,
    ) -> Result<()> {
        let end = until.unwrap_or(self.train.iterations);
        while self.iteration < end {
            let rec = self.step(pairs)?;
            if rec.iter % 100 == 0 || rec.iter == end {
                log::info!("sr iter {} l1 {:.6}", rec.iter, rec.l1);
            }
            let every = self.train.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iter", "l1"]).expect("in-memory csv");
        for r in &self.history {
            w.write_record([r.iter.to_string(), r.l1.to_string()])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    /// Runs the generator on a whole pre-up-sampled volume.
    pub fn refine(&self, upsampled: &Array3<f64>) -> Array3<f64> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(to_tensor(std::slice::from_ref(upsampled)));
        let y = self.generator_graph(&mut g, &b, x);
        Array3::from_shape_vec(upsampled.dim(), g.value(y).data().to_vec()).expect("same grid")
    }
}

fn zero_tail(params: &mut ParamSet, tail: &Conv) {
    for id in [tail.weight, tail.bias] {
        let t = params.get_mut(id);
        *t = Tensor::zeros(t.shape());
    }
}

/// Estimates the HR volume: trilinear up-sampling followed by the learned
/// residual. The generator only accepts the ratio it was trained for.
pub fn sr_infer(state: &SrState, lr: &Volume3D, k: usize) -> Result<Volume3D> {
    if k != state.k {
        return Err(Error::InvalidArgument(format!(
            "generator trained for K = {}, asked for K = {k}",
            state.k
        )));
    }
    let up = trilinear_upsample(lr, k)?;
    let out = state.refine(up.data());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator output".into()));
    }
    let mut vol = Volume3D::new(out, up.spacing())?;
    *vol.meta_mut() = lr.meta().clone();
    Ok(vol
        .with_meta("method", "sr")
        .with_meta("upsample_k", k.to_string()))
}

/// `(trilinear(T X), X)` for each HR volume.
pub fn pairs_from_hr(hr: &[Volume3D], k: usize) -> Result<Vec<TrainPair>> {
    hr.iter()
        .map(|x| {
            let lr = degrade(x, k, 0)?;
            let input = trilinear_upsample(&lr, k)?;
            if input.dims() != x.dims() {
                return Err(Error::InvalidArgument(format!(
                    "depth {} - 1 not divisible by K = {k}",
                    x.depth()
                )));
            }
            Ok(TrainPair {
                input: input.into_data(),
                target: x.data().clone(),
            })
        })
        .collect()
}

/// Synthesizes HR volumes from LR ones by latent interpolation, then builds
/// `(trilinear(T X'), X')` pairs; no real HR data is involved.
pub fn pairs_from_lr(
    codec: &dyn SliceCodec,
    lr: &[Volume3D],
    k: usize,
    opts: UpsampleOptions,
) -> Result<Vec<TrainPair>> {
    let synth = lr
        .iter()
        .map(|y| vae_upsample(codec, y, k, opts))
        .collect::<Result<Vec<_>>>()?;
    pairs_from_hr(&synth, k)
}

/// Trains a generator on VAE-synthesized pairs.
pub fn train_sr(
    codec: &dyn SliceCodec,
    lr_volumes: &[Volume3D],
    k: usize,
    spec: &GeneratorSpec,
    train: &SrTrainConfig,
    seed: u64,
) -> Result<SrState> {
    if lr_volumes.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let pairs = pairs_from_lr(codec, lr_volumes, k, UpsampleOptions::default())?;
    let mut state = SrState::new(spec.clone(), train.clone(), k, seed)?;
    state.train_until(&pairs, None, &mut |_| Ok(()))?;
    Ok(state)
}

/// Trains a generator on pairs built from ground-truth HR volumes.
pub fn train_sr_supervised(
    hr_volumes: &[Volume3D],
    k: usize,
    spec: &GeneratorSpec,
    train: &SrTrainConfig,
    seed: u64,
) -> Result<SrState> {
    if hr_volumes.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let pairs = pairs_from_hr(hr_volumes, k)?;
    let mut state = SrState::new(spec.clone(), train.clone(), k, seed)?;
    state.train_until(&pairs, None, &mut |_| Ok(()))?;
    Ok(state)
}
