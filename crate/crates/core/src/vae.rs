//! Slice VAE-GAN: encoder, decoder, critic, loss terms and the phased
//! adversarial training loop.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use slicegap_nn::{Adam, Bound, Conv, Graph, Linear, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::{Slice2D, Volume3D};

/// Diagonal Gaussian `q(z|x)` given by its mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentCode {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "mu {} vs log_var {}",
                mu.len(),
                log_var.len()
            )));
        }
        if !mu.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(LatentCode { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl LossWeights {
    pub const fn new(alpha: f64, beta: f64, gamma: f64, eta: f64) -> Self {
        LossWeights {
            alpha,
            beta,
            gamma,
            eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.eta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPhase {
    pub iterations: usize,
    pub weights: LossWeights,
}

/// The warm-up / adversarial / compactness schedule at full length.
pub fn default_phases() -> Vec<TrainPhase> {
    vec![
        TrainPhase {
            iterations: 100_000,
            weights: LossWeights::new(10_000.0, 0.0, 1.0, 0.0),
        },
        TrainPhase {
            iterations: 800_000,
            weights: LossWeights::new(100.0, 1.0, 0.05, 0.0),
        },
        TrainPhase {
            iterations: 1_200_000,
            weights: LossWeights::new(100.0, 1.0, 0.05, 0.02),
        },
    ]
}

/// Same weights with every phase shortened by `factor` (at least 1 iteration).
pub fn scaled_phases(phases: &[TrainPhase], factor: f64) -> Vec<TrainPhase> {
    phases
        .iter()
        .map(|p| TrainPhase {
            iterations: ((p.iterations as f64 * factor).round() as usize).max(1),
            weights: p.weights,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeArchSpec {
    pub latent_dim: usize,
    pub image_size: (usize, usize),
    pub base_channels: usize,
    pub num_blocks: usize,
    pub negative_slope: f64,
    /// Activation-normalization-convolution repeats per encoder/decoder block.
    pub convs_per_block: usize,
    /// Channel cap for the doubling schedule.
    pub max_channels: usize,
}

impl Default for VaeArchSpec {
    fn default() -> Self {
        VaeArchSpec {
            latent_dim: 32,
            image_size: (32, 32),
            base_channels: 8,
            num_blocks: 3,
            negative_slope: 0.2,
            convs_per_block: 1,
            max_channels: 32,
        }
    }
}

impl VaeArchSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let div = 1usize << self.num_blocks;
        if self.latent_dim == 0
            || self.base_channels == 0
            || self.convs_per_block == 0
            || self.max_channels == 0
        {
            return Err(Error::Config(
                "latent_dim, base_channels, convs_per_block and max_channels must be positive"
                    .into(),
            ));
        }
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by 2^{}",
                self.num_blocks
            )));
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope < 1.0) {
            return Err(Error::Config(format!(
                "negative_slope {} outside [0, 1)",
                self.negative_slope
            )));
        }
        Ok(())
    }

    fn channels(&self, block: usize) -> usize {
        (self.base_channels << block.min(20)).min(self.max_channels)
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let d = 1usize << self.num_blocks;
        (
            self.channels(self.num_blocks.saturating_sub(1)),
            self.image_size.0 / d,
            self.image_size.1 / d,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterLoss {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub phases: Vec<TrainPhase>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub center_loss: CenterLoss,
    /// Checkpoint interval in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            phases: scaled_phases(&default_phases(), 1e-3),
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            center_loss: CenterLoss::L1,
            checkpoint_every: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config(
                "at least one training phase is required".into(),
            ));
        }
        for p in &self.phases {
            if p.iterations == 0 {
                return Err(Error::Config("phase iterations must be positive".into()));
            }
            p.weights.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "lr must be positive and Adam betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Zero-based phase index and its weights at a zero-based iteration.
    pub fn phase_at(&self, iteration: usize) -> (usize, LossWeights) {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.iterations;
            if iteration < end {
                return (i, p.weights);
            }
        }
        let last = self.phases.len() - 1;
        (last, self.phases[last].weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    conv_in: Conv,
    blocks: Vec<Vec<Conv>>,
    fc_mu: Linear,
    fc_log_var: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    fc: Linear,
    blocks: Vec<Vec<Conv>>,
    conv_out: Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    blocks: Vec<Conv>,
    conv_out: Conv,
}

const CRITIC_BLOCKS: usize = 3;
const K3: [usize; 2] = [3, 3];

fn build_encoder(arch: &VaeArchSpec, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Encoder {
    let conv_in = Conv::new(ps, "enc.in", 1, arch.base_channels, &K3, true, rng);
    let mut cin = arch.base_channels;
    let mut blocks = Vec::new();
    for b in 0..arch.num_blocks {
        let cout = arch.channels(b);
        let convs = (0..arch.convs_per_block)
            .map(|r| {
                let c = Conv::new(ps, &format!("enc.b{b}.c{r}"), cin, cout, &K3, true, rng);
                cin = cout;
                c
            })
            .collect();
        blocks.push(convs);
    }
    let (c, h, w) = arch.bottleneck();
    let fc_mu = Linear::new(ps, "enc.fc_mu", c * h * w, arch.latent_dim, rng);
    let fc_log_var = Linear::new(ps, "enc.fc_log_var", c * h * w, arch.latent_dim, rng);
    Encoder {
        conv_in,
        blocks,
        fc_mu,
        fc_log_var,
    }
}

fn build_decoder(arch: &VaeArchSpec, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Decoder {
    let (c, h, w) = arch.bottleneck();
    let fc = Linear::new(ps, "dec.fc", arch.latent_dim, c * h * w, rng);
    let mut cin = c;
    let mut blocks = Vec::new();
    for b in (0..arch.num_blocks).rev() {
        let cout = if b == 0 {
            arch.base_channels
        } else {
            arch.channels(b - 1)
        };
        let convs = (0..arch.convs_per_block)
            .map(|r| {
                let c = Conv::new(ps, &format!("dec.b{b}.c{r}"), cin, cout, &K3, true, rng);
                cin = cout;
                c
            })
            .collect();
        blocks.push(convs);
    }
    let conv_out = Conv::new(ps, "dec.out", cin, 1, &K3, true, rng);
    Decoder {
        fc,
        blocks,
        conv_out,
    }
}

fn build_critic(arch: &VaeArchSpec, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Critic {
    let mut cin = 1;
    let blocks = (0..CRITIC_BLOCKS)
        .map(|b| {
            let cout = arch.channels(b);
            let c = Conv::new(ps, &format!("critic.b{b}"), cin, cout, &K3, true, rng);
            cin = cout;
            c
        })
        .collect();
    let conv_out = Conv::new(ps, "critic.out", cin, 1, &K3, true, rng);
    Critic { blocks, conv_out }
}

/// Graph nodes of the scalar loss terms for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub center: Var,
    pub prior: Var,
    pub comp: Var,
    pub adv: Var,
    /// Sampled latent of the center slices (adversarial gradients stop here).
    pub z: Var,
}

/// Per-term values and the weighted total for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_center: f64,
    pub l_adv: f64,
    pub l_prior: f64,
    pub l_comp: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_center: f64, l_adv: f64, l_prior: f64, l_comp: f64, w: &LossWeights) -> Self {
        let total = w.alpha * l_center + w.beta * l_adv + w.gamma * l_prior + w.eta * l_comp;
        LossBreakdown {
            l_center,
            l_adv,
            l_prior,
            l_comp,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_center,
            self.l_adv,
            self.l_prior,
            self.l_comp,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l_center: f64,
    pub l_adv: f64,
    pub l_prior: f64,
    pub l_comp: f64,
    pub total: f64,
    pub phase: usize,
}

/// A batch of consecutive slice triples, each slice `[H, W]`.
#[derive(Debug, Clone)]
pub struct TripleBatch {
    pub prev: Vec<Array2<f64>>,
    pub center: Vec<Array2<f64>>,
    pub next: Vec<Array2<f64>>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

fn images_tensor<'a>(imgs: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = (0, 0);
    for img in imgs {
        hw = img.dim();
        data.extend(img.iter().copied());
        n += 1;
    }
    Tensor::new(vec![n, 1, hw.0, hw.1], data).expect("uniform images")
}

/// Training slices grouped by volume, in z order.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    volumes: Vec<Vec<Array2<f64>>>,
}

impl SliceDataset {
    /// Every volume needs at least three slices so that a center slice has
    /// both neighbors.
    pub fn new(volumes: &[Volume3D], image_size: (usize, usize)) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut out = Vec::with_capacity(volumes.len());
        for (i, v) in volumes.iter().enumerate() {
            let (d, h, w) = v.dims();
            if (h, w) != image_size {
                return Err(Error::Shape(format!(
                    "volume {i}: slices {h}x{w}, model expects {image_size:?}"
                )));
            }
            if d < 3 {
                return Err(Error::InvalidArgument(format!(
                    "volume {i}: {d} slices, need at least 3"
                )));
            }
            out.push((0..d).map(|z| v.slice(z).data).collect());
        }
        Ok(SliceDataset { volumes: out })
    }

    pub fn num_volumes(&self) -> usize {
        self.volumes.len()
    }

    /// Uniform volume, then uniform interior center slice.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> TripleBatch {
        let mut b = TripleBatch {
            prev: Vec::new(),
            center: Vec::new(),
            next: Vec::new(),
        };
        for _ in 0..batch {
            let vol = &self.volumes[rng.random_range(0..self.volumes.len())];
            let n = rng.random_range(1..vol.len() - 1);
            b.prev.push(vol[n - 1].clone());
            b.center.push(vol[n].clone());
            b.next.push(vol[n + 1].clone());
        }
        b
    }
}

/// Everything needed to run or resume VAE-GAN training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeState {
    pub arch: VaeArchSpec,
    pub train: VaeTrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub critic: ParamSet,
    enc_net: Encoder,
    dec_net: Decoder,
    critic_net: Critic,
    pub opt_encoder: Adam,
    pub opt_decoder: Adam,
    pub opt_critic: Adam,
    pub history: Vec<LossRecord>,
    pub meta: BTreeMap<String, String>,
}

/// Bindings of the three parameter sets on one graph.
pub struct Binding {
    pub encoder: Bound,
    pub decoder: Bound,
    pub critic: Bound,
}

impl VaeState {
    pub fn new(arch: VaeArchSpec, train: VaeTrainConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut encoder, mut decoder, mut critic) =
            (ParamSet::new(), ParamSet::new(), ParamSet::new());
        let enc_net = build_encoder(&arch, &mut encoder, &mut rng);
        let dec_net = build_decoder(&arch, &mut decoder, &mut rng);
        let critic_net = build_critic(&arch, &mut critic, &mut rng);
        let adam = |p: &ParamSet| Adam::new(p, train.lr, train.beta1, train.beta2);
        Ok(VaeState {
            opt_encoder: adam(&encoder),
            opt_decoder: adam(&decoder),
            opt_critic: adam(&critic),
            arch,
            train,
            seed,
            iteration: 0,
            encoder,
            decoder,
            critic,
            enc_net,
            dec_net,
            critic_net,
            history: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let bind = |p: &ParamSet, g: &mut Graph| {
            if trainable {
                p.bind(g)
            } else {
                p.bind_frozen(g)
            }
        };
        Binding {
            encoder: bind(&self.encoder, g),
            decoder: bind(&self.decoder, g),
            critic: bind(&self.critic, g),
        }
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, self.arch.negative_slope)
    }

    /// `x: [N, 1, H, W]` to `(mu, log_var)`, each `[N, L]`.
    pub fn encoder_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> (Var, Var) {
        let net = &self.enc_net;
        let mut h = net.conv_in.forward(g, &self.encoder, b, x);
        for block in &net.blocks {
            for conv in block {
                h = self.act(g, h);
                h = g.instance_norm(h);
                h = conv.forward(g, &self.encoder, b, h);
            }
            h = g.avg_pool2(h);
        }
        h = self.act(g, h);
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat]);
        (net.fc_mu.forward(g, b, h), net.fc_log_var.forward(g, b, h))
    }

    /// `z: [N, L]` to images `[N, 1, H, W]`.
    pub fn decoder_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Var {
        let net = &self.dec_net;
        let n = g.shape(z)[0];
        let (c, h0, w0) = self.arch.bottleneck();
        let h = net.fc.forward(g, b, z);
        let mut h = g.reshape(h, &[n, c, h0, w0]);
        for block in &net.blocks {
            h = g.upsample2(h);
            for conv in block {
                h = self.act(g, h);
                h = g.instance_norm(h);
                h = conv.forward(g, &self.decoder, b, h);
            }
        }
        h = self.act(g, h);
        net.conv_out.forward(g, &self.decoder, b, h)
    }

    /// Critic scores `[N, 1]` for images `[N, 1, H, W]`.
    pub fn critic_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let net = &self.critic_net;
        let mut h = x;
        for conv in &net.blocks {
            h = conv.forward(g, &self.critic, b, h);
            h = g.instance_norm(h);
            h = self.act(g, h);
            h = g.avg_pool2(h);
        }
        let h = net.conv_out.forward(g, &self.critic, b, h);
        g.global_avg_pool(h)
    }

    /// Builds all four loss terms for a batch; `eps` is the `[B, L]`
    /// standard-normal draw of the reparameterization.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        batch: &TripleBatch,
        eps: &Tensor,
    ) -> LossVars {
        let n = batch.len();
        let x = images_tensor(
            batch
                .center
                .iter()
                .chain(&batch.prev)
                .chain(&batch.next)
                .map(|a| a.view()),
        );
        let x = g.constant(x);
        let (mu, lv) = self.encoder_graph(g, &bind.encoder, x);
        let part = |g: &mut Graph, v: Var, i: usize| g.narrow(v, i * n, n);
        let (mu_c, lv_c) = (part(g, mu, 0), part(g, lv, 0));
        let (mu_p, lv_p) = (part(g, mu, 1), part(g, lv, 1));
        let (mu_n, lv_n) = (part(g, mu, 2), part(g, lv, 2));

        let half = g.scale(lv_c, 0.5);
        let sd = g.exp(half);
        let e = g.constant(eps.clone());
        let noise = g.mul(sd, e);
        let z = g.add(mu_c, noise);
        let x_hat = self.decoder_graph(g, &bind.decoder, z);
        let x_c = g.narrow(x, 0, n);

        let diff = g.sub(x_c, x_hat);
        let err = match self.train.center_loss {
            CenterLoss::L1 => g.abs(diff),
            CenterLoss::L2 => g.square(diff),
        };
        let center = g.mean(err);

        let prior = kl_to_standard_graph(g, mu_c, lv_c);
        let prior = g.scale(prior, 1.0 / n as f64);
        let k_next = kl_graph(g, (mu_c, lv_c), (mu_n, lv_n));
        let k_prev = kl_graph(g, (mu_c, lv_c), (mu_p, lv_p));
        let comp = g.add(k_next, k_prev);
        let comp = g.scale(comp, 1.0 / n as f64);

        let d_real = self.critic_graph(g, &bind.critic, x_c);
        let d_fake = self.critic_graph(g, &bind.critic, x_hat);
        let m_real = g.mean(d_real);
        let m_fake = g.mean(d_fake);
        let adv = g.sub(m_real, m_fake);
        LossVars {
            center,
            prior,
            comp,
            adv,
            z,
        }
    }

    /// Combined objective for the encoder and the non-adversarial part of the
    /// decoder objective: `alpha L_center + gamma L_prior + eta L_comp`.
    pub fn recon_objective(g: &mut Graph, l: &LossVars, w: &LossWeights) -> Var {
        let a = g.scale(l.center, w.alpha);
        let b = g.scale(l.prior, w.gamma);
        let c = g.scale(l.comp, w.eta);
        let ab = g.add(a, b);
        g.add(ab, c)
    }

    fn check_slice(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.dim() != self.arch.image_size {
            return Err(Error::Shape(format!(
                "slice {:?}, model expects {:?}",
                x.dim(),
                self.arch.image_size
            )));
        }
        Ok(())
    }

    /// Encodes a batch of slices with frozen parameters.
    pub fn encode_batch(&self, xs: &[ArrayView2<f64>]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(INFER_CHUNK) {
            for x in chunk {
                self.check_slice(x)?;
            }
            let mut g = Graph::new();
            let b = self.encoder.bind_frozen(&mut g);
            let x = g.constant(images_tensor(chunk.iter().cloned()));
            let (mu, lv) = self.encoder_graph(&mut g, &b, x);
            let l = self.arch.latent_dim;
            for i in 0..chunk.len() {
                let m = g.value(mu).data()[i * l..(i + 1) * l].to_vec();
                let v = g.value(lv).data()[i * l..(i + 1) * l].to_vec();
                out.push(LatentCode::new(m, v)?);
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Array2<f64>>> {
        let l = self.arch.latent_dim;
        let (h, w) = self.arch.image_size;
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFER_CHUNK) {
            if let Some(z) = chunk.iter().find(|z| z.len() != l) {
                return Err(Error::Shape(format!(
                    "latent length {}, model expects {l}",
                    z.len()
                )));
            }
            let mut g = Graph::new();
            let b = self.decoder.bind_frozen(&mut g);
            let z = g.constant(
                Tensor::new(vec![chunk.len(), l], chunk.concat()).expect("checked lengths"),
            );
            let y = self.decoder_graph(&mut g, &b, z);
            for img in g.value(y).data().chunks(h * w) {
                let a = Array2::from_shape_vec((h, w), img.to_vec()).expect("image size");
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("decoded slice".into()));
                }
                out.push(a);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, x: &Slice2D) -> Result<LatentCode> {
        Ok(self.encode_batch(&[x.data.view()])?.remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Slice2D> {
        Ok(Slice2D::new(self.decode_batch(&[z.to_vec()])?.remove(0), 0))
    }

    /// Unbounded critic score.
    pub fn discriminate(&self, x: &Slice2D) -> Result<f64> {
        let view = x.data.view();
        self.check_slice(&view)?;
        let mut g = Graph::new();
        let b = self.critic.bind_frozen(&mut g);
        let x = g.constant(images_tensor([view]));
        let s = self.critic_graph(&mut g, &b, x);
        Ok(g.value(s).item())
    }

    /// Test-time reconstruction through the latent mean.
    pub fn reconstruct(&self, x: &Slice2D) -> Result<Slice2D> {
        let code = self.encode(x)?;
        let mut out = self.decode(&code.mu)?;
        out.index = x.index;
        Ok(out)
    }

    /// `H(x_real) - H(x_fake)`.
    pub fn loss_adv(&self, x_real: &Slice2D, x_fake: &Slice2D) -> Result<f64> {
        loss_adv_with(|x| self.discriminate(x), x_real, x_fake)
    }

    /// Weighted objective on one triple through a stochastic latent drawn
    /// from `rng`, with the unweighted terms.
    pub fn total_vae_loss<R: Rng + ?Sized>(
        &self,
        triple: [&Slice2D; 3],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        for s in triple {
            self.check_slice(&s.data.view())?;
        }
        let batch = TripleBatch {
            prev: vec![triple[0].data.clone()],
            center: vec![triple[1].data.clone()],
            next: vec![triple[2].data.clone()],
        };
        let eps = standard_normal(&[1, self.arch.latent_dim], rng);
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let l = self.loss_graph(&mut g, &bind, &batch, &eps);
        let v = |x: Var| g.value(x).item();
        Ok(LossBreakdown::new(
            v(l.center),
            v(l.adv),
            v(l.prior),
            v(l.comp),
            weights,
        ))
    }

    /// Runs one paired update: encoder and decoder descend, the critic ascends
    /// the adversarial term. Parameters are left unchanged (apart from the
    /// spectral-norm power step) if any loss or gradient is non-finite.
    pub fn step(&mut self, data: &SliceDataset) -> Result<LossRecord> {
        let iter = self.iteration;
        let (phase, w) = self.train.phase_at(iter);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iter as u64 + 1);
        let batch = data.sample(self.train.batch_size, &mut rng);
        let eps = standard_normal(&[batch.len(), self.arch.latent_dim], &mut rng);

        self.encoder.power_iterate();
        self.decoder.power_iterate();
        self.critic.power_iterate();
        let state = &*self;

        let mut g = Graph::new();
        let bind = state.bind(&mut g, true);
        let l = state.loss_graph(&mut g, &bind, &batch, &eps);
        let v = |x: Var| g.value(x).item();
        let losses = LossBreakdown::new(v(l.center), v(l.adv), v(l.prior), v(l.comp), &w);
        let record = LossRecord {
            iter: iter + 1,
            l_center: losses.l_center,
            l_adv: losses.l_adv,
            l_prior: losses.l_prior,
            l_comp: losses.l_comp,
            total: losses.total,
            phase: phase + 1,
        };
        if !losses.is_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {}: {losses:?}",
                iter + 1
            )));
        }

        let recon = VaeState::recon_objective(&mut g, &l, &w);
        let g1 = g.backward(recon);
        let enc_grads = state.encoder.collect_grads(&bind.encoder, &g1);
        let mut dec_grads = state.decoder.collect_grads(&bind.decoder, &g1);
        let mut crit_grads: Vec<Tensor> = state
            .critic
            .tensors()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        if w.beta > 0.0 {
            let g2 = g.backward_with_stops(l.adv, &[l.z]);
            for (d, a) in dec_grads
                .iter_mut()
                .zip(state.decoder.collect_grads(&bind.decoder, &g2))
            {
                d.add_assign(&a.map(|x| w.beta * x));
            }
            crit_grads = state
                .critic
                .collect_grads(&bind.critic, &g2)
                .into_iter()
                .map(|t| t.map(|x| -w.beta * x))
                .collect();
        }
        if !enc_grads
            .iter()
            .chain(&dec_grads)
            .chain(&crit_grads)
            .all(Tensor::is_finite)
        {
            return Err(Error::NonFinite(format!(
                "iteration {}: non-finite gradient",
                iter + 1
            )));
        }
        drop(g);
        self.opt_encoder.step(&mut self.encoder, &enc_grads);
        self.opt_decoder.step(&mut self.decoder, &dec_grads);
        self.opt_critic.step(&mut self.critic, &crit_grads);
        self.iteration += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `until` total iterations (or the configured total when
    /// `None`), calling `on_checkpoint` every `checkpoint_every` iterations.
    pub fn train_until(
        &mut self,
        data: &SliceDataset,
        until: Option<usize>,
        on_checkpoint: &mut dyn FnMut(&VaeState) -> Result<()>,
    ) -> Result<()> {
        let end = until.unwrap_or_else(|| self.train.total_iterations());
        while self.iteration < end {
            let rec = self.step(data)?;
            if rec.iter % 50 == 0 || rec.iter == end {
                log::info!(
                    "vae iter {} phase {} center {:.5} adv {:.5} prior {:.4} comp {:.4}",
                    rec.iter,
                    rec.phase,
                    rec.l_center,
                    rec.l_adv,
                    rec.l_prior,
                    rec.l_comp
                );
            }
            let every = self.train.checkpoint_every;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

const INFER_CHUNK: usize = 16;

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "iter", "l_center", "l_adv", "l_prior", "l_comp", "total", "phase",
    ])
    .expect("in-memory csv");
    for r in history {
        w.write_record([
            r.iter.to_string(),
            r.l_center.to_string(),
            r.l_adv.to_string(),
            r.l_prior.to_string(),
            r.l_comp.to_string(),
            r.total.to_string(),
            r.phase.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

/// Builds a fresh state and trains it through every phase.
pub fn train_vae(
    volumes: &[Volume3D],
    arch: &VaeArchSpec,
    train: &VaeTrainConfig,
    seed: u64,
) -> Result<VaeState> {
    let data = SliceDataset::new(volumes, arch.image_size)?;
    let mut state = VaeState::new(arch.clone(), train.clone(), seed)?;
    state.train_until(&data, None, &mut |_| Ok(()))?;
    Ok(state)
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect(),
    )
    .expect("shape")
}

/// `z = mu + exp(log_var / 2) * eps` with `eps ~ N(0, I)`.
pub fn sample_latent<R: Rng + ?Sized>(code: &LatentCode, rng: &mut R) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.log_var)
        .map(|(m, lv)| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            m + (0.5 * lv).exp() * e
        })
        .collect()
}

/// Adversarial term for an arbitrary critic.
pub fn loss_adv_with<F>(critic: F, x_real: &Slice2D, x_fake: &Slice2D) -> Result<f64>
where
    F: Fn(&Slice2D) -> Result<f64>,
{
    if x_real.dims() != x_fake.dims() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            x_real.dims(),
            x_fake.dims()
        )));
    }
    Ok(critic(x_real)? - critic(x_fake)?)
}

/// `KL(N(mu, sigma^2) || N(0, I))`, summed over latent dimensions.
pub fn loss_prior(code: &LatentCode) -> f64 {
    0.5 * code
        .mu
        .iter()
        .zip(&code.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// `KL(a || b)` between diagonal Gaussians.
pub fn kl_between(a: &LatentCode, b: &LatentCode) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "latent dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok((0..a.dim())
        .map(|i| {
            let (va, vb) = (a.log_var[i].exp(), b.log_var[i].exp());
            let dm = a.mu[i] - b.mu[i];
            0.5 * (b.log_var[i] - a.log_var[i]) + (va + dm * dm) / (2.0 * vb) - 0.5
        })
        .sum())
}

/// `KL(n || next) + KL(n || prev)`.
pub fn loss_comp(prev: &LatentCode, n: &LatentCode, next: &LatentCode) -> Result<f64> {
    Ok(kl_between(n, next)? + kl_between(n, prev)?)
}

/// Mean absolute (L1) or squared (L2) difference.
pub fn loss_center(x: &Slice2D, x_hat: &Slice2D, norm: CenterLoss) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let n = x.data.len() as f64;
    let s: f64 = x
        .data
        .iter()
        .zip(x_hat.data.iter())
        .map(|(a, b)| match norm {
            CenterLoss::L1 => (a - b).abs(),
            CenterLoss::L2 => (a - b) * (a - b),
        })
        .sum();
    Ok(s / n)
}

/// Sum over the batch of `KL(N(mu, e^lv) || N(0, I))`.
fn kl_to_standard_graph(g: &mut Graph, mu: Var, lv: Var) -> Var {
    let m2 = g.square(mu);
    let v = g.exp(lv);
    let a = g.add(m2, v);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5)
}

/// Sum over the batch of `KL(a || b)` for diagonal Gaussians.
fn kl_graph(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> Var {
    let (mu_a, lv_a) = a;
    let (mu_b, lv_b) = b;
    let dlv = g.sub(lv_b, lv_a);
    let ratio_arg = g.sub(lv_a, lv_b);
    let ratio = g.exp(ratio_arg);
    let dm = g.sub(mu_a, mu_b);
    let dm2 = g.square(dm);
    let neg_lv_b = g.scale(lv_b, -1.0);
    let inv_vb = g.exp(neg_lv_b);
    let quad = g.mul(dm2, inv_vb);
    let t = g.add(dlv, ratio);
    let t = g.add(t, quad);
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    g.scale(s, 0.5)
}
