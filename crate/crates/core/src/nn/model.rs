use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{threshold, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::phy::{CMatrix, ChannelMatrix, PrecodingSolution, SystemConfig, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    #[serde(skip)]
    pub n_tx: usize,
    #[serde(skip)]
    pub n_users: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    /// Gain (dB) applied to CSI entries before the embedding, undoing the
    /// large-scale path loss so tokens are O(1).
    pub input_scale_db: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            n_tx: 64,
            n_users: 4,
            embed_dim: 128,
            ffn_dim: 1024,
            n_heads: 2,
            n_layers: 4,
            dropout: 0.05,
            input_scale_db: 0.0,
        }
    }
}

impl ModelHyper {
    pub fn with_system(mut self, cfg: &SystemConfig) -> Self {
        self.n_tx = cfg.n_tx;
        self.n_users = cfg.n_users;
        self
    }

    pub fn token_dim(&self) -> usize {
        2 * self.n_tx
    }

    pub fn seq_len(&self) -> usize {
        self.n_users + 1
    }

    pub fn input_scale(&self) -> f64 {
        10f64.powf(self.input_scale_db / 20.0)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_tx", self.n_tx),
            ("n_users", self.n_users),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.input_scale_db.is_finite() {
            return Err(Error::invalid("input_scale_db must be finite"));
        }
        Ok(())
    }

    pub fn check_system(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n_tx != cfg.n_tx {
            return Err(Error::DimensionMismatch {
                context: "model n_tx",
                expected: cfg.n_tx,
                got: self.n_tx,
            });
        }
        if self.n_users != cfg.n_users {
            return Err(Error::DimensionMismatch {
                context: "model n_users",
                expected: cfg.n_users,
                got: self.n_users,
            });
        }
        Ok(())
    }
}

/// Per-user rate targets `R*` in b/s/Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    targets: Vec<f64>,
}

impl RateRequest {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if let Some(t) = targets.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::invalid(format!(
                "rate target {t} must be finite and non-negative"
            )));
        }
        Ok(Self { targets })
    }

    pub fn uniform(n_users: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_users])
    }

    pub fn zeros(n_users: usize) -> Self {
        Self {
            targets: vec![0.0; n_users],
        }
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn total(&self) -> f64 {
        self.targets.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Raw model inputs: one CSI token per user and a trailing rate token.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub csi: Vec<Vec<f64>>,
    pub rate: Vec<f64>,
}

pub fn tokenize(h: &ChannelMatrix, request: &RateRequest, cfg: &SystemConfig) -> Result<Tokens> {
    h.check(cfg)?;
    if request.len() != cfg.n_users {
        return Err(Error::DimensionMismatch {
            context: "rate request",
            expected: cfg.n_users,
            got: request.len(),
        });
    }
    let csi = (0..h.n_users())
        .map(|u| {
            let row = h.user(u);
            row.iter()
                .map(|z| z.re)
                .chain(row.iter().map(|z| z.im))
                .collect()
        })
        .collect();
    Ok(Tokens {
        csi,
        rate: request.targets().to_vec(),
    })
}

/// Fixed compression of the rate token; requests span from 0 to very large
/// "maximize" sentinels.
fn rate_feature(r: f64) -> f64 {
    r.ln_1p()
}

const SINR_FLOOR: f64 = 1e-4;
const SINR_CEIL: f64 = 1e4;

/// Log of the SINR a user needs to reach `r`, clamped and mapped to [-1, 1].
/// Beam power scales with this quantity, so small targets stay resolvable.
fn sinr_feature(r: f64) -> f64 {
    let sinr = (r * std::f64::consts::LN_2)
        .exp_m1()
        .clamp(SINR_FLOOR, SINR_CEIL);
    sinr.ln() / SINR_CEIL.ln()
}

const USER_RATE_FEATURES: usize = 2;

pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.param(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
        let bias = Tensor::from_vec(1, fan_out, draw(fan_out));
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(1, dim, 1.0),
            bias: Tensor::zeros(1, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

const EMBED_TENSORS: usize = 5;
const BLOCK_TENSORS: usize = 16;

impl EncoderBlock {
    fn new<R: Rng + ?Sized>(hyper: &ModelHyper, rng: &mut R) -> Self {
        let d = hyper.embed_dim;
        Self {
            attn_norm: Norm::new(d),
            query: Linear::new(d, d, rng),
            key: Linear::new(d, d, rng),
            value: Linear::new(d, d, rng),
            output: Linear::new(d, d, rng),
            ffn_norm: Norm::new(d),
            ffn_in: Linear::new(d, hyper.ffn_dim, rng),
            ffn_out: Linear::new(hyper.ffn_dim, d, rng),
        }
    }

    fn push<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.extend([&self.attn_norm.gain, &self.attn_norm.bias]);
        for l in [&self.query, &self.key, &self.value, &self.output] {
            out.extend([&l.weight, &l.bias]);
        }
        out.extend([&self.ffn_norm.gain, &self.ffn_norm.bias]);
        for l in [&self.ffn_in, &self.ffn_out] {
            out.extend([&l.weight, &l.bias]);
        }
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([&mut self.attn_norm.gain, &mut self.attn_norm.bias]);
        for l in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.extend([&mut self.ffn_norm.gain, &mut self.ffn_norm.bias]);
        for l in [&mut self.ffn_in, &mut self.ffn_out] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
    }
}

/// Shared feature extractor `f_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub hyper: ModelHyper,
    pub csi_embedding: Linear,
    /// Direction along which each user token receives its own target.
    pub user_rate: Tensor,
    pub rate_embedding: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: Norm,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(hyper: ModelHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let csi_embedding = Linear::new(hyper.token_dim(), hyper.embed_dim, rng);
        let user_rate = Linear::new(USER_RATE_FEATURES, hyper.embed_dim, rng).weight;
        let rate_embedding = Linear::new(hyper.n_users, hyper.embed_dim, rng);
        let blocks = (0..hyper.n_layers)
            .map(|_| EncoderBlock::new(&hyper, rng))
            .collect();
        let final_norm = Norm::new(hyper.embed_dim);
        Ok(Self {
            hyper,
            csi_embedding,
            user_rate,
            rate_embedding,
            blocks,
            final_norm,
        })
    }

    /// Checks tensor shapes against `hyper`.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Self::new(self.hyper.clone(), &mut rng)?;
        check_shapes(&template.tensors(), &self.tensors())
    }
}

impl Parameters for FeatureExtractor {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.csi_embedding.weight,
            &self.csi_embedding.bias,
            &self.user_rate,
            &self.rate_embedding.weight,
            &self.rate_embedding.bias,
        ];
        for b in &self.blocks {
            b.push(&mut out);
        }
        out.extend([&self.final_norm.gain, &self.final_norm.bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.csi_embedding.weight,
            &mut self.csi_embedding.bias,
            &mut self.user_rate,
            &mut self.rate_embedding.weight,
            &mut self.rate_embedding.bias,
        ];
        for b in &mut self.blocks {
            b.push_mut(&mut out);
        }
        out.extend([&mut self.final_norm.gain, &mut self.final_norm.bias]);
        out
    }
}

/// Environment-specific output head `Z_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    /// Beam direction per user token.
    pub precoder: Linear,
    /// Power-split logit per user token.
    pub power: Linear,
    /// Weight of the requested log-SINR on the power-split logit.
    pub power_gain: Tensor,
    pub energy: Linear,
}

impl OutputHead {
    pub fn new<R: Rng + ?Sized>(hyper: &ModelHyper, rng: &mut R) -> Self {
        Self {
            precoder: Linear::new(hyper.embed_dim, 2 * hyper.n_tx, rng),
            power: Linear::new(hyper.embed_dim, 1, rng),
            power_gain: Tensor::scalar(SINR_CEIL.ln()),
            energy: Linear::new(hyper.embed_dim, hyper.n_tx + 1, rng),
        }
    }

    pub fn validate(&self, hyper: &ModelHyper) -> Result<()> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        check_shapes(&Self::new(hyper, &mut rng).tensors(), &self.tensors())
    }
}

impl Parameters for OutputHead {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.precoder.weight,
            &self.precoder.bias,
            &self.power.weight,
            &self.power.bias,
            &self.power_gain,
            &self.energy.weight,
            &self.energy.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.precoder.weight,
            &mut self.precoder.bias,
            &mut self.power.weight,
            &mut self.power.bias,
            &mut self.power_gain,
            &mut self.energy.weight,
            &mut self.energy.bias,
        ]
    }
}

fn check_shapes(expected: &[&Tensor], got: &[&Tensor]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::DimensionMismatch {
            context: "parameter tensor count",
            expected: expected.len(),
            got: got.len(),
        });
    }
    for (i, (e, g)) in expected.iter().zip(got).enumerate() {
        if (e.rows, e.cols) != (g.rows, g.cols) {
            return Err(Error::Malformed(format!(
                "parameter {i} has shape {}x{}, expected {}x{}",
                g.rows, g.cols, e.rows, e.cols
            )));
        }
        if !g.is_finite() {
            return Err(Error::Malformed(format!("parameter {i} is not finite")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub solution: PrecodingSolution,
    /// Sigmoid activations of the energy head: `N_T` antenna scores, then `γ`.
    pub pre_threshold: Vec<f64>,
}

/// Head outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `(B*N_U) x 2N_T`, power-normalized per sample.
    pub precoder: Var,
    /// `B x N_T`, binary in the forward pass.
    pub mask: Var,
    /// `B x 1`.
    pub gamma: Var,
    /// `B x (N_T+1)` sigmoid activations.
    pub activations: Var,
}

fn check_batch(
    hyper: &ModelHyper,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
) -> Result<()> {
    if channels.len() != requests.len() {
        return Err(Error::DimensionMismatch {
            context: "requests per batch",
            expected: channels.len(),
            got: requests.len(),
        });
    }
    if channels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for (h, r) in channels.iter().zip(requests) {
        if h.n_users() != hyper.n_users || h.n_tx() != hyper.n_tx {
            return Err(Error::DimensionMismatch {
                context: "channel matrix",
                expected: hyper.n_users * hyper.n_tx,
                got: h.n_users() * h.n_tx(),
            });
        }
        if r.len() != hyper.n_users {
            return Err(Error::DimensionMismatch {
                context: "rate request",
                expected: hyper.n_users,
                got: r.len(),
            });
        }
    }
    Ok(())
}

/// Builds `f_θ` for a batch and returns the final-layer token features,
/// `(B*(N_U+1)) x D`, samples contiguous with the rate token last.
pub fn extractor_graph<'p, R: Rng + ?Sized>(
    tape: &mut Tape<'p>,
    params: &[Var],
    extractor: &FeatureExtractor,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let hy = &extractor.hyper;
    check_batch(hy, channels, requests)?;
    let (nu, nt, b) = (hy.n_users, hy.n_tx, channels.len());
    let s = hy.seq_len();
    let scale = hy.input_scale();
    let p_drop = if mode == Mode::Train { hy.dropout } else { 0.0 };

    let mut csi = Vec::with_capacity(b * nu * 2 * nt);
    let mut own = Vec::with_capacity(b * nu * USER_RATE_FEATURES);
    let mut rate = Vec::with_capacity(b * nu);
    for (h, r) in channels.iter().zip(requests) {
        let m = h.matrix();
        for u in 0..nu {
            csi.extend((0..nt).map(|i| m[(u, i)].re * scale));
            csi.extend((0..nt).map(|i| m[(u, i)].im * scale));
        }
        own.extend(
            r.targets()
                .iter()
                .flat_map(|&t| [rate_feature(t), sinr_feature(t)]),
        );
        // The context token sees the request as a multiset so that
        // relabelling users cannot change it.
        let mut sorted: Vec<f64> = r.targets().iter().map(|&t| rate_feature(t)).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        rate.extend(sorted);
    }
    let csi = tape.constant(Tensor::from_vec(b * nu, 2 * nt, csi));
    let own = tape.constant(Tensor::from_vec(b * nu, USER_RATE_FEATURES, own));
    let rate = tape.constant(Tensor::from_vec(b, nu, rate));

    let xu = tape.affine(csi, params[0], params[1]);
    let xo = tape.matmul(own, params[2]);
    let xu = tape.add(xu, xo);
    let xr = tape.affine(rate, params[3], params[4]);
    let stacked = tape.concat_rows(xu, xr);
    let order = (0..b)
        .flat_map(|k| {
            (0..nu)
                .map(move |u| k * nu + u)
                .chain(std::iter::once(b * nu + k))
        })
        .collect();
    let mut x = tape.gather_rows(stacked, order);
    tape.ensure_finite(x, 0)?;

    for layer in 0..hy.n_layers {
        let p = &params
            [EMBED_TENSORS + layer * BLOCK_TENSORS..EMBED_TENSORS + (layer + 1) * BLOCK_TENSORS];
        let a = tape.layer_norm(x, p[0], p[1]);
        let q = tape.affine(a, p[2], p[3]);
        let k = tape.affine(a, p[4], p[5]);
        let v = tape.affine(a, p[6], p[7]);
        let ctx = tape.attention(q, k, v, s, hy.n_heads);
        let o = tape.affine(ctx, p[8], p[9]);
        let o = tape.dropout(o, p_drop, rng);
        x = tape.add(x, o);

        let f = tape.layer_norm(x, p[10], p[11]);
        let f = tape.affine(f, p[12], p[13]);
        let f = tape.gelu(f);
        let f = tape.affine(f, p[14], p[15]);
        let f = tape.dropout(f, p_drop, rng);
        x = tape.add(x, f);
        tape.ensure_finite(x, layer + 1)?;
    }
    let tail = EMBED_TENSORS + hy.n_layers * BLOCK_TENSORS;
    Ok(tape.layer_norm(x, params[tail], params[tail + 1]))
}

/// Builds `Z_e` on top of token features.
///
/// `mask_anchor` replaces the hard threshold by its frozen linearization
/// (see [`Tape::straight_through`]); training leaves it `None`.
pub fn head_graph(
    tape: &mut Tape<'_>,
    params: &[Var],
    hyper: &ModelHyper,
    features: Var,
    requests: &[RateRequest],
    cfg: &SystemConfig,
    mask_anchor: Option<&[f64]>,
) -> Result<HeadVars> {
    let (nu, nt) = (hyper.n_users, hyper.n_tx);
    let s = hyper.seq_len();
    let rows = tape.value(features).rows;
    if !rows.is_multiple_of(s) {
        return Err(Error::invalid(
            "token features are not a whole number of sequences",
        ));
    }
    let b = rows / s;
    if requests.len() != b {
        return Err(Error::DimensionMismatch {
            context: "requests for head",
            expected: b,
            got: requests.len(),
        });
    }
    let user_rows = (0..b)
        .flat_map(|k| (0..nu).map(move |u| k * s + u))
        .collect();
    let users = tape.gather_rows(features, user_rows);
    let raw = tape.affine(users, params[0], params[1]);
    let directions = tape.power_normalize(raw, 1, 1.0)?;
    let split = tape.affine(users, params[2], params[3]);
    let wanted: Vec<f64> = requests
        .iter()
        .flat_map(|r| r.targets().iter().map(|&t| sinr_feature(t)))
        .collect();
    let wanted = tape.constant(Tensor::from_vec(b * nu, 1, wanted));
    let skip = tape.matmul(wanted, params[4]);
    let split = tape.add(split, skip);
    let shares = tape.block_softmax(split, nu);
    let amplitudes = tape.sqrt(shares);
    let amplitudes = tape.scale(amplitudes, cfg.p_tx.sqrt());
    let precoder = tape.scale_rows(directions, amplitudes);

    let pooled = tape.block_mean(features, s);
    let logits = tape.affine(pooled, params[5], params[6]);
    let activations = tape.sigmoid(logits);
    let scores = tape.slice_cols(activations, 0, nt);
    let mask = tape.straight_through(scores, mask_anchor);
    let gamma = tape.slice_cols(activations, nt, 1);
    let layer = hyper.n_layers + 1;
    tape.ensure_finite(precoder, layer)?;
    tape.ensure_finite(activations, layer)?;
    Ok(HeadVars {
        precoder,
        mask,
        gamma,
        activations,
    })
}

/// `h_u` for every sample and user, flattened `[b][u][i]`.
pub fn flatten_channels(channels: &[ChannelMatrix]) -> Vec<C64> {
    let mut out = Vec::new();
    for h in channels {
        let m = h.matrix();
        for u in 0..m.nrows() {
            out.extend((0..m.ncols()).map(|i| m[(u, i)]));
        }
    }
    out
}

/// Converts evaluated head outputs into per-sample solutions.
pub fn collect_outputs(tape: &Tape<'_>, vars: &HeadVars, hyper: &ModelHyper) -> Vec<ModelOutput> {
    let (nu, nt) = (hyper.n_users, hyper.n_tx);
    let w = tape.value(vars.precoder);
    let act = tape.value(vars.activations);
    (0..act.rows)
        .map(|k| {
            let precoder = CMatrix::from_fn(nt, nu, |i, u| {
                let row = w.row(k * nu + u);
                C64::new(row[i], row[nt + i])
            });
            let pre = act.row(k).to_vec();
            ModelOutput {
                solution: PrecodingSolution {
                    precoder,
                    mask: pre[..nt].iter().map(|&s| threshold(s) == 1.0).collect(),
                    gamma: pre[nt],
                },
                pre_threshold: pre,
            }
        })
        .collect()
}

/// Batch size used when evaluating without gradients.
pub const EVAL_CHUNK: usize = 128;

/// Runs `Φ^e` on a batch.
pub fn forward_batch<R: Rng + ?Sized>(
    extractor: &FeatureExtractor,
    head: &OutputHead,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
    cfg: &SystemConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<ModelOutput>> {
    extractor.hyper.check_system(cfg)?;
    check_batch(&extractor.hyper, channels, requests)?;
    let mut out = Vec::with_capacity(channels.len());
    for (hs, rs) in channels.chunks(EVAL_CHUNK).zip(requests.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let ep = extractor.bind(&mut tape);
        let hp = head.bind(&mut tape);
        let feats = extractor_graph(&mut tape, &ep, extractor, hs, rs, mode, rng)?;
        let vars = head_graph(&mut tape, &hp, &extractor.hyper, feats, rs, cfg, None)?;
        out.extend(collect_outputs(&tape, &vars, &extractor.hyper));
    }
    Ok(out)
}

pub fn forward<R: Rng + ?Sized>(
    extractor: &FeatureExtractor,
    head: &OutputHead,
    h: &ChannelMatrix,
    request: &RateRequest,
    cfg: &SystemConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<ModelOutput> {
    h.check(cfg)?;
    let mut out = forward_batch(
        extractor,
        head,
        std::slice::from_ref(h),
        std::slice::from_ref(request),
        cfg,
        mode,
        rng,
    )?;
    Ok(out.pop().expect("one sample in, one out"))
}

/// Final-layer token features in eval mode, `(B*(N_U+1)) x D`.
pub fn token_features(
    extractor: &FeatureExtractor,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
) -> Result<Tensor> {
    check_batch(&extractor.hyper, channels, requests)?;
    let d = extractor.hyper.embed_dim;
    let mut data = Vec::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for (hs, rs) in channels.chunks(EVAL_CHUNK).zip(requests.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let ep = extractor.bind(&mut tape);
        let feats = extractor_graph(&mut tape, &ep, extractor, hs, rs, Mode::Eval, &mut rng)?;
        data.extend_from_slice(&tape.value(feats).data);
    }
    Ok(Tensor::from_vec(data.len() / d, d, data))
}

/// Mean-pooled final-layer features per sample, `B x D`.
pub fn pooled_features(
    extractor: &FeatureExtractor,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
) -> Result<Tensor> {
    let tokens = token_features(extractor, channels, requests)?;
    let s = extractor.hyper.seq_len();
    let d = tokens.cols;
    let b = tokens.rows / s;
    let mut out = Tensor::zeros(b, d);
    for r in 0..tokens.rows {
        for c in 0..d {
            out.data[(r / s) * d + c] += tokens.data[r * d + c] / s as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::sum_rate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (SystemConfig, ModelHyper) {
        let cfg = SystemConfig {
            n_tx: 4,
            n_users: 2,
            p_tx: 2.0,
            p_rf: 0.5,
            noise_power: 0.1,
        };
        let hyper = ModelHyper {
            embed_dim: 8,
            ffn_dim: 16,
            n_heads: 1,
            n_layers: 1,
            ..ModelHyper::default()
        }
        .with_system(&cfg);
        (cfg, hyper)
    }

    fn small() -> (SystemConfig, ModelHyper) {
        let cfg = SystemConfig {
            n_tx: 8,
            n_users: 3,
            p_tx: 1.0,
            p_rf: 0.1,
            noise_power: 0.05,
        };
        let hyper = ModelHyper {
            embed_dim: 16,
            ffn_dim: 32,
            n_heads: 2,
            n_layers: 2,
            ..ModelHyper::default()
        }
        .with_system(&cfg);
        (cfg, hyper)
    }

    fn random_channel(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> ChannelMatrix {
        ChannelMatrix::new(CMatrix::from_fn(cfg.n_users, cfg.n_tx, |_, _| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }))
        .unwrap()
    }

    fn random_request(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> RateRequest {
        RateRequest::new((0..cfg.n_users).map(|_| rng.gen_range(0.0..4.0)).collect()).unwrap()
    }

    #[test]
    fn tokenize_shapes_and_layout() {
        let (cfg, _) = tiny();
        let h = ChannelMatrix::new(CMatrix::from_fn(2, 4, |u, i| {
            C64::new((u * 4 + i) as f64, 0.0)
        }))
        .unwrap();
        let t = tokenize(&h, &RateRequest::new(vec![1.0, 2.0]).unwrap(), &cfg).unwrap();
        assert_eq!(t.csi.len(), 2);
        assert!(t.csi.iter().all(|tok| tok.len() == 8));
        assert_eq!(t.rate, vec![1.0, 2.0]);
        assert_eq!(&t.csi[1][..4], &[4.0, 5.0, 6.0, 7.0]);
        assert!(t.csi.iter().all(|tok| tok[4..].iter().all(|&v| v == 0.0)));
        assert!(tokenize(&h, &RateRequest::zeros(3), &cfg).is_err());
    }

    #[test]
    fn rate_request_rejects_negative() {
        assert!(RateRequest::new(vec![1.0, -0.1]).is_err());
        assert!(RateRequest::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn hyper_validation() {
        let (_, hyper) = small();
        assert!(hyper.validate().is_ok());
        assert!(ModelHyper {
            n_heads: 3,
            ..hyper.clone()
        }
        .validate()
        .is_err());
        assert!(ModelHyper {
            n_layers: 0,
            ..hyper.clone()
        }
        .validate()
        .is_err());
        assert!(ModelHyper {
            dropout: 1.0,
            ..hyper
        }
        .validate()
        .is_err());
    }

    #[test]
    fn output_shapes_power_and_binarity() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let head = OutputHead::new(&hyper, &mut rng);
        for _ in 0..20 {
            let h = random_channel(&cfg, &mut rng);
            let r = random_request(&cfg, &mut rng);
            let out = forward(&ext, &head, &h, &r, &cfg, Mode::Train, &mut rng).unwrap();
            let sol = &out.solution;
            assert_eq!(
                (sol.precoder.nrows(), sol.precoder.ncols()),
                (cfg.n_tx, cfg.n_users)
            );
            assert_eq!(sol.mask.len(), cfg.n_tx);
            assert_eq!(out.pre_threshold.len(), cfg.n_tx + 1);
            assert!((sol.transmit_power() - cfg.p_tx).abs() <= 1e-9 * cfg.p_tx);
            assert_eq!(sol.gamma, out.pre_threshold[cfg.n_tx]);
            assert!(out.pre_threshold.iter().all(|&s| s > 0.0 && s < 1.0));
            for (m, s) in sol.mask.iter().zip(&out.pre_threshold) {
                assert_eq!(*m, *s >= 0.5);
            }
            sol.check(&cfg).unwrap();
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ext = FeatureExtractor::new(
            ModelHyper {
                dropout: 0.5,
                ..hyper.clone()
            },
            &mut rng,
        )
        .unwrap();
        let head = OutputHead::new(&hyper, &mut rng);
        let h = random_channel(&cfg, &mut rng);
        let r = random_request(&cfg, &mut rng);
        let a = forward(
            &ext,
            &head,
            &h,
            &r,
            &cfg,
            Mode::Eval,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = forward(
            &ext,
            &head,
            &h,
            &r,
            &cfg,
            Mode::Eval,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a, b);
        let c = forward(
            &ext,
            &head,
            &h,
            &r,
            &cfg,
            Mode::Train,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_ne!(a.pre_threshold, c.pre_threshold);
    }

    #[test]
    fn batched_matches_single_samples() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let head = OutputHead::new(&hyper, &mut rng);
        let hs: Vec<_> = (0..5).map(|_| random_channel(&cfg, &mut rng)).collect();
        let rs: Vec<_> = (0..5).map(|_| random_request(&cfg, &mut rng)).collect();
        let batch = forward_batch(&ext, &head, &hs, &rs, &cfg, Mode::Eval, &mut rng).unwrap();
        for ((h, r), out) in hs.iter().zip(&rs).zip(&batch) {
            let single = forward(&ext, &head, h, r, &cfg, Mode::Eval, &mut rng).unwrap();
            for (a, b) in single.pre_threshold.iter().zip(&out.pre_threshold) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((&single.solution.precoder - &out.solution.precoder).norm() < 1e-12);
        }
    }

    #[test]
    fn saturated_energy_head_switches_everything_off() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let mut head = OutputHead::new(&hyper, &mut rng);
        head.energy.bias.data.iter_mut().for_each(|b| *b = -1e3);
        let h = random_channel(&cfg, &mut rng);
        let out = forward(
            &ext,
            &head,
            &h,
            &random_request(&cfg, &mut rng),
            &cfg,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        assert!(out.solution.mask.iter().all(|m| !m));
        assert!(out.solution.gamma < 1e-12);
        assert!(crate::phy::energy(&out.solution, &cfg) < 1e-11);
        assert!(sum_rate(&h, &out.solution, &cfg).unwrap() < 1e-9);
    }

    #[test]
    fn permuting_users_permutes_precoder_columns() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let head = OutputHead::new(&hyper, &mut rng);
        let perm = [2usize, 0, 1];
        for _ in 0..10 {
            let h = random_channel(&cfg, &mut rng);
            let r = random_request(&cfg, &mut rng);
            let hp = ChannelMatrix::new(CMatrix::from_fn(3, cfg.n_tx, |u, i| {
                h.matrix()[(perm[u], i)]
            }))
            .unwrap();
            let rp = RateRequest::new(perm.iter().map(|&u| r.targets()[u]).collect()).unwrap();
            let a = forward(&ext, &head, &h, &r, &cfg, Mode::Eval, &mut rng).unwrap();
            let b = forward(&ext, &head, &hp, &rp, &cfg, Mode::Eval, &mut rng).unwrap();
            for (u, &src) in perm.iter().enumerate() {
                let diff = (b.solution.precoder.column(u) - a.solution.precoder.column(src)).norm();
                assert!(diff < 1e-9, "column {u}: {diff}");
            }
        }
    }

    #[test]
    fn parameter_order_is_stable() {
        let (_, hyper) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let shapes: Vec<_> = ext.tensors().iter().map(|t| (t.rows, t.cols)).collect();
        let shapes_mut: Vec<_> = ext.tensors_mut().iter().map(|t| (t.rows, t.cols)).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.len(), EMBED_TENSORS + BLOCK_TENSORS + 2);
        assert_eq!(shapes[0], (8, 8));
        assert_eq!(shapes[2], (USER_RATE_FEATURES, 8));
        assert_eq!(shapes[3], (2, 8));
        assert!(ext.validate().is_ok());
        ext.blocks[0].ffn_in.bias = Tensor::zeros(1, 3);
        assert!(ext.validate().is_err());
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let (cfg, hyper) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
        let head = OutputHead::new(&hyper, &mut rng);
        ext.blocks[1].ffn_out.bias.data[0] = f64::INFINITY;
        let h = random_channel(&cfg, &mut rng);
        let err = forward(
            &ext,
            &head,
            &h,
            &RateRequest::zeros(3),
            &cfg,
            Mode::Eval,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 2 }), "{err:?}");
    }
}
