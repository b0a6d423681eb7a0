//! Frozen seed-generated pseudo-ViT: token embedding followed by a stack of
//! residual multi-head self-attention layers, with optional prompt
//! attachment (prompt tuning or prefix tuning) at chosen layers.
//!
//! The backbone is immutable after [`FrozenBackbone::build`]; gradients only
//! flow back to prompt rows through the recorded [`ForwardTape`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{attention_backward, attention_with_weights, Mat, RngStream, StreamKey};

/// How a prompt is attached to an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Prompt rows are prepended to query, key and value; the sequence grows by `L_p`.
    ProT,
    /// Prompt is split into key and value prefixes of `L_p / 2` rows; the query length is kept.
    PreT,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_in: usize,
    pub n_tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub attach_layers: Vec<usize>,
}

impl BackboneConfig {
    /// Desk configuration with a single attachment layer (L2P-style pools).
    pub fn desk_l2p(seed: u64) -> Self {
        BackboneConfig {
            d_in: 16,
            n_tokens: 16,
            dim: 64,
            layers: 2,
            heads: 4,
            seed,
            attach_layers: vec![0],
        }
    }

    /// Desk configuration with global prompt at layer 0 and task prompt at layer 1.
    pub fn desk_dualp(seed: u64) -> Self {
        BackboneConfig {
            attach_layers: vec![0, 1],
            ..BackboneConfig::desk_l2p(seed)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.n_tokens == 0 || self.dim == 0 {
            return Err(Error::Config("d_in, n_tokens and dim must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("backbone needs at least one attention layer".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        for &l in &self.attach_layers {
            if l >= self.layers {
                return Err(Error::Config(format!(
                    "attach layer {l} outside 0..{}",
                    self.layers
                )));
            }
        }
        Ok(())
    }
}

/// Projection matrices of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaWeights {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
}

/// Token sequence flowing between layers (`L × D`).
pub type FeatureSeq = Mat;

/// A prompt attached at one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrompt<'a> {
    pub layer: usize,
    pub mode: PromptMode,
    pub prompt: &'a Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    w_emb: Mat,
    pos: Mat,
    cls: Vec<f64>,
    layers: Vec<MsaWeights>,
}

const ROLE_EMB: u64 = 0;
const ROLE_POS: u64 = 1;
const ROLE_CLS: u64 = 2;
const ROLE_Q: u64 = 3;
const ROLE_K: u64 = 4;
const ROLE_V: u64 = 5;
const ROLE_O: u64 = 6;

fn gaussian(seed: u64, layer: u64, role: u64, head: u64, rows: usize, cols: usize, std: f64) -> Mat {
    let mut rng = RngStream::new(seed, StreamKey::new("backbone", layer, role, head));
    Mat::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Per-layer record needed for the backward pass.
#[derive(Clone, Debug)]
struct LayerTape {
    prompt: Option<(PromptMode, usize)>,
    n_in: usize,
    /// Restricts the query to a single row of the query input.
    query_row: Option<usize>,
    q: Vec<Mat>,
    k: Vec<Mat>,
    v: Vec<Mat>,
    weights: Vec<Mat>,
}

/// Activations recorded by [`FrozenBackbone::forward_features`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    layers: Vec<LayerTape>,
    prompt_layers: Vec<usize>,
    dim: usize,
}

impl ForwardTape {
    pub fn prompt_layers(&self) -> &[usize] {
        &self.prompt_layers
    }
}

impl FrozenBackbone {
    pub fn build(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let std = 1.0 / (d as f64).sqrt();
        let s = cfg.seed;
        let top = u64::MAX;
        let w_emb = gaussian(s, top, ROLE_EMB, 0, cfg.d_in, d, std);
        let pos = gaussian(s, top, ROLE_POS, 0, cfg.n_tokens + 1, d, std);
        let cls = gaussian(s, top, ROLE_CLS, 0, 1, d, std).into_data();
        let layers = (0..cfg.layers as u64)
            .map(|l| {
                let per_head = |role| {
                    (0..cfg.heads as u64)
                        .map(|h| gaussian(s, l, role, h, d, dh, std))
                        .collect::<Vec<_>>()
                };
                MsaWeights {
                    wq: per_head(ROLE_Q),
                    wk: per_head(ROLE_K),
                    wv: per_head(ROLE_V),
                    wo: gaussian(s, l, ROLE_O, 0, d, d, std),
                }
            })
            .collect();
        Ok(FrozenBackbone {
            cfg: cfg.clone(),
            w_emb,
            pos,
            cls,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn layer_weights(&self, layer: usize) -> &MsaWeights {
        &self.layers[layer]
    }

    /// Builds a backbone from explicit weights (tests and toy configurations).
    pub fn from_parts(cfg: BackboneConfig, w_emb: Mat, pos: Mat, cls: Vec<f64>, layers: Vec<MsaWeights>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let ok = w_emb.rows() == cfg.d_in
            && w_emb.cols() == d
            && pos.rows() == cfg.n_tokens + 1
            && pos.cols() == d
            && cls.len() == d
            && layers.len() == cfg.layers
            && layers.iter().all(|w| {
                w.wo.rows() == d
                    && w.wo.cols() == d
                    && [&w.wq, &w.wk, &w.wv].iter().all(|ws| {
                        ws.len() == cfg.heads && ws.iter().all(|m| m.rows() == d && m.cols() == dh)
                    })
            });
        if !ok {
            return Err(Error::shape("FrozenBackbone::from_parts", "weights do not match config"));
        }
        Ok(FrozenBackbone {
            cfg,
            w_emb,
            pos,
            cls,
            layers,
        })
    }

    /// Class token plus embedded tokens, each with its positional row.
    pub fn embed(&self, x: &Mat) -> Result<FeatureSeq> {
        if x.rows() != self.cfg.n_tokens || x.cols() != self.cfg.d_in {
            return Err(Error::shape(
                "embed",
                format!(
                    "sample is {}x{}, expected {}x{}",
                    x.rows(),
                    x.cols(),
                    self.cfg.n_tokens,
                    self.cfg.d_in
                ),
            ));
        }
        let tokens = x.matmul(&self.w_emb)?;
        let mut h = Mat::row_vector(&self.cls).vstack(&tokens)?;
        h.add_assign(&self.pos);
        Ok(h)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.cfg.layers {
            return Err(Error::Index {
                index: layer,
                len: self.cfg.layers,
            });
        }
        Ok(())
    }

    fn check_prompt(&self, mode: PromptMode, p: &Mat, h: &Mat) -> Result<()> {
        if p.rows() > 0 && p.cols() != self.cfg.dim {
            return Err(Error::shape("prompt", format!("prompt width {} vs D {}", p.cols(), self.cfg.dim)));
        }
        if h.cols() != self.cfg.dim {
            return Err(Error::shape("prompt", format!("sequence width {} vs D {}", h.cols(), self.cfg.dim)));
        }
        if mode == PromptMode::PreT && p.rows() % 2 != 0 {
            return Err(Error::Config(format!(
                "prefix prompt needs an even length, got {}",
                p.rows()
            )));
        }
        Ok(())
    }

    /// Multi-head attention of `layer` over explicit query/key/value inputs,
    /// optionally evaluating a single query row.
    fn attend(&self, layer: usize, q_in: &Mat, k_in: &Mat, v_in: &Mat, tape: &mut LayerTape) -> Result<Mat> {
        let w = &self.layers[layer];
        let dh = self.cfg.head_dim();
        let mut concat = Mat::zeros(q_in.rows(), self.cfg.dim);
        for j in 0..self.cfg.heads {
            let q = q_in.matmul(&w.wq[j])?;
            let k = k_in.matmul(&w.wk[j])?;
            let v = v_in.matmul(&w.wv[j])?;
            let att = attention_with_weights(&q, &k, &v)?;
            concat.set_col_block(j * dh, &att.output);
            tape.q.push(q);
            tape.k.push(k);
            tape.v.push(v);
            tape.weights.push(att.weights);
        }
        concat.matmul(&w.wo)
    }

    fn msa_forward(
        &self,
        layer: usize,
        h: &Mat,
        prompt: Option<(PromptMode, &Mat)>,
        residual: bool,
        query_row: Option<usize>,
    ) -> Result<(Mat, LayerTape)> {
        self.check_layer(layer)?;
        if h.cols() != self.cfg.dim {
            return Err(Error::shape("msa_layer", format!("sequence width {} vs D {}", h.cols(), self.cfg.dim)));
        }
        let mut tape = LayerTape {
            prompt: prompt.map(|(m, p)| (m, p.rows())),
            n_in: h.rows(),
            query_row,
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            weights: Vec::new(),
        };
        let restrict = |m: &Mat| match query_row {
            Some(r) => m.slice_rows(r, r + 1),
            None => m.clone(),
        };
        let out = match prompt {
            None => {
                let q_in = restrict(h);
                let mut out = self.attend(layer, &q_in, h, h, &mut tape)?;
                if residual {
                    out.add_assign(&q_in);
                }
                out
            }
            Some((mode, p)) => {
                self.check_prompt(mode, p, h)?;
                match mode {
                    PromptMode::ProT => {
                        let x = p.vstack(h)?;
                        let q_in = restrict(&x);
                        let mut out = self.attend(layer, &q_in, &x, &x, &mut tape)?;
                        if residual {
                            out.add_assign(&q_in);
                        }
                        out
                    }
                    PromptMode::PreT => {
                        let half = p.rows() / 2;
                        let k_in = p.slice_rows(0, half).vstack(h)?;
                        let v_in = p.slice_rows(half, p.rows()).vstack(h)?;
                        let q_in = restrict(h);
                        let mut out = self.attend(layer, &q_in, &k_in, &v_in, &mut tape)?;
                        if residual {
                            out.add_assign(&q_in);
                        }
                        out
                    }
                }
            }
        };
        Ok((out, tape))
    }

    /// Plain multi-head self-attention of `h` at `layer` (no residual).
    pub fn msa(&self, layer: usize, h: &FeatureSeq) -> Result<FeatureSeq> {
        Ok(self.msa_forward(layer, h, None, false, None)?.0)
    }

    /// Prompt tuning: MSA over `[p ⊕ h]` for query, key and value (no residual).
    pub fn prompt_pro_t(&self, layer: usize, p: &Mat, h: &FeatureSeq) -> Result<FeatureSeq> {
        Ok(self.msa_forward(layer, h, Some((PromptMode::ProT, p)), false, None)?.0)
    }

    /// Prefix tuning: MSA of `h` against `[p_K ⊕ h]` keys and `[p_V ⊕ h]` values (no residual).
    pub fn prompt_pre_t(&self, layer: usize, p: &Mat, h: &FeatureSeq) -> Result<FeatureSeq> {
        Ok(self.msa_forward(layer, h, Some((PromptMode::PreT, p)), false, None)?.0)
    }

    /// One backbone layer: attention (with the prompt function when given) plus the
    /// residual from the query rows.
    pub fn msa_layer(&self, layer: usize, h: &FeatureSeq, prompt: Option<(PromptMode, &Mat)>) -> Result<FeatureSeq> {
        if prompt.is_some() && !self.cfg.attach_layers.contains(&layer) {
            return Err(Error::Config(format!("layer {layer} is not an attach layer")));
        }
        Ok(self.msa_forward(layer, h, prompt, true, None)?.0)
    }

    fn check_stack(&self, prompts: &[LayerPrompt<'_>]) -> Result<()> {
        if prompts.is_empty() {
            return Ok(());
        }
        let mut layers: Vec<usize> = prompts.iter().map(|p| p.layer).collect();
        layers.sort_unstable();
        let mut attach = self.cfg.attach_layers.clone();
        attach.sort_unstable();
        attach.dedup();
        if layers != attach {
            return Err(Error::Config(format!(
                "prompts supplied for layers {layers:?}, attach layers are {attach:?}"
            )));
        }
        Ok(())
    }

    /// `f_p(x)`: class-token row after the full layer stack, plus the tape for
    /// prompt gradients.
    pub fn forward_features(&self, x: &Mat, prompts: &[LayerPrompt<'_>]) -> Result<(Vec<f64>, ForwardTape)> {
        self.check_stack(prompts)?;
        let mut h = self.embed(x)?;
        let mut cls_pos = 0usize;
        let m = self.cfg.layers;
        let mut tapes = Vec::with_capacity(m);
        for layer in 0..m {
            let prompt = prompts
                .iter()
                .find(|p| p.layer == layer)
                .map(|p| (p.mode, p.prompt));
            let shift = match prompt {
                Some((PromptMode::ProT, p)) => p.rows(),
                _ => 0,
            };
            let last = layer + 1 == m;
            let query_row = last.then_some(cls_pos + shift);
            let (out, tape) = self.msa_forward(layer, &h, prompt, true, query_row)?;
            tapes.push(tape);
            h = out;
            cls_pos = if last { 0 } else { cls_pos + shift };
        }
        let mut prompt_layers: Vec<usize> = prompts.iter().map(|p| p.layer).collect();
        prompt_layers.sort_unstable();
        Ok((
            h.row(cls_pos).to_vec(),
            ForwardTape {
                layers: tapes,
                prompt_layers,
                dim: self.cfg.dim,
            },
        ))
    }

    /// Feature without the tape.
    pub fn features(&self, x: &Mat, prompts: &[LayerPrompt<'_>]) -> Result<Vec<f64>> {
        Ok(self.forward_features(x, prompts)?.0)
    }

    fn layer_backward(&self, layer: usize, tape: &LayerTape, d_out: &Mat) -> Result<(Mat, Option<Mat>)> {
        let w = &self.layers[layer];
        let d = self.cfg.dim;
        let dh = self.cfg.head_dim();
        let d_concat = d_out.matmul_nt(&w.wo)?;
        let nk = tape.k[0].rows();
        let mut dq_in = Mat::zeros(d_out.rows(), d);
        let mut dk_in = Mat::zeros(nk, d);
        let mut dv_in = Mat::zeros(nk, d);
        for j in 0..self.cfg.heads {
            let d_head = d_concat.col_block(j * dh, dh);
            let g = attention_backward(&tape.q[j], &tape.k[j], &tape.v[j], &tape.weights[j], &d_head)?;
            dq_in.add_assign(&g.dq.matmul_nt(&w.wq[j])?);
            dk_in.add_assign(&g.dk.matmul_nt(&w.wk[j])?);
            dv_in.add_assign(&g.dv.matmul_nt(&w.wv[j])?);
        }
        // residual path
        dq_in.add_assign(d_out);

        let q_len = match tape.prompt {
            Some((PromptMode::ProT, lp)) => tape.n_in + lp,
            _ => tape.n_in,
        };
        let mut dq_full = Mat::zeros(q_len, d);
        match tape.query_row {
            Some(r) => dq_full.row_mut(r).copy_from_slice(dq_in.row(0)),
            None => dq_full = dq_in,
        }

        match tape.prompt {
            None => {
                dq_full.add_assign(&dk_in);
                dq_full.add_assign(&dv_in);
                Ok((dq_full, None))
            }
            Some((PromptMode::ProT, lp)) => {
                dq_full.add_assign(&dk_in);
                dq_full.add_assign(&dv_in);
                let dp = dq_full.slice_rows(0, lp);
                let dh_ = dq_full.slice_rows(lp, q_len);
                Ok((dh_, Some(dp)))
            }
            Some((PromptMode::PreT, lp)) => {
                let half = lp / 2;
                let mut dh_ = dq_full;
                dh_.add_assign(&dk_in.slice_rows(half, nk));
                dh_.add_assign(&dv_in.slice_rows(half, nk));
                let dp = dk_in.slice_rows(0, half).vstack(&dv_in.slice_rows(0, half))?;
                Ok((dh_, Some(dp)))
            }
        }
    }

    /// Gradients of a scalar w.r.t. every attached prompt, given
    /// `d_feature = ∂loss/∂f_p(x)`. Returned in ascending layer order.
    pub fn backward(&self, tape: &ForwardTape, d_feature: &[f64]) -> Result<Vec<(usize, Mat)>> {
        if d_feature.len() != tape.dim || tape.dim != self.cfg.dim || tape.layers.len() != self.cfg.layers {
            return Err(Error::Contract("forward tape does not belong to this backbone".into()));
        }
        let Some(&lowest) = tape.prompt_layers.first() else {
            return Ok(Vec::new());
        };
        let mut grads = Vec::new();
        let mut d_out = Mat::row_vector(d_feature);
        for layer in (lowest..self.cfg.layers).rev() {
            let (dh, dp) = self.layer_backward(layer, &tape.layers[layer], &d_out)?;
            if let Some(dp) = dp {
                grads.push((layer, dp));
            }
            d_out = dh;
        }
        grads.reverse();
        Ok(grads)
    }

    /// SHA-256 over every weight, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &[f64]| {
            for v in m {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        feed(self.w_emb.data());
        feed(self.pos.data());
        feed(&self.cls);
        for w in &self.layers {
            for m in w.wq.iter().chain(&w.wk).chain(&w.wv) {
                feed(m.data());
            }
            feed(w.wo.data());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Binary cache form: header with dimensions, then little-endian `f64` weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut out = Vec::new();
        out.extend_from_slice(BACKBONE_MAGIC);
        out.extend_from_slice(&BACKBONE_VERSION.to_le_bytes());
        for v in [c.d_in, c.n_tokens, c.dim, c.layers, c.heads] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(c.attach_layers.len() as u32).to_le_bytes());
        for &l in &c.attach_layers {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        let mut push = |m: &[f64]| {
            for v in m {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.w_emb.data());
        push(self.pos.data());
        push(&self.cls);
        for w in &self.layers {
            for m in w.wq.iter().chain(&w.wk).chain(&w.wv) {
                push(m.data());
            }
            push(w.wo.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != BACKBONE_MAGIC {
            return Err(Error::Codec {
                offset: 0,
                msg: "bad backbone magic".into(),
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != BACKBONE_VERSION {
            return Err(Error::Codec {
                offset: 4,
                msg: format!("unsupported backbone version {version}"),
            });
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n_attach = r.u32()? as usize;
        let attach_layers = (0..n_attach).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let cfg = BackboneConfig {
            d_in: dims[0],
            n_tokens: dims[1],
            dim: dims[2],
            layers: dims[3],
            heads: dims[4],
            seed,
            attach_layers,
        };
        cfg.validate()?;
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let w_emb = r.mat(cfg.d_in, d)?;
        let pos = r.mat(cfg.n_tokens + 1, d)?;
        let cls = r.mat(1, d)?.into_data();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let heads = |r: &mut ByteReader| (0..cfg.heads).map(|_| r.mat(d, dh)).collect::<Result<Vec<_>>>();
            let wq = heads(&mut r)?;
            let wk = heads(&mut r)?;
            let wv = heads(&mut r)?;
            let wo = r.mat(d, d)?;
            layers.push(MsaWeights { wq, wk, wv, wo });
        }
        if r.pos != bytes.len() {
            return Err(Error::Codec {
                offset: r.pos,
                msg: "trailing bytes after backbone".into(),
            });
        }
        FrozenBackbone::from_parts(cfg, w_emb, pos, cls, layers)
    }
}

const BACKBONE_MAGIC: &[u8; 4] = b"PIPB";
const BACKBONE_VERSION: u16 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Codec {
                offset: self.pos,
                msg: format!("truncated: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Mat::from_vec(rows, cols, data)
    }
}
