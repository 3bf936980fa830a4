//! The fusion regressor: projectors, a pre-norm transformer backbone with
//! optional LoRA adapters, pooling and an MLP head.
//!
//! External feature streams become virtual tokens placed right after BOS,
//! in the order subtitles, title, description (then the generated-text
//! embedding when enabled), then one token per visual row. Prompt bytes and
//! EOS follow.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use memfuse_core::features::FeatureBundle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{tokenize, FusionConfig, Pooling, PromptKind, TrainMode, BOS, VOCAB_SIZE};
use crate::tape::{LossParts, Tape, Tensor, Var};
use crate::FusionError;

type Result<T> = std::result::Result<T, FusionError>;

const ADAPTER_STREAM: u64 = 0x4c6f_5241_0000_0001;
const TASK_STREAM: u64 = 0x6865_6164_0000_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

pub const LORA_TARGETS: [LoraTarget; 7] = [
    LoraTarget::Q,
    LoraTarget::K,
    LoraTarget::V,
    LoraTarget::O,
    LoraTarget::Gate,
    LoraTarget::Up,
    LoraTarget::Down,
];

impl LoraTarget {
    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::Gate => "gate",
            LoraTarget::Up => "up",
            LoraTarget::Down => "down",
        }
    }

    /// `(d_out, d_in)` of the base weight.
    fn shape(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            LoraTarget::Gate | LoraTarget::Up => (d_ff, d_model),
            LoraTarget::Down => (d_model, d_ff),
            _ => (d_model, d_model),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Backbone { layer: Option<usize> },
    Adapter,
    Projector,
    PoolQuery,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Input widths of the external streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDims {
    /// `(stream name, dimension)` of every single-token stream, in fusion order.
    pub text: Vec<(String, usize)>,
    pub d_vis: usize,
    pub n_vis_tokens: usize,
}

impl StreamDims {
    pub fn from_bundle(b: &FeatureBundle, generated: Option<PromptKind>) -> Self {
        let mut text = vec![
            ("e5_subtitles".to_string(), b.e5_subtitles.len()),
            ("e5_title".to_string(), b.e5_title.len()),
            ("e5_description".to_string(), b.e5_description.len()),
        ];
        match generated {
            Some(PromptKind::Rationale) => text.push(("e5_rationale".into(), b.e5_rationale.len())),
            Some(PromptKind::Summary) => text.push(("e5_summary".into(), b.e5_summary.len())),
            None => {}
        }
        Self {
            text,
            d_vis: b.visual_block.first().map_or(0, Vec::len),
            n_vis_tokens: b.visual_block.len(),
        }
    }

    pub fn n_virtual(&self) -> usize {
        self.text.len() + if self.d_vis > 0 { self.n_vis_tokens } else { 0 }
    }
}

/// One tokenized, fusion-ready example.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    /// Prompt ids including BOS and EOS.
    pub tokens: Vec<usize>,
    pub text: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

pub fn prompt_text(title: &str, bundle: &FeatureBundle, kind: PromptKind) -> String {
    let generated = match kind {
        PromptKind::Rationale => &bundle.rationale_text,
        PromptKind::Summary => &bundle.summary_text,
    };
    format!("{title}\n{generated}")
}

#[derive(Debug, Clone)]
struct Layer {
    attn_norm: usize,
    ffn_norm: usize,
    w: [usize; 7],
    lora: Option<[(usize, usize); 7]>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    cfg: FusionConfig,
    dims: StreamDims,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    tok_emb: usize,
    final_norm: usize,
    layers: Vec<Layer>,
    projectors: Vec<(usize, usize)>,
    pool_query: Option<usize>,
    head: [usize; 4],
    unfrozen_layer: Option<usize>,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub predictions: Var,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
}

impl FusionModel {
    pub fn new(cfg: &FusionConfig, dims: StreamDims) -> Result<Self> {
        cfg.validate()?;
        let (d, dff) = (cfg.d_model, cfg.d_ff);
        let mut base_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ADAPTER_STREAM);
        let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TASK_STREAM);
        let mut m = Self {
            cfg: cfg.clone(),
            dims,
            params: Vec::new(),
            index: HashMap::new(),
            tok_emb: 0,
            final_norm: 0,
            layers: Vec::new(),
            projectors: Vec::new(),
            pool_query: None,
            head: [0; 4],
            unfrozen_layer: None,
        };
        m.tok_emb = m.add(
            "tok_emb",
            ParamKind::Embedding,
            normal(&mut base_rng, VOCAB_SIZE, d, 0.5),
        );
        for l in 0..cfg.n_layers {
            let kind = ParamKind::Backbone { layer: Some(l) };
            let attn_norm = m.add(&format!("layers.{l}.attn_norm"), kind, Tensor::new(1, d, vec![1.0; d]));
            let ffn_norm = m.add(&format!("layers.{l}.ffn_norm"), kind, Tensor::new(1, d, vec![1.0; d]));
            let mut w = [0; 7];
            for (i, t) in LORA_TARGETS.iter().enumerate() {
                let (o, inp) = t.shape(d, dff);
                let value = normal(&mut base_rng, o, inp, 1.0 / (inp as f64).sqrt());
                w[i] = m.add(&format!("layers.{l}.{}", t.name()), kind, value);
            }
            let lora = (cfg.mode == TrainMode::Lora).then(|| {
                let mut ab = [(0, 0); 7];
                for (i, t) in LORA_TARGETS.iter().enumerate() {
                    let (o, inp) = t.shape(d, dff);
                    let a = normal(&mut adapter_rng, cfg.lora_rank, inp, 0.02);
                    let ai = m.add(&format!("layers.{l}.{}.lora_a", t.name()), ParamKind::Adapter, a);
                    let bi = m.add(
                        &format!("layers.{l}.{}.lora_b", t.name()),
                        ParamKind::Adapter,
                        Tensor::zeros(o, cfg.lora_rank),
                    );
                    ab[i] = (ai, bi);
                }
                ab
            });
            m.layers.push(Layer {
                attn_norm,
                ffn_norm,
                w,
                lora,
            });
        }
        m.final_norm = m.add(
            "final_norm",
            ParamKind::Backbone { layer: None },
            Tensor::new(1, d, vec![1.0; d]),
        );

        let mut streams: Vec<(String, usize)> = m.dims.text.clone();
        if m.dims.d_vis > 0 {
            streams.push(("visual".into(), m.dims.d_vis));
        }
        for (name, dim) in streams {
            if dim == 0 {
                return Err(FusionError::StreamMismatch(format!("stream {name} has dimension 0")));
            }
            let w = normal(&mut task_rng, d, dim, 1.0 / (dim as f64).sqrt());
            let wi = m.add(&format!("proj.{name}.weight"), ParamKind::Projector, w);
            let bi = m.add(&format!("proj.{name}.bias"), ParamKind::Projector, Tensor::zeros(1, d));
            m.projectors.push((wi, bi));
        }
        if cfg.pooling == Pooling::Attention {
            m.pool_query = Some(m.add("pool.query", ParamKind::PoolQuery, Tensor::zeros(1, d)));
        }
        let hidden = cfg.head().hidden;
        let w1 = normal(&mut task_rng, hidden, d, 1.0 / (d as f64).sqrt());
        let w2 = normal(&mut task_rng, 1, hidden, 1.0 / (hidden as f64).sqrt());
        m.head = [
            m.add("head.w1", ParamKind::Head, w1),
            m.add("head.b1", ParamKind::Head, Tensor::zeros(1, hidden)),
            m.add("head.w2", ParamKind::Head, w2),
            m.add("head.b2", ParamKind::Head, Tensor::zeros(1, 1)),
        ];
        Ok(m)
    }

    fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> usize {
        let i = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &StreamDims {
        &self.dims
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Makes one backbone layer's base weights trainable. Intended for
    /// gradient verification; normal training never updates base weights.
    pub fn unfreeze_layer(&mut self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(FusionError::InvalidConfig(format!("no layer {layer}")));
        }
        self.unfrozen_layer = Some(layer);
        Ok(())
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        match self.params[i].kind {
            ParamKind::Projector | ParamKind::PoolQuery | ParamKind::Head => true,
            ParamKind::Adapter => self.cfg.mode == TrainMode::Lora,
            ParamKind::Backbone { layer } => layer.is_some() && layer == self.unfrozen_layer,
            ParamKind::Embedding => false,
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    pub fn set_param_value(&mut self, i: usize, value: Tensor) {
        assert_eq!(self.params[i].value.shape(), value.shape());
        self.params[i].value = value;
    }

    /// Builds a fusion input, checking stream widths and sequence length.
    pub fn prepare(&self, title: &str, bundle: &FeatureBundle, kind: PromptKind) -> Result<FusionInput> {
        let mut text = Vec::with_capacity(self.dims.text.len());
        for (name, dim) in &self.dims.text {
            let v = match name.as_str() {
                "e5_subtitles" => &bundle.e5_subtitles,
                "e5_title" => &bundle.e5_title,
                "e5_description" => &bundle.e5_description,
                "e5_rationale" => &bundle.e5_rationale,
                "e5_summary" => &bundle.e5_summary,
                other => return Err(FusionError::StreamMismatch(format!("unknown stream {other}"))),
            };
            if v.len() != *dim {
                return Err(FusionError::StreamMismatch(format!(
                    "{}: stream {name} has dimension {}, projector expects {dim}",
                    bundle.id,
                    v.len()
                )));
            }
            text.push(v.clone());
        }
        if self.dims.d_vis > 0
            && (bundle.visual_block.len() != self.dims.n_vis_tokens
                || bundle.visual_block.iter().any(|r| r.len() != self.dims.d_vis))
        {
            return Err(FusionError::StreamMismatch(format!(
                "{}: visual block shape differs from the projector configuration",
                bundle.id
            )));
        }
        let n_virtual = self.dims.n_virtual();
        if n_virtual + 2 > self.cfg.max_seq {
            return Err(FusionError::SequenceTooLong {
                len: n_virtual + 2,
                max: self.cfg.max_seq,
            });
        }
        let tokens = tokenize(&prompt_text(title, bundle, kind), self.cfg.max_seq - n_virtual);
        Ok(FusionInput {
            tokens,
            text,
            visual: if self.dims.d_vis > 0 {
                bundle.visual_block.clone()
            } else {
                Vec::new()
            },
        })
    }

    /// Records a forward pass over `inputs`. Trainable parameters require
    /// gradients when `with_grad`; LoRA dropout is applied only when a
    /// `dropout_rng` is given.
    pub fn forward(
        &self,
        inputs: &[&FusionInput],
        with_grad: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let mut tape = Tape::new();
        let pv: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), with_grad && self.is_trainable(i)))
            .collect();
        let mut outs = Vec::with_capacity(inputs.len());
        for input in inputs {
            outs.push(self.forward_one(&mut tape, &pv, input, &mut dropout_rng)?);
        }
        let predictions = tape.concat_rows(&outs);
        Ok(Forward {
            tape,
            params: pv,
            predictions,
        })
    }

    fn forward_one(
        &self,
        t: &mut Tape,
        pv: &[Var],
        input: &FusionInput,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n_virtual = self.dims.n_virtual();
        let len = n_virtual + input.tokens.len();
        if len > self.cfg.max_seq {
            return Err(FusionError::SequenceTooLong {
                len,
                max: self.cfg.max_seq,
            });
        }
        if input.text.len() != self.dims.text.len() || input.tokens.first() != Some(&BOS) || input.tokens.len() < 2 {
            return Err(FusionError::StreamMismatch("malformed fusion input".into()));
        }
        let eps = self.cfg.rms_norm_eps;
        let mut parts = vec![t.gather(pv[self.tok_emb], &[BOS])];
        for (k, v) in input.text.iter().enumerate() {
            let (w, b) = self.projectors[k];
            let x = t.constant(Tensor::row_vector(v.clone()));
            let y = t.matmul_t(x, pv[w]);
            parts.push(t.add_row(y, pv[b]));
        }
        if self.dims.d_vis > 0 {
            let (w, b) = *self.projectors.last().expect("visual projector");
            let x = t.constant(Tensor::from_rows(&input.visual));
            let y = t.matmul_t(x, pv[w]);
            parts.push(t.add_row(y, pv[b]));
        }
        parts.push(t.gather(pv[self.tok_emb], &input.tokens[1..]));
        let mut h = t.concat_rows(&parts);

        let hd = self.cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for layer in &self.layers {
            let n = t.rms_norm(h, eps);
            let a = t.mul_row(n, pv[layer.attn_norm]);
            let q = self.linear(t, pv, a, layer, 0, rng);
            let k = self.linear(t, pv, a, layer, 1, rng);
            let v = self.linear(t, pv, a, layer, 2, rng);
            let q = t.rope(q, hd);
            let k = t.rope(k, hd);
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for head in 0..self.cfg.n_heads {
                let qh = t.slice_cols(q, head * hd, hd);
                let kh = t.slice_cols(k, head * hd, hd);
                let vh = t.slice_cols(v, head * hd, hd);
                let s = t.matmul_t(qh, kh);
                let s = t.scale(s, inv_sqrt);
                let p = t.softmax(s, self.cfg.causal);
                heads.push(t.matmul(p, vh));
            }
            let o = if heads.len() == 1 {
                heads[0]
            } else {
                t.concat_cols(&heads)
            };
            let o = self.linear(t, pv, o, layer, 3, rng);
            h = t.add(h, o);

            let n = t.rms_norm(h, eps);
            let f = t.mul_row(n, pv[layer.ffn_norm]);
            let g = self.linear(t, pv, f, layer, 4, rng);
            let u = self.linear(t, pv, f, layer, 5, rng);
            let g = t.silu(g);
            let m = t.mul(g, u);
            let down = self.linear(t, pv, m, layer, 6, rng);
            h = t.add(h, down);
        }
        let n = t.rms_norm(h, eps);
        let hn = t.mul_row(n, pv[self.final_norm]);
        let pooled = match self.pool_query {
            None => t.mean_rows(hn),
            Some(qi) => {
                let logits = t.matmul_t(pv[qi], hn);
                let w = t.softmax(logits, false);
                t.matmul(w, hn)
            }
        };
        let [w1, b1, w2, b2] = self.head;
        let z = t.matmul_t(pooled, pv[w1]);
        let z = t.add_row(z, pv[b1]);
        let z = t.gelu(z);
        let o = t.matmul_t(z, pv[w2]);
        let o = t.add_row(o, pv[b2]);
        Ok(t.sigmoid(o))
    }

    fn linear(
        &self,
        t: &mut Tape,
        pv: &[Var],
        x: Var,
        layer: &Layer,
        target: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let y = t.matmul_t(x, pv[layer.w[target]]);
        let Some(lora) = &layer.lora else { return y };
        let (a, b) = lora[target];
        let p = self.cfg.lora_dropout;
        let xin = match rng.as_deref_mut() {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let n = t.value(x).data.len();
                let mask = (0..n).map(|_| if r.random::<f64>() < p { 0.0 } else { keep }).collect();
                t.mul_const(x, mask)
            }
            _ => x,
        };
        let z = t.matmul_t(xin, pv[a]);
        let u = t.matmul_t(z, pv[b]);
        let u = t.scale(u, self.cfg.lora().scale());
        t.add(y, u)
    }

    /// Predictions in `(0, 1)`, without dropout.
    pub fn predict(&self, inputs: &[&FusionInput]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let f = self.forward(chunk, false, None)?;
            out.extend_from_slice(&f.tape.value(f.predictions).data);
        }
        Ok(out)
    }

    /// Composite loss of a recorded forward pass.
    pub fn loss(&self, f: &mut Forward, targets: &[f64]) -> Result<(Var, LossParts)> {
        if targets.len() < 2 {
            return Err(FusionError::BatchTooSmall { n: targets.len() });
        }
        Ok(f.tape.composite_loss(f.predictions, targets, self.cfg.lambda))
    }

    /// A plain model whose target weights are `W + (alpha/r) B A`.
    pub fn lora_merge(&self) -> Result<FusionModel> {
        if !self.has_lora() {
            return Err(FusionError::NotLoraModel);
        }
        let cfg = FusionConfig {
            mode: TrainMode::Frozen,
            ..self.cfg.clone()
        };
        let mut merged = FusionModel::new(&cfg, self.dims.clone())?;
        let scale = self.cfg.lora().scale();
        for p in &self.params {
            if let Some(&i) = merged.index.get(&p.name) {
                merged.params[i].value = p.value.clone();
            }
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let lora = layer.lora.expect("checked above");
            for (k, &(a, b)) in lora.iter().enumerate() {
                let ba = self.params[b].value.matmul(&self.params[a].value);
                let w = &mut merged.params[merged.layers[li].w[k]].value;
                w.data.iter_mut().zip(&ba.data).for_each(|(x, d)| *x += scale * d);
            }
        }
        Ok(merged)
    }

    /// Writes every parameter as `(name, shape, little-endian f64 values)`.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        write_tensors(path, &named)
    }

    /// Loads parameter values; names and shapes must match this model exactly.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = read_tensors(path)?;
        if tensors.len() != self.params.len() {
            return Err(FusionError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| FusionError::Checkpoint(format!("unexpected tensor {name}")))?;
            if self.params[i].value.shape() != t.shape() {
                return Err(FusionError::Checkpoint(format!("shape mismatch for {name}")));
            }
            self.params[i].value = t;
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"MFCKPT01";

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let io = |e: std::io::Error| FusionError::Io(e.to_string());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FusionError::Io(e.to_string()))?;
    let corrupt = || FusionError::Checkpoint("truncated or corrupt checkpoint".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(corrupt)?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(FusionError::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt())?;
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).ok_or_else(corrupt)?;
        let raw = take(n.checked_mul(8).ok_or_else(corrupt)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)));
    }
    if pos != bytes.len() {
        return Err(FusionError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}
