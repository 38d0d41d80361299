use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::capture::{AttentionCapture, CaptureMode};
use super::head::{HeadIds, HeadSpec};
use super::{ModelConfig, ModelError, INIT_STD, LN_EPS};
use crate::data::{OrganSchema, OrganSet, ParticipantRecord};
use crate::math;
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Segment, Tensor, Var};

pub(crate) fn init_scaled(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub(crate) fn init_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    init_scaled(rng, shape, INIT_STD)
}

/// One participant's view: which of its organs are shown to the encoder.
/// Every other organ slot is filled with that organ's mask embedding.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub record: &'a ParticipantRecord,
    pub visible: OrganSet,
}

impl<'a> ViewInput<'a> {
    /// All available organs visible.
    pub fn full(record: &'a ParticipantRecord) -> Self {
        Self {
            record,
            visible: record.availability(),
        }
    }

    /// Available organs minus `mask`; `mask` must only name available organs.
    pub fn masked(record: &'a ParticipantRecord, mask: OrganSet) -> Result<Self, ModelError> {
        let avail = record.availability();
        if !mask.is_subset(avail) {
            return Err(ModelError::Contract {
                id: record.id.clone(),
                msg: format!("mask {:?} names unavailable organs", mask.difference(avail)),
            });
        }
        Ok(Self {
            record,
            visible: avail.difference(mask),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of the encoder and its head. Parameter values live in a
/// [`ParamStore`]; student and teacher stores built from one layout have
/// identical manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    schema: OrganSchema,
    head_spec: HeadSpec,
    cape_w: Vec<ParamId>,
    cape_b: Vec<ParamId>,
    queries: ParamId,
    cape_wq: ParamId,
    cape_wk: ParamId,
    cape_wv: ParamId,
    cls: ParamId,
    mask: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
    head: HeadIds,
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// `[B × d]` final-normed CLS outputs.
    pub cls: Var,
    /// `[B·(N+1) × d]` final-normed sequence.
    pub tokens: Var,
    /// `[B·(N+1) × d]` residual stream before the final norm.
    pub stream: Var,
    /// One capture per participant (empty unless requested).
    pub captures: Vec<AttentionCapture>,
}

impl Encoder {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn new(
        config: ModelConfig,
        schema: OrganSchema,
        head_spec: HeadSpec,
        seed: u64,
    ) -> Result<(Self, ParamStore), ModelError> {
        config.validate()?;
        if head_spec.out_dim() == 0 {
            return Err(ModelError::Config("head output width must be positive".into()));
        }
        let d = config.d;
        let mut rng = stream(seed, Purpose::Init);
        let mut s = ParamStore::new();
        let cape_std = 1.0 / math::sqrt(d as f64);

        let mut cape_w = Vec::new();
        let mut cape_b = Vec::new();
        for spec in schema.organs() {
            let dim = spec.feature_dim;
            cape_w.push(s.add(
                &format!("cape.{}.w", spec.name),
                init_scaled(&mut rng, &[dim, d], cape_std),
                true,
            ));
            cape_b.push(s.add(
                &format!("cape.{}.b", spec.name),
                init_normal(&mut rng, &[dim, d]),
                false,
            ));
        }
        let n = schema.n_tokens();
        let queries = s.add("cape.queries", init_scaled(&mut rng, &[n, d], cape_std), false);
        let cape_wq = s.add("cape.wq", init_scaled(&mut rng, &[d, d], cape_std), true);
        let cape_wk = s.add("cape.wk", init_scaled(&mut rng, &[d, d], cape_std), true);
        let cape_wv = s.add("cape.wv", init_scaled(&mut rng, &[d, d], cape_std), true);
        let cls = s.add("seq.cls", init_normal(&mut rng, &[1, d]), false);
        let mask = s.add("seq.mask", init_normal(&mut rng, &[schema.len(), d]), false);
        let pos = s.add("seq.pos", init_normal(&mut rng, &[n, d]), false);

        let blocks = (0..config.layers)
            .map(|l| {
                let p = |n: &str| format!("block{l}.{n}");
                let ones = Tensor::full(&[d], 1.0);
                let ln1 = (
                    s.add(&p("ln1.g"), ones.clone(), false),
                    s.add(&p("ln1.b"), Tensor::zeros(&[d]), false),
                );
                let wq = s.add(&p("attn.wq"), init_normal(&mut rng, &[d, d]), true);
                let wk = s.add(&p("attn.wk"), init_normal(&mut rng, &[d, d]), true);
                let wv = s.add(&p("attn.wv"), init_normal(&mut rng, &[d, d]), true);
                let wo = s.add(&p("attn.wo"), init_normal(&mut rng, &[d, d]), true);
                let bo = s.add(&p("attn.bo"), Tensor::zeros(&[d]), false);
                let ln2 = (
                    s.add(&p("ln2.g"), ones, false),
                    s.add(&p("ln2.b"), Tensor::zeros(&[d]), false),
                );
                let w1 = s.add(&p("mlp.w1"), init_normal(&mut rng, &[d, 4 * d]), true);
                let b1 = s.add(&p("mlp.b1"), Tensor::zeros(&[4 * d]), false);
                let w2 = s.add(&p("mlp.w2"), init_normal(&mut rng, &[4 * d, d]), true);
                let b2 = s.add(&p("mlp.b2"), Tensor::zeros(&[d]), false);
                BlockIds {
                    ln1,
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    ln2,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let norm = (
            s.add("norm.g", Tensor::full(&[d], 1.0), false),
            s.add("norm.b", Tensor::zeros(&[d]), false),
        );
        let head = HeadIds::build(&mut s, &mut rng, d, &head_spec);
        let enc = Self {
            config,
            schema,
            head_spec,
            cape_w,
            cape_b,
            queries,
            cape_wq,
            cape_wk,
            cape_wv,
            cls,
            mask,
            pos,
            blocks,
            norm,
            head,
        };
        Ok((enc, s))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &OrganSchema {
        &self.schema
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head_spec
    }

    /// The weight-normalized last head layer (distillation head only).
    pub fn head_last_layer(&self) -> Option<ParamId> {
        self.head.last()
    }

    /// Sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.schema.n_tokens() + 1
    }

    fn check_view(&self, v: &ViewInput<'_>) -> Result<(), ModelError> {
        let r = v.record;
        let err = |msg: alloc::string::String| ModelError::Contract { id: r.id.clone(), msg };
        if r.organs.len() != self.schema.len() {
            return Err(err(format!(
                "{} organ slots, schema has {}",
                r.organs.len(),
                self.schema.len()
            )));
        }
        for o in v.visible.iter() {
            let spec = self
                .schema
                .organs()
                .get(o)
                .ok_or_else(|| err(format!("organ index {o} out of range")))?;
            match &r.organs[o] {
                None => return Err(err(format!("organ {} is not available", spec.name))),
                Some(x) if x.len() != spec.feature_dim => {
                    return Err(err(format!(
                        "organ {}: {} features, expected {}",
                        spec.name,
                        x.len(),
                        spec.feature_dim
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Cross-attention tokenization of every visible organ in the batch.
    /// Returns one output per organ (`None` when no participant shows it)
    /// and, per participant and organ, the first row of its tokens there.
    #[allow(clippy::type_complexity)]
    fn cape_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[ViewInput<'_>],
    ) -> (Vec<Option<Var>>, Vec<Vec<Option<usize>>>) {
        let queries = g.param(store, self.queries);
        let wq = g.param(store, self.cape_wq);
        let wk = g.param(store, self.cape_wk);
        let wv = g.param(store, self.cape_wv);
        let q = g.matmul(queries, wq);
        let scale = 1.0 / math::sqrt(self.config.d as f64);
        let mut offsets = vec![vec![None; self.schema.len()]; batch.len()];
        let mut outs = Vec::with_capacity(self.schema.len());
        for (o, spec) in self.schema.organs().iter().enumerate() {
            let members: Vec<usize> = (0..batch.len()).filter(|&b| batch[b].visible.contains(o)).collect();
            if members.is_empty() {
                outs.push(None);
                continue;
            }
            let dim = spec.feature_dim;
            let mut x = Vec::with_capacity(members.len() * dim);
            for &b in &members {
                x.extend_from_slice(batch[b].record.organs[o].as_ref().unwrap());
            }
            let w = g.param(store, self.cape_w[o]);
            let bias = g.param(store, self.cape_b[o]);
            let e = g.feature_embed(x, w, bias);
            let k = g.matmul(e, wk);
            let v = g.matmul(e, wv);
            let span = self.schema.span(o);
            let segments = (0..members.len())
                .map(|r| Segment {
                    q_start: span.start,
                    q_len: span.len(),
                    kv_start: r * dim,
                    kv_len: dim,
                })
                .collect();
            for (r, &b) in members.iter().enumerate() {
                offsets[b][o] = Some(r * span.len());
            }
            outs.push(Some(g.attention(q, k, v, segments, 1, scale)));
        }
        (outs, offsets)
    }

    /// Tokens `[K_o × d]` for a single organ vector.
    pub fn cape_encode(&self, g: &mut Graph, store: &ParamStore, organ: usize, x: &[f64]) -> Result<Var, ModelError> {
        let mut organs = vec![None; self.schema.len()];
        organs[organ] = Some(x.to_vec());
        let rec = ParticipantRecord::new("cape", organs);
        let view = ViewInput {
            record: &rec,
            visible: OrganSet::single(organ),
        };
        self.check_view(&view)?;
        let (outs, _) = self.cape_batch(g, store, &[view]);
        Ok(outs[organ].expect("organ is visible"))
    }

    /// Input sequence `[B·(N+1) × d]`: CLS, then per organ either its tokens
    /// or its broadcast mask embedding, plus the organ's position embeddings.
    pub fn assemble(&self, g: &mut Graph, store: &ParamStore, batch: &[ViewInput<'_>]) -> Result<Var, ModelError> {
        for v in batch {
            self.check_view(v)?;
        }
        let (outs, offsets) = self.cape_batch(g, store, batch);
        let cls = g.param(store, self.cls);
        let mask = g.param(store, self.mask);
        let pos = g.param(store, self.pos);
        let mut sources = vec![cls, mask];
        let mut source_of = vec![usize::MAX; self.schema.len()];
        for (o, z) in outs.iter().enumerate() {
            if let Some(z) = z {
                source_of[o] = sources.len();
                sources.push(*z);
            }
        }
        let n1 = self.seq_len();
        let mut index = Vec::with_capacity(batch.len() * n1);
        let mut pos_index = Vec::with_capacity(batch.len() * n1);
        for (b, view) in batch.iter().enumerate() {
            index.push(Some((0, 0)));
            pos_index.push(None);
            for (o, span) in self.schema.spans().iter().enumerate() {
                for k in 0..span.len() {
                    index.push(if view.visible.contains(o) {
                        Some((source_of[o], offsets[b][o].unwrap() + k))
                    } else {
                        Some((1, o))
                    });
                    pos_index.push(Some((0, span.start + k)));
                }
            }
        }
        let tokens = g.gather_rows(&sources, index);
        let positions = g.gather_rows(&[pos], pos_index);
        Ok(g.add(tokens, positions))
    }

    /// Runs the blocks and final norm over `batch_len` stacked sequences.
    /// Returns (normed output, residual stream, captures).
    pub fn backbone(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch_len: usize,
        capture: CaptureMode,
    ) -> (Var, Var, Vec<AttentionCapture>) {
        let n1 = self.seq_len();
        let (d, heads) = (self.config.d, self.config.heads);
        let scale = 1.0 / math::sqrt((d / heads) as f64);
        let segments: Vec<Segment> = (0..batch_len)
            .map(|b| Segment {
                q_start: b * n1,
                q_len: n1,
                kv_start: b * n1,
                kv_len: n1,
            })
            .collect();
        let mut captures: Vec<AttentionCapture> = match capture {
            CaptureMode::None => Vec::new(),
            _ => (0..batch_len)
                .map(|_| AttentionCapture {
                    layers: self.blocks.len(),
                    heads,
                    n: n1,
                    cls_rows: Vec::with_capacity(self.blocks.len() * heads * n1),
                    full: (capture == CaptureMode::Full).then(|| Vec::with_capacity(self.blocks.len() * n1 * n1)),
                })
                .collect(),
        };
        let mut x = x;
        for blk in &self.blocks {
            let (g1, b1) = (g.param(store, blk.ln1.0), g.param(store, blk.ln1.1));
            let h = g.layer_norm(x, g1, b1, LN_EPS);
            let wq = g.param(store, blk.wq);
            let wk = g.param(store, blk.wk);
            let wv = g.param(store, blk.wv);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let a = g.attention(q, k, v, segments.clone(), heads, scale);
            if capture != CaptureMode::None {
                record_capture(g, a, &mut captures);
            }
            let wo = g.param(store, blk.wo);
            let bo = g.param(store, blk.bo);
            let o = g.matmul(a, wo);
            let o = g.add_row(o, bo);
            x = g.add(x, o);

            let (g2, b2) = (g.param(store, blk.ln2.0), g.param(store, blk.ln2.1));
            let h = g.layer_norm(x, g2, b2, LN_EPS);
            let w1 = g.param(store, blk.w1);
            let bb1 = g.param(store, blk.b1);
            let w2 = g.param(store, blk.w2);
            let bb2 = g.param(store, blk.b2);
            let m = g.matmul(h, w1);
            let m = g.add_row(m, bb1);
            let m = g.gelu(m);
            let m = g.matmul(m, w2);
            let m = g.add_row(m, bb2);
            x = g.add(x, m);
        }
        let (ng, nb) = (g.param(store, self.norm.0), g.param(store, self.norm.1));
        let out = g.layer_norm(x, ng, nb, LN_EPS);
        (out, x, captures)
    }

    /// Full encoder pass over a batch of views.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[ViewInput<'_>],
        capture: CaptureMode,
    ) -> Result<EncoderOutput, ModelError> {
        let x0 = self.assemble(g, store, batch)?;
        let (tokens, stream, captures) = self.backbone(g, store, x0, batch.len(), capture);
        let n1 = self.seq_len();
        let cls = g.gather_rows(&[tokens], (0..batch.len()).map(|b| Some((0, b * n1))).collect());
        Ok(EncoderOutput {
            cls,
            tokens,
            stream,
            captures,
        })
    }

    /// Projection head on `[B × d]` CLS rows. `freeze_last` blocks gradient
    /// flow into the weight-normalized last layer.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, cls: Var, freeze_last: bool) -> Var {
        self.head.forward(g, store, cls, freeze_last)
    }

    /// Gradient-free CLS embeddings, one row per view.
    pub fn embed(&self, store: &ParamStore, views: &[ViewInput<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(256) {
            let mut g = Graph::no_grad();
            let enc = self.encode(&mut g, store, chunk, CaptureMode::None)?;
            let cls = g.value(enc.cls);
            out.extend((0..chunk.len()).map(|b| cls.row(b).to_vec()));
        }
        Ok(out)
    }

    /// Gradient-free attention captures, one per view.
    pub fn capture(
        &self,
        store: &ParamStore,
        views: &[ViewInput<'_>],
        mode: CaptureMode,
    ) -> Result<Vec<AttentionCapture>, ModelError> {
        let mut out = Vec::with_capacity(views.len());
        for chunk in views.chunks(256) {
            let mut g = Graph::no_grad();
            out.extend(self.encode(&mut g, store, chunk, mode)?.captures);
        }
        Ok(out)
    }

    /// Verifies that `store` was built for this layout.
    pub fn check_store(&self, store: &ParamStore) -> Result<(), ModelError> {
        let (_, fresh) = Self::new(self.config, self.schema.clone(), self.head_spec.clone(), 0)?;
        fresh.check_manifest(store)?;
        Ok(())
    }

    pub fn organ_name(&self, o: usize) -> alloc::string::String {
        self.schema.organ(o).name.to_string()
    }
}

fn record_capture(g: &Graph, attn: Var, captures: &mut [AttentionCapture]) {
    let (probs, segments, heads) = g.attention_probs(attn).expect("attention node");
    let mut at = 0;
    for (b, s) in segments.iter().enumerate() {
        let n = s.q_len;
        let cap = &mut captures[b];
        let block = &probs[at..at + heads * n * s.kv_len];
        for h in 0..heads {
            let m = &block[h * n * n..(h + 1) * n * n];
            cap.cls_rows.extend_from_slice(&m[..n]);
        }
        if let Some(full) = cap.full.as_mut() {
            let base = full.len();
            full.resize(base + n * n, 0.0);
            for h in 0..heads {
                let m = &block[h * n * n..(h + 1) * n * n];
                for (dst, src) in full[base..].iter_mut().zip(m) {
                    *dst += src / heads as f64;
                }
            }
        }
        at += heads * n * s.kv_len;
    }
}
