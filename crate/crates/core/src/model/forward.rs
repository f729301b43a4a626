//! Teacher-forced training forwards on the autodiff tape.
//!
//! Training splits the work in two so the biasing list is encoded once per
//! batch: a [`BiasContext`] graph turns list spellings into the vector table
//! V, and each utterance then gets its own loss graph that consumes V's
//! values as a leaf. After the utterance backwards run (in parallel if the
//! caller likes), their summed dV seeds the context graph's backward, which
//! finishes the chain into the adapter weights. Per-utterance graphs also
//! make gradient accumulation order independent of thread scheduling: the
//! trainer adds them up in utterance order.

use super::{sinusoid_rows, Model, Partition};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, BufId, Graph};
use crate::tensor::{Real, Tensor};
use crate::vocab::{EOS, PAD, SOS};
use std::collections::HashMap;

struct Ctx<'m, T: Real> {
    g: Graph<T>,
    model: &'m Model<T>,
    seen: HashMap<String, BufId>,
    param_ids: Vec<(usize, BufId)>,
}

impl<'m, T: Real> Ctx<'m, T> {
    fn new(model: &'m Model<T>) -> Self {
        Ctx {
            g: Graph::new(),
            model,
            seen: HashMap::new(),
            param_ids: Vec::new(),
        }
    }

    /// Registers a store parameter into the graph once, tracking it for
    /// gradient extraction.
    fn p(&mut self, name: &str) -> BufId {
        if let Some(&id) = self.seen.get(name) {
            return id;
        }
        let idx = self
            .model
            .store
            .index_of(name)
            .unwrap_or_else(|_| panic!("parameter {name:?} missing from schema"));
        let (_, part, t) = self.model.store.entry(idx);
        let id = self.g.param(t, part == Partition::Trainable);
        self.seen.insert(name.to_string(), id);
        self.param_ids.push((idx, id));
        id
    }

    fn linear(&mut self, x: BufId, w: &str, b: Option<&str>) -> BufId {
        let wi = self.p(w);
        let y = self.g.matmul(x, wi, true);
        match b {
            Some(bn) => {
                let bi = self.p(bn);
                self.g.add_row(y, bi)
            }
            None => y,
        }
    }

    fn norm(&mut self, x: BufId, prefix: &str) -> BufId {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.layer_norm(x, g, b)
    }

    /// Multi-head attention: query rows from `q_in`, keys/values from
    /// `kv_in`, heads as column slices of one projection.
    fn mha(
        &mut self,
        q_in: BufId,
        kv_in: BufId,
        heads: usize,
        head_dim: usize,
        prefix: &str,
        mask: &AttnMask,
    ) -> Result<BufId> {
        let q = self.linear(q_in, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")));
        let k = self.linear(kv_in, &format!("{prefix}.wk"), Some(&format!("{prefix}.bk")));
        let v = self.linear(kv_in, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")));
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * head_dim, head_dim);
            let kh = self.g.slice_cols(k, h * head_dim, head_dim);
            let vh = self.g.slice_cols(v, h * head_dim, head_dim);
            parts.push(self.g.scaled_dot_attention(qh, kh, vh, mask)?);
        }
        let cat = self.g.concat_cols(&parts);
        Ok(self.linear(cat, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo"))))
    }

    fn mlp(&mut self, x: BufId, prefix: &str) -> BufId {
        let h = self.linear(x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")));
        let a = self.g.gelu(h);
        self.linear(a, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
    }

    /// Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x)).
    fn encoder_block(
        &mut self,
        x: BufId,
        prefix: &str,
        heads: usize,
        head_dim: usize,
        mask: &AttnMask,
    ) -> Result<BufId> {
        let n1 = self.norm(x, &format!("{prefix}.ln1"));
        let a = self.mha(n1, n1, heads, head_dim, &format!("{prefix}.self"), mask)?;
        let x = self.g.add(x, a);
        let n2 = self.norm(x, &format!("{prefix}.ln2"));
        let m = self.mlp(n2, &format!("{prefix}.mlp"));
        Ok(self.g.add(x, m))
    }

    fn decoder_block(&mut self, x: BufId, memory: BufId, prefix: &str) -> Result<BufId> {
        let heads = self.model.cfg.heads;
        let hd = self.model.head_dim();
        let n1 = self.norm(x, &format!("{prefix}.ln1"));
        let a = self.mha(
            n1,
            n1,
            heads,
            hd,
            &format!("{prefix}.self"),
            &AttnMask::Causal,
        )?;
        let x = self.g.add(x, a);
        let n2 = self.norm(x, &format!("{prefix}.ln2"));
        let c = self.mha(
            n2,
            memory,
            heads,
            hd,
            &format!("{prefix}.cross"),
            &AttnMask::Full,
        )?;
        let x = self.g.add(x, c);
        let n3 = self.norm(x, &format!("{prefix}.ln3"));
        let m = self.mlp(n3, &format!("{prefix}.mlp"));
        Ok(self.g.add(x, m))
    }

    fn positions(&mut self, table: &str, len: usize) -> BufId {
        let pos = self.p(table);
        let idx: Vec<usize> = (0..len).collect();
        self.g.gather(pos, &idx)
    }

    /// Features to encoder memory (frames, d_model).
    fn encode(&mut self, feats: &Tensor<T>) -> Result<BufId> {
        let shape = feats.shape();
        if shape.len() != 2 || shape[1] != self.model.cfg.feat_dim {
            return Err(Error::Model(format!(
                "features are (frames, {}), got {shape:?}",
                self.model.cfg.feat_dim
            )));
        }
        let t = shape[0];
        if t == 0 || t > self.model.cfg.max_len {
            return Err(Error::Model(format!(
                "{t} frames outside 1..={}",
                self.model.cfg.max_len
            )));
        }
        let xin = self.g.input(t, shape[1], feats.data().to_vec());
        let proj = self.linear(xin, "enc.in.w", Some("enc.in.b"));
        let pos = self.positions("enc.pos", t);
        let mut x = self.g.add(proj, pos);
        let heads = self.model.cfg.heads;
        let hd = self.model.head_dim();
        for l in 0..self.model.cfg.enc_layers {
            x = self.encoder_block(x, &format!("enc.l{l}"), heads, hd, &AttnMask::Full)?;
        }
        Ok(self.norm(x, "enc.lnf"))
    }

    /// Decoder states U' (len, d_model) over input ids, with the extended
    /// embedding when a dynamic table is present.
    fn decode_states(
        &mut self,
        in_ids: &[u32],
        dyn_table: Option<BufId>,
        memory: BufId,
    ) -> Result<BufId> {
        let l = in_ids.len();
        if l == 0 || l > self.model.cfg.max_len {
            return Err(Error::Model(format!(
                "{l} decoder positions outside 1..={}",
                self.model.cfg.max_len
            )));
        }
        let k = self.model.cfg.vocab;
        let embed = self.p("dec.embed");
        let e = self.g.select_embed(embed, dyn_table, in_ids, k);
        let pos = self.positions("dec.pos", l);
        let mut x = self.g.add(e, pos);
        for layer in 0..self.model.cfg.dec_layers {
            x = self.decoder_block(x, memory, &format!("dec.l{layer}"))?;
        }
        Ok(self.norm(x, "dec.lnf"))
    }

    /// One biasing word: spelling tokens through the adapter encoder to a
    /// single pooled vector (1, d_bias).
    fn bias_word_vector(&mut self, spelling: &[u32]) -> Result<BufId> {
        let cfg = &self.model.cfg;
        if spelling.is_empty() {
            return Err(Error::Model("empty biasing-word spelling".into()));
        }
        if spelling.iter().any(|&id| id as usize >= cfg.vocab) {
            return Err(Error::Model(format!(
                "biasing spelling {spelling:?} outside the static inventory"
            )));
        }
        if spelling.len() > cfg.max_len {
            return Err(Error::Model("biasing spelling exceeds max_len".into()));
        }
        let table = self.p("bias.embed");
        let idx: Vec<usize> = spelling.iter().map(|&i| i as usize).collect();
        let mut x = self.g.gather(table, &idx);
        if cfg.bias_positional {
            let pe = self
                .g
                .input(spelling.len(), cfg.d_bias, sinusoid_rows(spelling.len(), cfg.d_bias));
            x = self.g.add(x, pe);
        }
        let heads = cfg.bias_heads;
        let hd = self.model.bias_head_dim();
        for l in 0..cfg.bias_layers {
            x = self.encoder_block(x, &format!("bias.l{l}"), heads, hd, &AttnMask::Full)?;
        }
        let x = self.norm(x, "bias.lnf");
        Ok(self.g.mean_rows(x))
    }

    /// Extended logits: static head scores, plus scaled match scores against
    /// the bias key table when one is present.
    fn extended_probs(&mut self, uprime: BufId, keys: Option<BufId>) -> BufId {
        let alpha_s = self.linear(uprime, "out.w", Some("out.b"));
        let logits = match keys {
            Some(keys) => {
                let q = self.linear(uprime, "bias.wq", None);
                let scores = self.g.matmul(q, keys, true);
                let scaled = self
                    .g
                    .scale(scores, T::from_f64(1.0 / (self.model.cfg.d_model as f64).sqrt()));
                self.g.concat_cols(&[alpha_s, scaled])
            }
            None => alpha_s,
        };
        self.g.softmax_rows(logits, &AttnMask::Full)
    }
}

/// Per-batch encoding of the biasing list: V values plus the graph that
/// produced them, kept alive for the stitched backward pass.
pub struct BiasContext<T: Real> {
    graph: Graph<T>,
    v_buf: BufId,
    param_ids: Vec<(usize, BufId)>,
    pub n: usize,
    pub d_bias: usize,
    pub v_values: Vec<T>,
}

impl<T: Real> BiasContext<T> {
    /// Seeds dV (summed over utterances) and finishes backprop into the
    /// adapter weights.
    pub fn backprop(&mut self, dv: &[T]) {
        self.graph.backward_from(self.v_buf, dv);
    }

    /// (store index, gradient) pairs accumulated by [`backprop`](Self::backprop).
    pub fn param_grads(&self) -> Vec<(usize, &[T])> {
        self.param_ids
            .iter()
            .filter_map(|&(idx, id)| self.graph.grad(id).map(|g| (idx, g)))
            .collect()
    }
}

/// One utterance's teacher-forced loss graph.
pub struct BatchLoss<T: Real> {
    graph: Graph<T>,
    loss: BufId,
    v_buf: Option<BufId>,
    param_ids: Vec<(usize, BufId)>,
    /// Scored label positions (targets include the end marker).
    pub tokens: usize,
}

impl<T: Real> BatchLoss<T> {
    pub fn value(&self) -> f64 {
        self.graph.scalar(self.loss).to_f64()
    }

    pub fn run_backward(&mut self) {
        self.graph.backward(self.loss);
    }

    pub fn param_grads(&self) -> Vec<(usize, &[T])> {
        self.param_ids
            .iter()
            .filter_map(|&(idx, id)| self.graph.grad(id).map(|g| (idx, g)))
            .collect()
    }

    /// Gradient with respect to the shared V table (zeros when V exists but
    /// gathered no gradient).
    pub fn v_grad(&self, n: usize, d_bias: usize) -> Option<Vec<T>> {
        self.v_buf.map(|id| {
            self.graph
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::ZERO; n * d_bias])
        })
    }
}

impl<T: Real> Model<T> {
    /// Encodes biasing-list spellings into the shared V table, one graph per
    /// batch. Requires the adapter stage.
    pub fn bias_context(&self, spellings: &[Vec<u32>]) -> Result<BiasContext<T>> {
        if self.stage != super::Stage::Bias {
            return Err(Error::Model(
                "biasing context requires the adapter stage".into(),
            ));
        }
        if spellings.is_empty() {
            return Err(Error::Model(
                "biasing context needs at least one word; use None instead".into(),
            ));
        }
        let mut ctx = Ctx::new(self);
        let mut rows = Vec::with_capacity(spellings.len());
        for s in spellings {
            rows.push(ctx.bias_word_vector(s)?);
        }
        let v = ctx.g.concat_rows(&rows);
        let v_values = ctx.g.data(v).to_vec();
        Ok(BiasContext {
            graph: ctx.g,
            v_buf: v,
            param_ids: ctx.param_ids,
            n: spellings.len(),
            d_bias: self.cfg.d_bias,
            v_values,
        })
    }

    /// Teacher-forced loss for one utterance. `labels` are the target tokens
    /// without start/end markers, already rewritten against the biasing list
    /// when one is in play.
    pub fn utterance_loss(
        &self,
        feats: &Tensor<T>,
        labels: &[u32],
        bias: Option<&BiasContext<T>>,
        smoothing: f64,
    ) -> Result<BatchLoss<T>> {
        let (mut ctx, probs, v_buf, targets) = self.probs_graph(feats, labels, bias)?;
        let loss = ctx.g.cross_entropy(probs, &targets, PAD, smoothing)?;
        Ok(BatchLoss {
            graph: ctx.g,
            loss,
            v_buf,
            param_ids: ctx.param_ids,
            tokens: targets.len(),
        })
    }

    /// The per-position output distribution (len, K + N) under teacher
    /// forcing, for tests and diagnostics.
    pub fn utterance_probs(
        &self,
        feats: &Tensor<T>,
        labels: &[u32],
        bias: Option<&BiasContext<T>>,
    ) -> Result<Tensor<T>> {
        let (ctx, probs, _, _) = self.probs_graph(feats, labels, bias)?;
        let (r, c) = ctx.g.shape(probs);
        Ok(Tensor::new(vec![r, c], ctx.g.data(probs).to_vec()))
    }

    #[allow(clippy::type_complexity)]
    fn probs_graph(
        &self,
        feats: &Tensor<T>,
        labels: &[u32],
        bias: Option<&BiasContext<T>>,
    ) -> Result<(Ctx<'_, T>, BufId, Option<BufId>, Vec<u32>)> {
        let k = self.cfg.vocab;
        let n = bias.map(|b| b.n).unwrap_or(0);
        if labels.is_empty() {
            return Err(Error::Model("utterance has no labels".into()));
        }
        for &id in labels {
            if (id as usize) >= k + n {
                return Err(Error::Model(format!(
                    "label {id} outside extended inventory of {}",
                    k + n
                )));
            }
            if id == SOS || id == EOS || id == PAD {
                return Err(Error::Model(format!(
                    "label stream contains reserved marker {id}"
                )));
            }
        }
        let mut ctx = Ctx::new(self);

        // Shared V enters this graph as a leaf that tracks gradient, so the
        // utterance backward produces dV for the context graph to consume.
        let (v_buf, dyn_table, keys) = match bias {
            Some(b) => {
                let vt = Tensor::new(vec![b.n, b.d_bias], b.v_values.clone());
                let v = ctx.g.param(&vt, true);
                let we = ctx.p("bias.we");
                let dyn_table = ctx.g.matmul(v, we, true);
                let wk = ctx.p("bias.wk");
                let keys = ctx.g.matmul(v, wk, true);
                (Some(v), Some(dyn_table), Some(keys))
            }
            None => (None, None, None),
        };

        let memory = ctx.encode(feats)?;
        let mut in_ids = Vec::with_capacity(labels.len() + 1);
        in_ids.push(SOS);
        in_ids.extend_from_slice(labels);
        let uprime = ctx.decode_states(&in_ids, dyn_table, memory)?;
        let probs = ctx.extended_probs(uprime, keys);

        let mut targets = Vec::with_capacity(labels.len() + 1);
        targets.extend_from_slice(labels);
        targets.push(EOS);
        Ok((ctx, probs, v_buf, targets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Stage};
    use crate::rng::Streams;
    use crate::vocab::StaticVocab;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 5,
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_mult: 2,
            vocab: 56,
            max_len: 48,
            d_bias: 8,
            bias_layers: 1,
            bias_heads: 2,
            bias_ff_mult: 2,
            bias_positional: true,
            freeze_static_io: false,
        }
    }

    fn feats(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Streams::new(seed).stream("test-feats");
        Tensor::randn(vec![frames, dim], 1.0, &mut rng)
    }

    fn spell(vocab: &StaticVocab, words: &[&str]) -> Vec<Vec<u32>> {
        words.iter().map(|w| vocab.tokenize(w).unwrap()).collect()
    }

    #[test]
    fn loss_is_finite_and_tokens_counted() {
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 5).unwrap();
        let v = StaticVocab::chars();
        let labels = v.tokenize("cab").unwrap();
        let f = feats(12, 5, 1);
        let bl = m.utterance_loss(&f, &labels, None, 0.1).unwrap();
        assert!(bl.value().is_finite());
        assert!(bl.value() > 0.0);
        assert_eq!(bl.tokens, labels.len() + 1);
    }

    #[test]
    fn empty_list_reproduces_backbone_distribution_exactly() {
        // The static path must be bit-identical whether the model is in the
        // pretrain stage or the adapter stage with no list.
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 7).unwrap();
        let v = StaticVocab::chars();
        let labels = v.tokenize("dog house").unwrap();
        let f = feats(15, 5, 2);
        let p_pre = m.utterance_probs(&f, &labels, None).unwrap();
        let mb = m.attach_biasing(99).unwrap();
        let p_bias = mb.utterance_probs(&f, &labels, None).unwrap();
        assert_eq!(p_pre.shape(), p_bias.shape());
        for (a, b) in p_pre.data().iter().zip(p_bias.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adapter_garbage_cannot_touch_the_unbiased_path() {
        // Scribbling over every adapter weight must not move a single bit of
        // the no-list output.
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 11).unwrap();
        let v = StaticVocab::chars();
        let labels = v.tokenize("cat").unwrap();
        let f = feats(10, 5, 3);
        let mut mb = m.attach_biasing(1).unwrap();
        let before = mb.utterance_probs(&f, &labels, None).unwrap();
        for name in [
            "bias.embed",
            "bias.we",
            "bias.wq",
            "bias.wk",
            "bias.lnf.g",
        ] {
            for x in mb.store.get_mut(name).unwrap().data_mut() {
                *x = 1e6;
            }
        }
        let after = mb.utterance_probs(&f, &labels, None).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dynamic_embedding_row_is_we_times_v() {
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 13)
            .unwrap()
            .attach_biasing(14)
            .unwrap();
        let v = StaticVocab::chars();
        let ctxv = m
            .bias_context(&spell(&v, &["abc", "dog", "tiger"]))
            .unwrap();
        // Row 2 of the dynamic table must be exactly We @ v_2.
        let we = m.store.get("bias.we").unwrap();
        let (d, db) = (m.cfg.d_model, m.cfg.d_bias);
        let v2 = &ctxv.v_values[2 * db..3 * db];
        let mut want = vec![0.0f64; d];
        for i in 0..d {
            for j in 0..db {
                want[i] += we.data()[i * db + j] * v2[j];
            }
        }
        // Reach the dynamic row through the public embedding path: a graph
        // that selects dynamic id K+2.
        let mut g: crate::graph::Graph<f64> = crate::graph::Graph::new();
        let vt = Tensor::new(vec![ctxv.n, db], ctxv.v_values.clone());
        let vb = g.param(&vt, false);
        let web = g.param(we, false);
        let dyn_table = g.matmul(vb, web, true);
        let row = g.data(dyn_table)[2 * d..3 * d].to_vec();
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn each_list_word_owns_its_v_row() {
        // Changing word j changes row j of V and no other row.
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 17)
            .unwrap()
            .attach_biasing(18)
            .unwrap();
        let v = StaticVocab::chars();
        let a = m.bias_context(&spell(&v, &["cat", "dog", "fish"])).unwrap();
        let b = m.bias_context(&spell(&v, &["cat", "wolf", "fish"])).unwrap();
        let db = m.cfg.d_bias;
        for row in 0..3 {
            let same = a.v_values[row * db..(row + 1) * db]
                .iter()
                .zip(&b.v_values[row * db..(row + 1) * db])
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if row == 1 {
                assert!(!same, "changed word should change its row");
            } else {
                assert!(same, "row {row} should be untouched");
            }
        }
    }

    #[test]
    fn match_scores_scale_bilinearly_in_the_projections() {
        // Doubling both score projections quadruples the match scores: the
        // scores are bilinear in (query proj, key proj) and V itself does
        // not involve either. Softmax hides absolute logits, but the log
        // ratio of two dynamic slots in one row equals their score gap, so
        // the gap must scale by exactly 4.
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 19)
            .unwrap()
            .attach_biasing(20)
            .unwrap();
        let v = StaticVocab::chars();
        let spellings = spell(&v, &["cat", "dog"]);
        let f = feats(8, 5, 4);

        let ctx = m.bias_context(&spellings).unwrap();
        let rewritten: Vec<u32> = vec![m.cfg.vocab as u32];
        let p1 = m.utterance_probs(&f, &rewritten, Some(&ctx)).unwrap();

        let mut m2 = m;
        for name in ["bias.wq", "bias.wk"] {
            for x in m2.store.get_mut(name).unwrap().data_mut() {
                *x *= 2.0;
            }
        }
        let ctx2 = m2.bias_context(&spellings).unwrap();
        let p2 = m2.utterance_probs(&f, &rewritten, Some(&ctx2)).unwrap();

        let k = m2.cfg.vocab;
        let cols = k + 2;
        for row in 0..p1.shape()[0] {
            let gap1 = p1.data()[row * cols + k].ln() - p1.data()[row * cols + k + 1].ln();
            let gap2 = p2.data()[row * cols + k].ln() - p2.data()[row * cols + k + 1].ln();
            assert!(
                (4.0 * gap1 - gap2).abs() < 1e-9,
                "row {row}: gaps {gap1} vs {gap2}"
            );
        }
    }

    #[test]
    fn bias_gradients_flow_through_both_graphs() {
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 23)
            .unwrap()
            .attach_biasing(24)
            .unwrap();
        let v = StaticVocab::chars();
        let spellings = spell(&v, &["cat", "dog"]);
        let mut ctx = m.bias_context(&spellings).unwrap();
        let f = feats(9, 5, 5);
        let labels = vec![m.cfg.vocab as u32, v.id("_d").unwrap()];
        let mut bl = m.utterance_loss(&f, &labels, Some(&ctx), 0.0).unwrap();
        bl.run_backward();
        let dv = bl.v_grad(ctx.n, ctx.d_bias).unwrap();
        assert!(dv.iter().any(|g| g.abs() > 0.0), "dV must be nonzero");
        ctx.backprop(&dv);
        let grads = ctx.param_grads();
        assert!(!grads.is_empty());
        let embed_idx = m.store.index_of("bias.embed").unwrap();
        let got = grads
            .iter()
            .find(|(idx, _)| *idx == embed_idx)
            .expect("adapter embedding should receive gradient");
        assert!(got.1.iter().any(|g| g.abs() > 0.0));
        // Frozen backbone tensors must receive nothing from the utterance
        // graph.
        let frozen_idx = m.store.index_of("enc.in.w").unwrap();
        assert!(bl
            .param_grads()
            .iter()
            .all(|(idx, _)| *idx != frozen_idx));
    }

    #[test]
    fn rejects_malformed_inputs() {
        let m: Model<f64> = Model::new(tiny_cfg(), Stage::Pretrain, 29).unwrap();
        let v = StaticVocab::chars();
        let labels = v.tokenize("cat").unwrap();
        // Wrong feature width.
        assert!(m.utterance_loss(&feats(10, 4, 6), &labels, None, 0.0).is_err());
        // Labels out of range without a list.
        assert!(m
            .utterance_loss(&feats(10, 5, 7), &[56], None, 0.0)
            .is_err());
        // Reserved markers in the label stream.
        assert!(m
            .utterance_loss(&feats(10, 5, 8), &[SOS], None, 0.0)
            .is_err());
        // Adapter-stage constructs refuse the wrong stage.
        assert!(m.bias_context(&[vec![4]]).is_err());
    }
}
