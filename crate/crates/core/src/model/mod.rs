//! The frozen attention encoder-decoder backbone and its trainable
//! biasing adapters.
//!
//! A model exists in one of two stages. In [`Stage::Pretrain`] only the
//! backbone exists and every weight is trainable. [`Model::attach_biasing`]
//! then freezes the whole backbone and adds the adapter stack: a small
//! transformer that turns each biasing word's spelling into one vector, a
//! projection that converts those vectors into extra embedding rows, and a
//! pair of projections that score decoder states against the list. The
//! output distribution is a softmax over static classes plus one slot per
//! list word; with an empty list the extra slots simply do not exist and
//! the backbone's distribution is reproduced exactly.

mod checkpoint;
mod forward;
mod infer;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorRecord};
pub use forward::{BatchLoss, BiasContext};
pub use infer::{BiasTables, DecoderState, EncodedUtterance, StepOutput};
pub use params::{ParamStore, Partition};

use crate::error::{Error, Result};
use crate::rng::{StreamRng, Streams};
use crate::tensor::{Real, Tensor};
use crate::vocab::NUM_SPECIALS;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone only, everything trainable.
    Pretrain,
    /// Frozen backbone plus trainable biasing adapters.
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature width.
    pub feat_dim: usize,
    /// Backbone width.
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// MLP hidden width as a multiple of the block width.
    pub ff_mult: usize,
    /// Static output classes (the subword inventory size).
    pub vocab: usize,
    /// Positional table length; caps both frames and label length.
    pub max_len: usize,
    /// Biasing-encoder width.
    pub d_bias: usize,
    pub bias_layers: usize,
    pub bias_heads: usize,
    pub bias_ff_mult: usize,
    /// Add fixed sinusoidal positions to biasing-word spellings.
    pub bias_positional: bool,
    /// Keep the shared embedding table and static output head frozen during
    /// adapter training. By default they fine-tune alongside the adapters
    /// (starting from their backbone values); freezing them restores exact
    /// backbone behaviour on empty lists even after training.
    #[serde(default)]
    pub freeze_static_io: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 32,
            d_model: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_mult: 4,
            vocab: 56,
            max_len: 512,
            d_bias: 64,
            bias_layers: 2,
            bias_heads: 4,
            bias_ff_mult: 2,
            bias_positional: true,
            freeze_static_io: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            problems.push(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_bias == 0 || self.d_bias % self.bias_heads != 0 {
            problems.push(format!(
                "d_bias {} must be a positive multiple of bias_heads {}",
                self.d_bias, self.bias_heads
            ));
        }
        if self.vocab <= NUM_SPECIALS {
            problems.push(format!("vocab {} leaves no room for content", self.vocab));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.bias_layers == 0 {
            problems.push("layer counts must be positive".to_string());
        }
        if self.ff_mult == 0 || self.bias_ff_mult == 0 {
            problems.push("ff multipliers must be positive".to_string());
        }
        if self.feat_dim == 0 {
            problems.push("feat_dim must be positive".to_string());
        }
        if self.max_len < 4 {
            problems.push(format!("max_len {} is too small", self.max_len));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Model(problems.join("; ")))
        }
    }
}

enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear weights.
    Fan(usize),
    /// Fan-law bound shrunk by a gain. Used where the output must land at
    /// the scale of a trained embedding table rather than unit scale: a
    /// frozen decoder only behaves on inputs matching its own table, so
    /// projections feeding it start deliberately small.
    FanScaled(usize, f64),
    /// Gaussian(0, 0.02) for embedding-like tables.
    Table,
    Zero,
    One,
}

fn init_tensor<T: Real>(init: &Init, shape: Vec<usize>, rng: &mut StreamRng) -> Tensor<T> {
    match init {
        Init::Fan(fan_in) => {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, bound, rng)
        }
        Init::FanScaled(fan_in, gain) => {
            let bound = gain / (*fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, bound, rng)
        }
        Init::Table => Tensor::randn(shape, 0.02, rng),
        Init::Zero => Tensor::zeros(shape),
        Init::One => Tensor::full(shape, T::ONE),
    }
}

struct ParamSpec {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
    init: Init,
}

/// Shared layout of one transformer block's parameters. Linear weights are
/// stored (out, in) and applied as x @ W^T.
fn block_specs(specs: &mut Vec<ParamSpec>, prefix: &str, part: Partition, d: usize, ff: usize, cross: bool) {
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name,
            partition: part,
            shape,
            init,
        });
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), which: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{prefix}.{which}.{w}"), vec![d, d], Init::Fan(d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            add(format!("{prefix}.{which}.{b}"), vec![1, d], Init::Zero);
        }
    };
    add(format!("{prefix}.ln1.g"), vec![1, d], Init::One);
    add(format!("{prefix}.ln1.b"), vec![1, d], Init::Zero);
    attn(&mut add, "self");
    if cross {
        add(format!("{prefix}.ln2.g"), vec![1, d], Init::One);
        add(format!("{prefix}.ln2.b"), vec![1, d], Init::Zero);
        attn(&mut add, "cross");
    }
    let ln_mlp = if cross { "ln3" } else { "ln2" };
    add(format!("{prefix}.{ln_mlp}.g"), vec![1, d], Init::One);
    add(format!("{prefix}.{ln_mlp}.b"), vec![1, d], Init::Zero);
    add(format!("{prefix}.mlp.w1"), vec![ff * d, d], Init::Fan(d));
    add(format!("{prefix}.mlp.b1"), vec![1, ff * d], Init::Zero);
    add(format!("{prefix}.mlp.w2"), vec![d, ff * d], Init::Fan(ff * d));
    add(format!("{prefix}.mlp.b2"), vec![1, d], Init::Zero);
}

/// The full parameter schema for a stage; the one authority on names,
/// shapes, and partitions. Construction, checkpoint validation, and the
/// forward passes all key off these names.
fn expected_params(cfg: &ModelConfig, stage: Stage) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let backbone_part = match stage {
        Stage::Pretrain => Partition::Trainable,
        Stage::Bias => Partition::Frozen,
    };
    // The shared embedding table and static output head follow the
    // fine-tuning recipe: they keep training during the adapter stage
    // unless explicitly frozen.
    let shared_part = match stage {
        Stage::Pretrain => Partition::Trainable,
        Stage::Bias if cfg.freeze_static_io => Partition::Frozen,
        Stage::Bias => Partition::Trainable,
    };
    let mut specs = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: name.to_string(),
            partition: backbone_part,
            shape,
            init,
        });
    };

    add("enc.in.w", vec![d, cfg.feat_dim], Init::Fan(cfg.feat_dim));
    add("enc.in.b", vec![1, d], Init::Zero);
    add("enc.pos", vec![cfg.max_len, d], Init::Table);
    for l in 0..cfg.enc_layers {
        block_specs(
            &mut specs,
            &format!("enc.l{l}"),
            backbone_part,
            d,
            cfg.ff_mult,
            false,
        );
    }
    let mut add = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: name.to_string(),
            partition: backbone_part,
            shape,
            init,
        });
    };
    add("enc.lnf.g", vec![1, d], Init::One);
    add("enc.lnf.b", vec![1, d], Init::Zero);

    specs.push(ParamSpec {
        name: "dec.embed".to_string(),
        partition: shared_part,
        shape: vec![cfg.vocab, d],
        init: Init::Table,
    });
    let mut add = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: name.to_string(),
            partition: backbone_part,
            shape,
            init,
        });
    };
    add("dec.pos", vec![cfg.max_len, d], Init::Table);
    for l in 0..cfg.dec_layers {
        block_specs(
            &mut specs,
            &format!("dec.l{l}"),
            backbone_part,
            d,
            cfg.ff_mult,
            true,
        );
    }
    let mut add = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: name.to_string(),
            partition: backbone_part,
            shape,
            init,
        });
    };
    add("dec.lnf.g", vec![1, d], Init::One);
    add("dec.lnf.b", vec![1, d], Init::Zero);
    let mut add_shared = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec {
            name: name.to_string(),
            partition: shared_part,
            shape,
            init,
        });
    };
    add_shared("out.w", vec![cfg.vocab, d], Init::Fan(d));
    add_shared("out.b", vec![1, cfg.vocab], Init::Zero);

    if stage == Stage::Bias {
        let db = cfg.d_bias;
        let mut add = |name: &str, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec {
                name: name.to_string(),
                partition: Partition::Trainable,
                shape,
                init,
            });
        };
        add("bias.embed", vec![cfg.vocab, db], Init::Table);
        for l in 0..cfg.bias_layers {
            block_specs(
                &mut specs,
                &format!("bias.l{l}"),
                Partition::Trainable,
                db,
                cfg.bias_ff_mult,
                false,
            );
        }
        let mut add = |name: &str, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec {
                name: name.to_string(),
                partition: Partition::Trainable,
                shape,
                init,
            });
        };
        add("bias.lnf.g", vec![1, db], Init::One);
        add("bias.lnf.b", vec![1, db], Init::Zero);
        // Score and embedding projections; deliberately bias-free so an
        // all-zero adapter output contributes nothing.
        // The embedding projection feeds the frozen decoder directly, so it
        // starts an order of magnitude under the fan-law scale: pooled word
        // vectors are near unit scale while the trained input table sits
        // around 0.02-0.05 per coordinate.
        add("bias.we", vec![d, db], Init::FanScaled(db, 0.1));
        add("bias.wq", vec![d, d], Init::Fan(d));
        add("bias.wk", vec![d, db], Init::Fan(db));
    }
    specs
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh model with stage-appropriate partitions. Initialization is
    /// keyed per tensor name, so a parameter's starting values do not depend
    /// on what else exists.
    pub fn new(cfg: ModelConfig, stage: Stage, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let streams = Streams::new(seed);
        let mut store = ParamStore::new();
        for spec in expected_params(&cfg, stage) {
            let mut rng = streams.stream(&format!("init/{}", spec.name));
            let t = init_tensor(&spec.init, spec.shape, &mut rng);
            store.insert(&spec.name, spec.partition, t)?;
        }
        Ok(Model { cfg, stage, store })
    }

    /// Wraps an existing store (e.g. loaded from a checkpoint), validating
    /// it against the stage schema: exact same names, shapes, partitions.
    pub fn from_store(cfg: ModelConfig, stage: Stage, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let specs = expected_params(&cfg, stage);
        if specs.len() != store.len() {
            return Err(Error::Model(format!(
                "store holds {} tensors, stage expects {}",
                store.len(),
                specs.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let (name, part, t) = store.entry(i);
            if name != spec.name {
                return Err(Error::Model(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    spec.name
                )));
            }
            if part != spec.partition {
                return Err(Error::Model(format!(
                    "tensor {name:?} is in the wrong partition for this stage"
                )));
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Model(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Model { cfg, stage, store })
    }

    /// Freezes a pretrained backbone and attaches fresh biasing adapters.
    pub fn attach_biasing(self, seed: u64) -> Result<Model<T>> {
        if self.stage != Stage::Pretrain {
            return Err(Error::Model(
                "adapters can only be attached to a pretrain-stage model".into(),
            ));
        }
        let Model { cfg, store, .. } = self;
        let streams = Streams::new(seed);
        let mut out = ParamStore::new();
        for spec in expected_params(&cfg, Stage::Bias) {
            let t = if store.contains(&spec.name) {
                store.get(&spec.name)?.clone()
            } else {
                let mut rng = streams.stream(&format!("init/{}", spec.name));
                init_tensor(&spec.init, spec.shape, &mut rng)
            };
            out.insert(&spec.name, spec.partition, t)?;
        }
        Model::from_store(cfg, Stage::Bias, out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            stage: self.stage,
            store: self.store.cast(),
        }
    }

    pub(crate) fn head_dim(&self) -> usize {
        self.cfg.d_model / self.cfg.heads
    }

    pub(crate) fn bias_head_dim(&self) -> usize {
        self.cfg.d_bias / self.cfg.bias_heads
    }
}

/// Fixed sinusoidal positions: row t, even column 2i holds
/// sin(t / 10000^(2i/d)), the following odd column the matching cosine.
pub(crate) fn sinusoid_rows<T: Real>(rows: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for t in 0..rows {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let rate = 1.0 / 10000f64.powf(pair / d as f64);
            let angle = t as f64 * rate;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(T::from_f64(v));
        }
    }
    out
}
