//! Full classifier: frozen encoder, diagnosis-token source, neck, frozen
//! transformer stack with adapters, and a single-logit head.

mod checkpoint;
mod encoder;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use encoder::{EncoderLayer, ToyEncoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::NeckParams;
use crate::config::{ModelConfig, Pooling, PromptSource};
use crate::emitter::{
    build_mask, build_stack, open_mask, stack_forward, stack_forward_grouped, Block, BlockOptions, StackOutput,
};
use crate::engine::{fan_in_uniform, ConditionalPromptParams, EngineParams, FixedPromptParams};
use crate::error::{Error, Result};
use crate::numeric::{
    grad_check, sigmoid, GradCheckOptions, GradCheckReport, Matrix, ParamId, ParamStore, Tape, Var,
};

/// Independent random stream `stream` under `seed`, so adding or removing a
/// module never shifts another module's initialization.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which forward implementation a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardPath {
    /// One sample per pass, as used for inspection.
    PerSample,
    /// Whole batch stacked by rows, as used for training.
    Batched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptModule {
    None,
    Fixed(FixedPromptParams),
    Conditional(ConditionalPromptParams),
    Engine(EngineParams),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 × 1` pre-sigmoid logit.
    pub logit: Var,
    /// Source tokens `X` as fed in.
    pub source: Var,
    /// Diagnosis tokens, `m × n`.
    pub diag: Option<Var>,
    /// Context map `M_c` when the engine is the token source.
    pub context_map: Option<Var>,
    /// Neck output `Y`.
    pub y: Var,
    pub stack: StackOutput,
}

/// Parameter counts by module.
#[derive(Clone, Debug, PartialEq)]
pub struct Census {
    pub trainable: usize,
    pub frozen: usize,
    pub modules: Vec<(String, usize, usize)>,
}

impl Census {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / (self.trainable + self.frozen) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PneumoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub prompt: PromptModule,
    pub neck: NeckParams,
    pub blocks: Vec<Block>,
    pub head: HeadParams,
    mask: Matrix,
}

impl PneumoModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let n = c.token_width;
        let m = c.diag_tokens;
        let width = c.stack.width;
        let mut store = ParamStore::new();

        let encoder = ToyEncoder::init(
            &mut store,
            c.input_width,
            n,
            c.patch_tokens,
            c.encoder_layers,
            c.tap_every,
            &mut seeded_stream(c.encoder_seed, 0),
        )?;
        let mut prompt_rng = seeded_stream(c.init_seed, 1);
        let prompt = match c.prompt {
            PromptSource::None => PromptModule::None,
            PromptSource::Fixed => {
                PromptModule::Fixed(FixedPromptParams::init(&mut store, n, m, &mut prompt_rng))
            }
            PromptSource::Conditional => PromptModule::Conditional(ConditionalPromptParams::init(
                &mut store,
                n,
                m,
                &mut prompt_rng,
            )),
            PromptSource::Engine => PromptModule::Engine(EngineParams::init(
                &mut store,
                n,
                m,
                c.softmax_axis,
                &mut prompt_rng,
            )?),
        };
        let neck = NeckParams::init(
            &mut store,
            n,
            c.effective_neck_hidden(),
            width,
            &mut seeded_stream(c.init_seed, 2),
        );
        let blocks = build_stack(
            &mut store,
            c.stack.layers,
            width,
            c.stack.heads,
            c.adapters.then_some(c.stack.adapter_dim),
            &mut seeded_stream(c.stack_seed, 0),
            &mut seeded_stream(c.init_seed, 3),
        )?;
        let mut head_rng = seeded_stream(c.init_seed, 4);
        let head = HeadParams {
            w: store.add("head.w", fan_in_uniform(width, 1, &mut head_rng), true),
            b: store.add("head.b", Matrix::zeros(1, 1), true),
        };

        let d = c.source_tokens();
        let mask = if c.emitter {
            build_mask(d, m)?.matrix().clone()
        } else {
            open_mask(d + m)
        };
        Ok(PneumoModel {
            config: c.clone(),
            store,
            encoder,
            prompt,
            neck,
            blocks,
            head,
            mask,
        })
    }

    pub fn source_tokens(&self) -> usize {
        self.config.source_tokens()
    }

    pub fn diag_tokens(&self) -> usize {
        self.config.diag_tokens
    }

    /// Attention mask applied in every block.
    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            scale: self.config.attention_scale,
            eps: self.config.layer_norm_eps,
        }
    }

    pub fn encode(&self, input: &[f64]) -> Result<Matrix> {
        self.encoder.encode(&self.store, input)
    }

    /// Diagnosis tokens for source tokens `x`: `(tokens, context map)`.
    pub fn diagnosis_tokens(&self, tape: &mut Tape, x: Var) -> Result<(Option<Var>, Option<Var>)> {
        Ok(match &self.prompt {
            PromptModule::None => (None, None),
            PromptModule::Fixed(p) => (Some(p.forward(tape)), None),
            PromptModule::Conditional(p) => (Some(p.forward(tape, x)?), None),
            PromptModule::Engine(e) => {
                let out = e.forward(tape, x)?;
                (Some(out.tokens), Some(out.context_map))
            }
        })
    }

    /// Forward from encoder output `x` (`d × n`).
    pub fn forward_tokens(&self, tape: &mut Tape, x: &Matrix) -> Result<ForwardOutput> {
        let xv = tape.constant(x.clone());
        let (diag, context_map) = self.diagnosis_tokens(tape, xv)?;
        let mut out = self.forward_with_diag(tape, xv, diag)?;
        out.context_map = context_map;
        Ok(out)
    }

    /// Forward with caller-supplied diagnosis tokens.
    pub fn forward_with_diag(&self, tape: &mut Tape, x: Var, diag: Option<Var>) -> Result<ForwardOutput> {
        let (d, n) = tape.value(x).shape();
        if d != self.source_tokens() || n != self.config.token_width {
            return Err(Error::dim(
                "model_forward",
                (d, n),
                (self.source_tokens(), self.config.token_width),
            ));
        }
        let m = diag.map_or(0, |v| tape.value(v).rows());
        if m != self.diag_tokens() {
            return Err(Error::dim("model_forward diag", (m, n), (self.diag_tokens(), n)));
        }
        let x_cat = match diag {
            Some(t) => tape.concat_rows(&[x, t])?,
            None => x,
        };
        let y = self.neck.forward(tape, x_cat)?;
        let stack = stack_forward(tape, y, &self.blocks, &self.mask, self.block_options())?;
        let pooled = match self.config.pooling {
            Pooling::Diagnosis => {
                if m == 0 {
                    return Err(Error::Config(
                        "diagnosis pooling needs at least one diagnosis token".into(),
                    ));
                }
                tape.mean_rows(stack.z, d, m)?
            }
            Pooling::Source => tape.mean_rows(stack.z, 0, d)?,
            Pooling::Last => tape.slice_rows(stack.z, d + m - 1, 1)?,
        };
        let w = tape.param(self.head.w);
        let b = tape.param(self.head.b);
        let logit = tape.matmul(pooled, w)?;
        let logit = tape.add(logit, b)?;
        Ok(ForwardOutput {
            logit,
            source: x,
            diag,
            context_map: None,
            y,
            stack,
        })
    }

    /// Logits (`B × 1`) for a batch of encoder outputs. All samples' tokens
    /// are stacked by rows and pass through the neck and stack together.
    pub fn batch_logits(&self, tape: &mut Tape, xs: &[&Matrix]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let (d, m) = (self.source_tokens(), self.diag_tokens());
        let mut parts = Vec::with_capacity(2 * xs.len());
        for &x in xs {
            if x.shape() != (d, self.config.token_width) {
                return Err(Error::dim("batch_logits", x.shape(), (d, self.config.token_width)));
            }
            let xv = tape.constant(x.clone());
            parts.push(xv);
            if let (Some(t), _) = self.diagnosis_tokens(tape, xv)? {
                parts.push(t);
            }
        }
        let x_cat = tape.concat_rows(&parts)?;
        let y = self.neck.forward(tape, x_cat)?;
        let z = stack_forward_grouped(tape, y, &self.blocks, &self.mask, self.block_options())?;

        let per = d + m;
        let (start, len) = match self.config.pooling {
            Pooling::Diagnosis if m == 0 => {
                return Err(Error::Config(
                    "diagnosis pooling needs at least one diagnosis token".into(),
                ))
            }
            Pooling::Diagnosis => (d, m),
            Pooling::Source => (0, d),
            Pooling::Last => (per - 1, 1),
        };
        let mut pool = Matrix::zeros(xs.len(), xs.len() * per);
        for b in 0..xs.len() {
            for r in start..start + len {
                pool.row_mut(b)[b * per + r] = 1.0 / len as f64;
            }
        }
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, z)?;
        let w = tape.param(self.head.w);
        let b = tape.param(self.head.b);
        let logits = tape.matmul(pooled, w)?;
        tape.add_row(logits, b)
    }

    pub fn logit_from_tokens(&self, x: &Matrix) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward_tokens(&mut tape, x)?;
        let v = tape.value(out.logit)[(0, 0)];
        if !v.is_finite() {
            return Err(Error::NonFinite("model logit".into()));
        }
        Ok(v)
    }

    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        self.logit_from_tokens(&self.encode(input)?)
    }

    pub fn probability(&self, input: &[f64]) -> Result<f64> {
        self.logit(input).map(sigmoid)
    }

    pub fn census(&self) -> Census {
        let (trainable, frozen) = self.store.count();
        let mut modules: Vec<(String, usize, usize)> = Vec::new();
        for (_, name, p) in self.store.iter() {
            let module = module_of(name);
            let idx = match modules.iter().position(|(m, _, _)| m == module) {
                Some(i) => i,
                None => {
                    modules.push((module.to_string(), 0, 0));
                    modules.len() - 1
                }
            };
            if p.trainable {
                modules[idx].1 += p.len();
            } else {
                modules[idx].2 += p.len();
            }
        }
        Census {
            trainable,
            frozen,
            modules,
        }
    }

    /// Adds seeded uniform noise in `±scale` to every trainable parameter,
    /// moving zero-initialized adapters and prompts off their fixed point.
    pub fn perturb_trainable(&mut self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = seeded_stream(seed, 9);
        for id in self.store.trainable_ids() {
            let (r, c) = self.store.value(id).shape();
            let v = self.store.value(id).add(&Matrix::random_uniform(r, c, scale, &mut rng))?;
            self.store.set_value(id, v)?;
        }
        Ok(())
    }

    /// Finite-difference check of every trainable parameter on the mean BCE
    /// of `xs` (encoder outputs) against `labels`.
    pub fn grad_check(
        &mut self,
        xs: &[Matrix],
        labels: &[f64],
        path: ForwardPath,
        opts: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::dim("grad_check", (xs.len(), 1), (labels.len(), 1)));
        }
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let report = grad_check(&mut store, opts, |tape| match path {
            ForwardPath::Batched => {
                let refs: Vec<&Matrix> = xs.iter().collect();
                let logits = this.batch_logits(tape, &refs)?;
                tape.bce_mean(logits, labels)
            }
            ForwardPath::PerSample => {
                let mut losses = Vec::with_capacity(xs.len());
                for (x, &y) in xs.iter().zip(labels) {
                    let out = this.forward_tokens(tape, x)?;
                    losses.push(tape.bce(out.logit, y)?);
                }
                tape.mean_scalars(&losses)
            }
        });
        self.store = store;
        report
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }
}

/// One case of [`toy_grad_suite`].
#[derive(Clone, Debug)]
pub struct GradSuiteCase {
    pub name: &'static str,
    pub path: ForwardPath,
    pub report: GradCheckReport,
}

/// Finite-difference check of the whole model at toy dimensions, over every
/// token source and both forward paths. Trainable parameters are perturbed
/// first so zero-initialized pieces carry gradient through the stack.
pub fn toy_grad_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradSuiteCase>> {
    let cases = [
        ("engine+emitter", PromptSource::Engine, true, Pooling::Diagnosis),
        ("engine", PromptSource::Engine, false, Pooling::Diagnosis),
        ("conditional", PromptSource::Conditional, true, Pooling::Diagnosis),
        ("fixed", PromptSource::Fixed, true, Pooling::Last),
        ("none", PromptSource::None, false, Pooling::Source),
    ];
    let labels = [1.0, 0.0, 1.0];
    let mut out = Vec::with_capacity(2 * cases.len());
    for (name, prompt, emitter, pooling) in cases {
        let base = ModelConfig::toy();
        let cfg = ModelConfig {
            prompt,
            emitter,
            pooling,
            diag_tokens: if prompt == PromptSource::None { 0 } else { base.diag_tokens },
            ..base
        };
        let mut model = PneumoModel::new(&cfg)?;
        model.perturb_trainable(seed, 0.3)?;
        let mut rng = seeded_stream(seed, 1);
        let xs = (0..labels.len())
            .map(|_| model.encode(Matrix::random_uniform(1, cfg.input_width, 1.0, &mut rng).as_slice()))
            .collect::<Result<Vec<_>>>()?;
        for path in [ForwardPath::PerSample, ForwardPath::Batched] {
            let report = model.grad_check(&xs, &labels, path, opts)?;
            out.push(GradSuiteCase { name, path, report });
        }
    }
    Ok(out)
}

fn module_of(name: &str) -> &str {
    if name.contains(".adapter.") {
        return "adapters";
    }
    name.split('.').next().unwrap_or(name)
}
