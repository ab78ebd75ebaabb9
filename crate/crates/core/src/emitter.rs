//! One-way masked attention inside a frozen transformer stack.
//!
//! Tokens are laid out as `[source; diagnosis]`, `d + m` rows. The emitter
//! mask blocks every key column past `d`, so source tokens attend only to
//! source tokens (their computation is exactly the unmasked backbone's) and
//! each diagnosis token reads from the source tokens alone, never from
//! another diagnosis token. Every other block operation is row-wise, so the
//! property holds through the whole stack.

use rand::Rng;

use crate::adapters::AdapterParams;
use crate::config::AttentionScale;
use crate::error::{Error, Result};
use crate::numeric::{masked_row_softmax, Activation, Matrix, ParamId, ParamStore, Tape, Var};

/// The `(d + m) × (d + m)` attention mask: `-inf` in every column past `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitterMask {
    d: usize,
    m: usize,
    mask: Matrix,
}

impl EmitterMask {
    pub fn source_tokens(&self) -> usize {
        self.d
    }

    pub fn diag_tokens(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mask
    }
}

pub fn build_mask(d: usize, m: usize) -> Result<EmitterMask> {
    if d == 0 {
        return Err(Error::Config(
            "emitter mask needs at least one source token".into(),
        ));
    }
    let n = d + m;
    let mut mask = Matrix::zeros(n, n);
    for i in 0..n {
        for j in d..n {
            mask[(i, j)] = f64::NEG_INFINITY;
        }
    }
    Ok(EmitterMask { d, m, mask })
}

/// All-zero mask: every token attends to every token.
pub fn open_mask(tokens: usize) -> Matrix {
    Matrix::zeros(tokens, tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Frozen weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    pub w_o: ParamId,
    pub w_ff1: ParamId,
    pub w_ff2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub width: usize,
}

impl BlockWeights {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "block width {width} not divisible by {heads} heads"
            )));
        }
        let hd = width / heads;
        let s = 1.0 / (width as f64).sqrt();
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut add = |name: &str, rng: &mut R| {
                store.add(
                    format!("{prefix}.head{h}.{name}"),
                    Matrix::random_uniform(width, hd, s, rng),
                    false,
                )
            };
            let w_q = add("w_q", rng);
            let w_k = add("w_k", rng);
            let w_v = add("w_v", rng);
            head_weights.push(HeadWeights { w_q, w_k, w_v });
        }
        let w_o = store.add(
            format!("{prefix}.w_o"),
            Matrix::random_uniform(width, width, s, rng),
            false,
        );
        let w_ff1 = store.add(
            format!("{prefix}.w_ff1"),
            Matrix::random_uniform(width, 4 * width, s, rng),
            false,
        );
        let w_ff2 = store.add(
            format!("{prefix}.w_ff2"),
            Matrix::random_uniform(4 * width, width, 0.5 * s, rng),
            false,
        );
        let ones = Matrix::filled(1, width, 1.0);
        let zeros = Matrix::zeros(1, width);
        Ok(BlockWeights {
            heads: head_weights,
            w_o,
            w_ff1,
            w_ff2,
            ln1_gain: store.add(format!("{prefix}.ln1.gain"), ones.clone(), false),
            ln1_bias: store.add(format!("{prefix}.ln1.bias"), zeros.clone(), false),
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), ones, false),
            ln2_bias: store.add(format!("{prefix}.ln2.bias"), zeros, false),
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .heads
            .iter()
            .flat_map(|h| [h.w_q, h.w_k, h.w_v])
            .collect();
        ids.extend([
            self.w_o,
            self.w_ff1,
            self.w_ff2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]);
        ids
    }
}

/// A frozen block and its (optional) trainable adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub weights: BlockWeights,
    pub adapter: Option<AdapterParams>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    pub scale: AttentionScale,
    pub eps: f64,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            scale: AttentionScale::HeadDim,
            eps: 1e-5,
        }
    }
}

fn scale_factor(scale: AttentionScale, head_dim: usize, tokens: usize) -> f64 {
    match scale {
        AttentionScale::HeadDim => 1.0 / (head_dim as f64).sqrt(),
        AttentionScale::TokenCount => 1.0 / (tokens as f64).sqrt(),
    }
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    /// Projected output, `d′ × n′`.
    pub out: Var,
    /// Concatenated head outputs before the output projection.
    pub heads: Var,
    /// Post-softmax attention weights per head, `d′ × d′` each.
    pub weights: Vec<Var>,
}

/// Multi-head attention with an additive mask.
pub fn masked_mha(
    tape: &mut Tape,
    y: Var,
    w: &BlockWeights,
    mask: &Matrix,
    scale: AttentionScale,
) -> Result<MhaOutput> {
    let (tokens, width) = tape.value(y).shape();
    if width != w.width {
        return Err(Error::dim("masked_mha", (tokens, width), (tokens, w.width)));
    }
    if mask.shape() != (tokens, tokens) {
        return Err(Error::dim("masked_mha mask", (tokens, tokens), mask.shape()));
    }
    let factor = scale_factor(scale, w.head_dim(), tokens);
    let mut outputs = Vec::with_capacity(w.heads.len());
    let mut weights = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let (wq, wk, wv) = (tape.param(head.w_q), tape.param(head.w_k), tape.param(head.w_v));
        let q = tape.matmul(y, wq)?;
        let k = tape.matmul(y, wk)?;
        let v = tape.matmul(y, wv)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, factor);
        let attn = tape.masked_softmax(scores, mask)?;
        outputs.push(tape.matmul(attn, v)?);
        weights.push(attn);
    }
    let heads = tape.concat_cols(&outputs)?;
    let wo = tape.param(w.w_o);
    let out = tape.matmul(heads, wo)?;
    Ok(MhaOutput {
        out,
        heads,
        weights,
    })
}

/// The masked attention evaluated as two explicit blocks: source tokens
/// attending over source keys, and diagnosis tokens attending over source
/// keys. Returns `(attn_s, attn_c)`, heads concatenated, before the output
/// projection. Uses no mask at all, so it serves as an independent check on
/// [`masked_mha`].
pub fn attn_decomposed(
    store: &ParamStore,
    y: &Matrix,
    w: &BlockWeights,
    d: usize,
    scale: AttentionScale,
) -> Result<(Matrix, Matrix)> {
    let (tokens, width) = y.shape();
    if width != w.width {
        return Err(Error::dim("attn_decomposed", y.shape(), (tokens, w.width)));
    }
    if d == 0 || d > tokens {
        return Err(Error::dim("attn_decomposed", y.shape(), (d, width)));
    }
    let m = tokens - d;
    let factor = scale_factor(scale, w.head_dim(), tokens);
    let y_s = y.slice_rows(0, d)?;
    let y_c = y.slice_rows(d, m)?;
    let mut source_parts = Vec::new();
    let mut diag_parts = Vec::new();
    for head in &w.heads {
        let (wq, wk, wv) = (
            store.value(head.w_q),
            store.value(head.w_k),
            store.value(head.w_v),
        );
        let q_s = y_s.matmul(wq)?;
        let k_s = y_s.matmul(wk)?;
        let v_s = y_s.matmul(wv)?;
        let open = Matrix::zeros(d, d);
        let a_s = masked_row_softmax(&q_s.matmul_t(&k_s)?.scale(factor), &open)?;
        source_parts.push(a_s.matmul(&v_s)?);

        let q_c = y_c.matmul(wq)?;
        let open = Matrix::zeros(m, d);
        let a_c = masked_row_softmax(&q_c.matmul_t(&k_s)?.scale(factor), &open)?;
        diag_parts.push(a_c.matmul(&v_s)?);
    }
    let s_refs: Vec<&Matrix> = source_parts.iter().collect();
    let c_refs: Vec<&Matrix> = diag_parts.iter().collect();
    let attn_c = if m == 0 {
        Matrix::zeros(0, width)
    } else {
        Matrix::concat_cols(&c_refs)?
    };
    Ok((Matrix::concat_cols(&s_refs)?, attn_c))
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// `h = y + mha(adapter(ln1(y)))`, `out = h + ff(ln2(h))` with a SiLU
/// feed-forward. The adapter is the only trainable piece.
pub fn block_forward(
    tape: &mut Tape,
    y: Var,
    block: &Block,
    mask: &Matrix,
    opts: BlockOptions,
) -> Result<BlockOutput> {
    let w = &block.weights;
    let (g1, b1) = (tape.param(w.ln1_gain), tape.param(w.ln1_bias));
    let normed = tape.layer_norm(y, g1, b1, opts.eps)?;
    let adapted = match &block.adapter {
        Some(adapter) => adapter.forward(tape, normed)?,
        None => normed,
    };
    let mha = masked_mha(tape, adapted, w, mask, opts.scale)?;
    let h = tape.add(y, mha.out)?;

    let (g2, b2) = (tape.param(w.ln2_gain), tape.param(w.ln2_bias));
    let normed = tape.layer_norm(h, g2, b2, opts.eps)?;
    let ff1 = tape.param(w.w_ff1);
    let ff2 = tape.param(w.w_ff2);
    let f = tape.matmul(normed, ff1)?;
    let f = tape.activation(f, Activation::Silu);
    let f = tape.matmul(f, ff2)?;
    let out = tape.add(h, f)?;
    Ok(BlockOutput {
        out,
        attention: mha.weights,
    })
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Final features `Z`.
    pub z: Var,
    /// Output of every block, `layers.last() == z`.
    pub layers: Vec<Var>,
    /// Attention weights per block, per head.
    pub attention: Vec<Vec<Var>>,
}

pub fn stack_forward(
    tape: &mut Tape,
    y: Var,
    blocks: &[Block],
    mask: &Matrix,
    opts: BlockOptions,
) -> Result<StackOutput> {
    if blocks.is_empty() {
        return Err(Error::Config("transformer stack has no blocks".into()));
    }
    let width = blocks[0].weights.width;
    if let Some(b) = blocks.iter().find(|b| b.weights.width != width) {
        return Err(Error::Config(format!(
            "stack widths differ: {} vs {}",
            width, b.weights.width
        )));
    }
    let mut current = y;
    let mut layers = Vec::with_capacity(blocks.len());
    let mut attention = Vec::with_capacity(blocks.len());
    for block in blocks {
        let out = block_forward(tape, current, block, mask, opts)?;
        current = out.out;
        layers.push(current);
        attention.push(out.attention);
    }
    Ok(StackOutput {
        z: current,
        layers,
        attention,
    })
}

/// [`block_forward`] over independent token sets stacked by rows, each
/// `mask.rows()` tall. Returns the block output and the attention node.
pub fn block_forward_grouped(
    tape: &mut Tape,
    y: Var,
    block: &Block,
    mask: &Matrix,
    opts: BlockOptions,
) -> Result<(Var, Var)> {
    let w = &block.weights;
    let tokens = mask.rows();
    let (g1, b1) = (tape.param(w.ln1_gain), tape.param(w.ln1_bias));
    let normed = tape.layer_norm(y, g1, b1, opts.eps)?;
    let adapted = match &block.adapter {
        Some(adapter) => adapter.forward(tape, normed)?,
        None => normed,
    };
    let mut project = |pick: fn(&HeadWeights) -> ParamId| -> Result<Var> {
        let parts: Vec<Var> = w.heads.iter().map(|h| tape.param(pick(h))).collect();
        let all = tape.concat_cols(&parts)?;
        tape.matmul(adapted, all)
    };
    let q = project(|h| h.w_q)?;
    let k = project(|h| h.w_k)?;
    let v = project(|h| h.w_v)?;
    let factor = scale_factor(opts.scale, w.head_dim(), tokens);
    let heads = tape.grouped_attention(q, k, v, w.heads.len(), mask, factor)?;
    let wo = tape.param(w.w_o);
    let attn = tape.matmul(heads, wo)?;
    let h = tape.add(y, attn)?;

    let (g2, b2) = (tape.param(w.ln2_gain), tape.param(w.ln2_bias));
    let normed = tape.layer_norm(h, g2, b2, opts.eps)?;
    let ff1 = tape.param(w.w_ff1);
    let ff2 = tape.param(w.w_ff2);
    let f = tape.matmul(normed, ff1)?;
    let f = tape.activation(f, Activation::Silu);
    let f = tape.matmul(f, ff2)?;
    Ok((tape.add(h, f)?, heads))
}

/// [`stack_forward`] over stacked token sets; returns `Z` for all of them.
pub fn stack_forward_grouped(
    tape: &mut Tape,
    y: Var,
    blocks: &[Block],
    mask: &Matrix,
    opts: BlockOptions,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("transformer stack has no blocks".into()));
    }
    let mut current = y;
    for block in blocks {
        current = block_forward_grouped(tape, current, block, mask, opts)?.0;
    }
    Ok(current)
}

/// Builds `layers` frozen blocks, each with a fresh adapter when
/// `adapter_dim` is given.
pub fn build_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    layers: usize,
    width: usize,
    heads: usize,
    adapter_dim: Option<usize>,
    frozen_rng: &mut R,
    adapter_rng: &mut R,
) -> Result<Vec<Block>> {
    (0..layers)
        .map(|l| {
            let weights = BlockWeights::init(store, &format!("stack.{l}"), width, heads, frozen_rng)?;
            let adapter = adapter_dim.map(|r| {
                AdapterParams::init(store, &format!("stack.{l}.adapter"), width, r, adapter_rng)
            });
            Ok(Block { weights, adapter })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NEG_INF: f64 = f64::NEG_INFINITY;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_two_plus_one() {
        let mask = build_mask(2, 1).unwrap();
        for i in 0..3 {
            assert_eq!(mask.matrix().row(i), &[0.0, 0.0, NEG_INF]);
        }
    }

    #[test]
    fn mask_without_diagnosis_tokens_is_open() {
        assert_eq!(build_mask(3, 0).unwrap().matrix(), &Matrix::zeros(3, 3));
    }

    #[test]
    fn mask_six_plus_four() {
        let mask = build_mask(6, 4).unwrap();
        let m = mask.matrix();
        assert_eq!(m.shape(), (10, 10));
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(m[(i, j)] == NEG_INF, j >= 6);
            }
            assert_eq!(m.row(i).iter().filter(|v| **v == 0.0).count(), 6);
        }
    }

    #[test]
    fn mask_needs_source_tokens() {
        assert!(build_mask(0, 3).is_err());
    }

    fn block(store: &mut ParamStore, width: usize, heads: usize, adapter: Option<usize>, seed: u64) -> Block {
        let mut r1 = rng(seed);
        let mut r2 = rng(seed + 1000);
        build_stack(store, 1, width, heads, adapter, &mut r1, &mut r2)
            .unwrap()
            .pop()
            .unwrap()
    }

    fn mha_value(store: &ParamStore, y: &Matrix, w: &BlockWeights, mask: &Matrix) -> (Matrix, Matrix) {
        let mut tape = Tape::new(store);
        let yv = tape.constant(y.clone());
        let out = masked_mha(&mut tape, yv, w, mask, AttentionScale::HeadDim).unwrap();
        (tape.value(out.out).clone(), tape.value(out.heads).clone())
    }

    #[test]
    fn single_source_token_attends_to_itself() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 1);
        let y = Matrix::random_uniform(2, 8, 1.0, &mut rng(2));
        let (_, heads) = mha_value(&store, &y, &b.weights, build_mask(1, 1).unwrap().matrix());
        let mut expected = Vec::new();
        for h in &b.weights.heads {
            expected.push(y.slice_rows(0, 1).unwrap().matmul(store.value(h.w_v)).unwrap());
        }
        let refs: Vec<&Matrix> = expected.iter().collect();
        let expected = Matrix::concat_cols(&refs).unwrap();
        assert_eq!(heads.slice_rows(0, 1).unwrap(), expected);
    }

    #[test]
    fn source_rows_ignore_diagnosis_rows() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 3);
        let mut r = rng(4);
        let y = Matrix::random_uniform(5, 8, 1.0, &mut r);
        let mut y2 = y.clone();
        for i in 3..5 {
            for v in y2.row_mut(i) {
                *v = r.random_range(-50.0..50.0);
            }
        }
        let mask = build_mask(3, 2).unwrap();
        let (a, _) = mha_value(&store, &y, &b.weights, mask.matrix());
        let (b2, _) = mha_value(&store, &y2, &b.weights, mask.matrix());
        assert!(a.slice_rows(0, 3).unwrap().max_abs_diff(&b2.slice_rows(0, 3).unwrap()) < 1e-9);
    }

    /// Per-head attention with explicit index loops.
    fn loop_attention(store: &ParamStore, y: &Matrix, w: &BlockWeights, mask: &Matrix) -> Matrix {
        let (t, width) = y.shape();
        let hd = w.head_dim();
        let mut out = Matrix::zeros(t, width);
        for (h, head) in w.heads.iter().enumerate() {
            let proj = |wm: &Matrix| {
                let mut p = vec![vec![0.0; hd]; t];
                for i in 0..t {
                    for c in 0..hd {
                        p[i][c] = (0..width).map(|k| y[(i, k)] * wm[(k, c)]).sum();
                    }
                }
                p
            };
            let q = proj(store.value(head.w_q));
            let k = proj(store.value(head.w_k));
            let v = proj(store.value(head.w_v));
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let s: f64 = (0..hd).map(|c| q[i][c] * k[j][c]).sum();
                    scores[j] = s / (hd as f64).sqrt() + mask[(i, j)];
                }
                let max = scores.iter().cloned().fold(NEG_INF, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| if *s == NEG_INF { 0.0 } else { (s - max).exp() }).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    out[(i, h * hd + c)] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 5);
        let y = Matrix::random_uniform(5, 8, 1.5, &mut rng(6));
        let mask = build_mask(3, 2).unwrap();
        let (_, heads) = mha_value(&store, &y, &b.weights, mask.matrix());
        let expected = loop_attention(&store, &y, &b.weights, mask.matrix());
        assert!(heads.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn decomposed_equals_masked() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 7);
        let y = Matrix::random_uniform(6, 8, 1.0, &mut rng(8));
        let mask = build_mask(4, 2).unwrap();
        let (_, heads) = mha_value(&store, &y, &b.weights, mask.matrix());
        let (s, c) = attn_decomposed(&store, &y, &b.weights, 4, AttentionScale::HeadDim).unwrap();
        let joined = Matrix::concat_rows(&[&s, &c]).unwrap();
        assert!(joined.max_abs_diff(&heads) < 1e-10);
    }

    #[test]
    fn decomposed_without_diagnosis_is_plain_attention() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 9);
        let y = Matrix::random_uniform(3, 8, 1.0, &mut rng(10));
        let (s, c) = attn_decomposed(&store, &y, &b.weights, 3, AttentionScale::HeadDim).unwrap();
        assert_eq!(c.rows(), 0);
        let (_, heads) = mha_value(&store, &y, &b.weights, &open_mask(3));
        assert!(s.max_abs_diff(&heads) < 1e-12);
    }

    #[test]
    fn diagnosis_row_ignores_other_diagnosis_rows() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 11);
        let mut r = rng(12);
        let y = Matrix::random_uniform(5, 8, 1.0, &mut r);
        let mut y2 = y.clone();
        for v in y2.row_mut(4) {
            *v += 3.0;
        }
        let (_, c1) = attn_decomposed(&store, &y, &b.weights, 3, AttentionScale::HeadDim).unwrap();
        let (_, c2) = attn_decomposed(&store, &y2, &b.weights, 3, AttentionScale::HeadDim).unwrap();
        assert_eq!(c1.row(0), c2.row(0));
        assert_ne!(c1.row(1), c2.row(1));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, None, 13);
        let mut tape = Tape::new(&store);
        let y = tape.constant(Matrix::zeros(3, 6));
        assert!(masked_mha(&mut tape, y, &b.weights, &open_mask(3), AttentionScale::HeadDim).is_err());
        let y = tape.constant(Matrix::zeros(3, 8));
        assert!(masked_mha(&mut tape, y, &b.weights, &open_mask(4), AttentionScale::HeadDim).is_err());
    }

    fn block_value(store: &ParamStore, y: &Matrix, b: &Block, mask: &Matrix) -> Matrix {
        let mut tape = Tape::new(store);
        let yv = tape.constant(y.clone());
        let out = block_forward(&mut tape, yv, b, mask, BlockOptions::default()).unwrap();
        tape.value(out.out).clone()
    }

    #[test]
    fn zero_adapter_block_equals_adapter_free_block() {
        let mut store = ParamStore::new();
        let with = block(&mut store, 8, 2, Some(3), 14);
        let without = Block {
            weights: with.weights.clone(),
            adapter: None,
        };
        let y = Matrix::random_uniform(5, 8, 1.0, &mut rng(15));
        let mask = build_mask(3, 2).unwrap();
        assert_eq!(
            block_value(&store, &y, &with, mask.matrix()),
            block_value(&store, &y, &without, mask.matrix())
        );
    }

    #[test]
    fn block_source_rows_ignore_diagnosis_rows() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, Some(3), 16);
        let ad = b.adapter.as_ref().unwrap();
        store.set_value(ad.up, Matrix::random_uniform(3, 8, 0.5, &mut rng(17))).unwrap();
        let mut r = rng(18);
        let y = Matrix::random_uniform(5, 8, 1.0, &mut r);
        let mut y2 = y.clone();
        for v in y2.row_mut(3) {
            *v = r.random_range(-10.0..10.0);
        }
        let mask = build_mask(3, 2).unwrap();
        let a = block_value(&store, &y, &b, mask.matrix());
        let c = block_value(&store, &y2, &b, mask.matrix());
        assert!(a.slice_rows(0, 3).unwrap().max_abs_diff(&c.slice_rows(0, 3).unwrap()) < 1e-9);
    }

    #[test]
    fn block_adapter_gradients() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, Some(3), 19);
        let ad = b.adapter.clone().unwrap();
        store.set_value(ad.up, Matrix::random_uniform(3, 8, 0.5, &mut rng(20))).unwrap();
        let y = Matrix::random_uniform(5, 8, 1.0, &mut rng(21));
        let probe = Matrix::random_uniform(8, 1, 1.0, &mut rng(22));
        let mask = build_mask(3, 2).unwrap().matrix().clone();
        let report = grad_check(&mut store, GradCheckOptions::default(), |t| {
            let yv = t.constant(y.clone());
            let out = block_forward(t, yv, &b, &mask, BlockOptions::default())?;
            let p = t.constant(probe.clone());
            let s = t.matmul(out.out, p)?;
            t.mean_rows(s, 0, 5)
        })
        .unwrap();
        assert_eq!(report.checked, 2 * 8 * 3);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn one_layer_stack_is_one_block() {
        let mut store = ParamStore::new();
        let b = block(&mut store, 8, 2, Some(3), 23);
        let y = Matrix::random_uniform(4, 8, 1.0, &mut rng(24));
        let mask = build_mask(2, 2).unwrap();
        let direct = block_value(&store, &y, &b, mask.matrix());
        let mut tape = Tape::new(&store);
        let yv = tape.constant(y.clone());
        let out = stack_forward(&mut tape, yv, std::slice::from_ref(&b), mask.matrix(), BlockOptions::default()).unwrap();
        assert_eq!(tape.value(out.z), &direct);
    }

    #[test]
    fn empty_stack_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let y = tape.constant(Matrix::zeros(2, 4));
        assert!(stack_forward(&mut tape, y, &[], &open_mask(2), BlockOptions::default()).is_err());
    }

    #[test]
    fn grouped_stack_matches_per_set_stack() {
        let mut store = ParamStore::new();
        let blocks = build_stack(&mut store, 2, 8, 2, Some(2), &mut rng(40), &mut rng(41)).unwrap();
        for b in &blocks {
            let up = b.adapter.as_ref().unwrap().up;
            store.set_value(up, Matrix::random_uniform(2, 8, 0.3, &mut rng(42))).unwrap();
        }
        let mask = build_mask(3, 2).unwrap();
        let sets: Vec<Matrix> = (0..3).map(|i| Matrix::random_uniform(5, 8, 1.0, &mut rng(50 + i))).collect();
        let opts = BlockOptions::default();

        let mut tape = Tape::new(&store);
        let refs: Vec<&Matrix> = sets.iter().collect();
        let y = tape.constant(Matrix::concat_rows(&refs).unwrap());
        let z = stack_forward_grouped(&mut tape, y, &blocks, mask.matrix(), opts).unwrap();
        let grouped = tape.value(z).clone();

        for (i, set) in sets.iter().enumerate() {
            let mut t = Tape::new(&store);
            let yv = t.constant(set.clone());
            let out = stack_forward(&mut t, yv, &blocks, mask.matrix(), opts).unwrap();
            let diff = t.value(out.z).max_abs_diff(&grouped.slice_rows(5 * i, 5).unwrap());
            assert!(diff < 1e-12, "set {i}: {diff}");
        }
    }

    #[test]
    fn grouped_attention_grad_check() {
        let mut store = ParamStore::new();
        let blocks = build_stack(&mut store, 1, 8, 2, Some(2), &mut rng(60), &mut rng(61)).unwrap();
        let up = blocks[0].adapter.as_ref().unwrap().up;
        store.set_value(up, Matrix::random_uniform(2, 8, 0.3, &mut rng(62))).unwrap();
        let mask = build_mask(2, 2).unwrap();
        let y = Matrix::random_uniform(8, 8, 1.0, &mut rng(63));
        let probe = Matrix::random_uniform(8, 8, 1.0, &mut rng(64));
        let report = grad_check(&mut store, GradCheckOptions::default(), |tape| {
            let yv = tape.constant(y.clone());
            let z = stack_forward_grouped(tape, yv, &blocks, mask.matrix(), BlockOptions::default())?;
            let pv = tape.constant(probe.clone());
            let s = tape.matmul_t(z, pv)?;
            let col = tape.slice_cols(s, 0, 1)?;
            let row = tape.slice_rows(col, 5, 1)?;
            Ok(row)
        })
        .unwrap();
        assert!(report.passes(1e-6), "{:?}", report.worst);
    }

    #[test]
    fn grouped_attention_rejects_ragged_groups() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Matrix::zeros(7, 4));
        let mask = build_mask(2, 1).unwrap();
        assert!(tape.grouped_attention(q, q, q, 2, mask.matrix(), 1.0).is_err());
        assert!(tape.grouped_attention(q, q, q, 3, &Matrix::zeros(7, 7), 1.0).is_err());
    }
}
