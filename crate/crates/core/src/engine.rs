//! Diagnosis-token generators.
//!
//! [`EngineParams`] is the contextual multi-token engine: a small
//! Linear-ReLU-Linear network scores every (source token, diagnosis token)
//! pair, a softmax turns the scores into the context map `M_c` (`d × m`),
//! and the diagnosis tokens are `M_cᵀ · X`. With the default column axis each
//! diagnosis token is a convex combination of the source tokens.
//!
//! [`FixedPromptParams`] and [`ConditionalPromptParams`] are the ablation
//! baselines: the same learnable tokens for every sample, and learnable
//! tokens shifted by one offset computed from the mean source token.

use rand::Rng;

use crate::config::SoftmaxAxis;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Matrix, ParamId, ParamStore, Tape, Var};

/// Hidden width of the engine MLP for token width `n`.
pub fn engine_hidden(n: usize) -> usize {
    (n / 12).max(1)
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// Column-stochastic `d × m` map from source tokens to diagnosis tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMap {
    pub m_c: Matrix,
}

impl ContextMap {
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.m_c.cols())
            .map(|j| self.m_c.column(j).iter().sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub token_width: usize,
    pub tokens: usize,
    pub axis: SoftmaxAxis,
}

/// Tape handles produced by [`EngineParams::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EngineOutput {
    /// `d × m`
    pub context_map: Var,
    /// `m × n`
    pub tokens: Var,
}

impl EngineParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        token_width: usize,
        tokens: usize,
        axis: SoftmaxAxis,
        rng: &mut R,
    ) -> Result<Self> {
        if token_width == 0 {
            return Err(Error::dim("engine init", (0, token_width), (1, 1)));
        }
        if tokens == 0 {
            return Err(Error::Config("engine needs at least one diagnosis token".into()));
        }
        let h = engine_hidden(token_width);
        Ok(EngineParams {
            w1: store.add("engine.w1", fan_in_uniform(token_width, h, rng), true),
            b1: store.add("engine.b1", Matrix::zeros(1, h), true),
            w2: store.add("engine.w2", fan_in_uniform(h, tokens, rng), true),
            b2: store.add("engine.b2", Matrix::zeros(1, tokens), true),
            token_width,
            tokens,
            axis,
        })
    }

    /// `x` is the `d × n` source-token matrix.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<EngineOutput> {
        let (d, n) = tape.value(x).shape();
        if n == 0 || n != self.token_width {
            return Err(Error::dim("engine_forward", (d, n), (d, self.token_width)));
        }
        if d == 0 {
            return Err(Error::dim("engine_forward", (d, n), (1, n)));
        }
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.activation(h, Activation::Relu);
        let logits = tape.matmul(h, w2)?;
        let logits = tape.add_row(logits, b2)?;

        let (context_map, tokens) = match self.axis {
            SoftmaxAxis::Column => {
                // Softmax over source tokens = row softmax of the transpose.
                let lt = tape.transpose(logits);
                let mask = Matrix::zeros(self.tokens, d);
                let m_ct = tape.masked_softmax(lt, &mask)?;
                let tokens = tape.matmul(m_ct, x)?;
                (tape.transpose(m_ct), tokens)
            }
            SoftmaxAxis::Row => {
                let mask = Matrix::zeros(d, self.tokens);
                let m_c = tape.masked_softmax(logits, &mask)?;
                let m_ct = tape.transpose(m_c);
                (m_c, tape.matmul(m_ct, x)?)
            }
        };
        Ok(EngineOutput {
            context_map,
            tokens,
        })
    }

    /// Forward on plain matrices: `(M_c, X̂)`.
    pub fn evaluate(&self, store: &ParamStore, x: &Matrix) -> Result<(ContextMap, Matrix)> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok((
            ContextMap {
                m_c: tape.value(out.context_map).clone(),
            },
            tape.value(out.tokens).clone(),
        ))
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Learnable prompt rows shared by every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPromptParams {
    pub prompt: ParamId,
}

impl FixedPromptParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        token_width: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (token_width as f64).sqrt();
        FixedPromptParams {
            prompt: store.add(
                "prompt.tokens",
                Matrix::random_uniform(tokens, token_width, scale, rng),
                true,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape) -> Var {
        tape.param(self.prompt)
    }
}

/// Learnable prompt rows plus `mean(X) · W + b` added to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalPromptParams {
    pub prompt: FixedPromptParams,
    pub offset_w: ParamId,
    pub offset_b: ParamId,
}

impl ConditionalPromptParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        token_width: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let prompt = FixedPromptParams::init(store, token_width, tokens, rng);
        ConditionalPromptParams {
            prompt,
            offset_w: store.add(
                "prompt.offset_w",
                fan_in_uniform(token_width, token_width, rng),
                true,
            ),
            offset_b: store.add("prompt.offset_b", Matrix::zeros(1, token_width), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (d, n) = tape.value(x).shape();
        let pooled = tape.mean_rows(x, 0, d)?;
        let w = tape.param(self.offset_w);
        if tape.value(w).rows() != n {
            return Err(Error::dim("conditional_prompt", (d, n), tape.value(w).shape()));
        }
        let offset = tape.matmul(pooled, w)?;
        let b = tape.param(self.offset_b);
        let offset = tape.add_row(offset, b)?;
        let p = self.prompt.forward(tape);
        tape.add_row(p, offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn engine(n: usize, m: usize, axis: SoftmaxAxis, seed: u64) -> (ParamStore, EngineParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = EngineParams::init(&mut store, n, m, axis, &mut rng).unwrap();
        // Non-zero biases so the oracle exercises every term.
        for id in [p.b1, p.b2] {
            let (r, c) = store.value(id).shape();
            store
                .set_value(id, Matrix::random_uniform(r, c, 0.5, &mut rng))
                .unwrap();
        }
        (store, p)
    }

    /// Straight-loop evaluation of the engine equations.
    fn loop_oracle(store: &ParamStore, p: &EngineParams, x: &Matrix) -> (Matrix, Matrix) {
        let (w1, b1, w2, b2) = (
            store.value(p.w1),
            store.value(p.b1),
            store.value(p.w2),
            store.value(p.b2),
        );
        let (d, n) = x.shape();
        let (h, m) = (w1.cols(), w2.cols());
        let mut logits = vec![vec![0.0; m]; d];
        for i in 0..d {
            let mut hidden = vec![0.0; h];
            for (k, hk) in hidden.iter_mut().enumerate() {
                let mut s = b1[(0, k)];
                for t in 0..n {
                    s += x[(i, t)] * w1[(t, k)];
                }
                *hk = s.max(0.0);
            }
            for j in 0..m {
                let mut s = b2[(0, j)];
                for k in 0..h {
                    s += hidden[k] * w2[(k, j)];
                }
                logits[i][j] = s;
            }
        }
        let mut m_c = Matrix::zeros(d, m);
        for j in 0..m {
            let max = (0..d).map(|i| logits[i][j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..d).map(|i| (logits[i][j] - max).exp()).sum();
            for i in 0..d {
                m_c[(i, j)] = (logits[i][j] - max).exp() / z;
            }
        }
        let mut tokens = Matrix::zeros(m, n);
        for j in 0..m {
            for t in 0..n {
                tokens[(j, t)] = (0..d).map(|i| m_c[(i, j)] * x[(i, t)]).sum();
            }
        }
        (m_c, tokens)
    }

    #[test]
    fn zero_logits_give_uniform_map_and_mean_tokens() {
        let (mut store, p) = engine(24, 3, SoftmaxAxis::Column, 1);
        store.set_value(p.w2, Matrix::zeros(2, 3)).unwrap();
        store.set_value(p.b2, Matrix::zeros(1, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_uniform(4, 24, 1.0, &mut rng);
        let (map, tokens) = p.evaluate(&store, &x).unwrap();
        for v in map.m_c.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let mean = x.mean_rows(0, 4).unwrap();
        for j in 0..3 {
            let row = Matrix::row_vector(tokens.row(j));
            assert!(row.max_abs_diff(&mean) < 1e-14);
        }
    }

    #[test]
    fn saturated_logits_select_one_source_token() {
        let n = 12;
        let (mut store, p) = engine(n, 1, SoftmaxAxis::Column, 3);
        // Hidden width 1 reads feature 0; logit = relu(x0) - 20.
        let mut w1 = Matrix::zeros(n, 1);
        w1[(0, 0)] = 1.0;
        store.set_value(p.w1, w1).unwrap();
        store.set_value(p.b1, Matrix::zeros(1, 1)).unwrap();
        store.set_value(p.w2, Matrix::filled(1, 1, 1.0)).unwrap();
        store.set_value(p.b2, Matrix::filled(1, 1, -20.0)).unwrap();
        let mut x = Matrix::zeros(2, n);
        x[(0, 0)] = 40.0; // logit +20
        x[(1, 0)] = -5.0; // logit -20
        for t in 1..n {
            x[(0, t)] = t as f64;
            x[(1, t)] = -(t as f64);
        }
        let (map, tokens) = p.evaluate(&store, &x).unwrap();
        assert!(map.m_c[(1, 0)] < 1e-17);
        let diff = Matrix::row_vector(tokens.row(0)).max_abs_diff(&x.slice_rows(0, 1).unwrap());
        assert!(diff < 1e-8, "diff {diff}");
    }

    #[test]
    fn matches_loop_oracle() {
        let (store, p) = engine(24, 4, SoftmaxAxis::Column, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random_uniform(3, 24, 2.0, &mut rng);
        let (map, tokens) = p.evaluate(&store, &x).unwrap();
        let (m_c, expected) = loop_oracle(&store, &p, &x);
        assert!(map.m_c.max_abs_diff(&m_c) < 1e-12);
        assert!(tokens.max_abs_diff(&expected) < 1e-12);
        assert_eq!(tokens.shape(), (4, 24));
    }

    #[test]
    fn row_axis_normalizes_rows() {
        let (store, p) = engine(24, 4, SoftmaxAxis::Row, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::random_uniform(5, 24, 1.0, &mut rng);
        let (map, tokens) = p.evaluate(&store, &x).unwrap();
        for i in 0..5 {
            assert!((map.m_c.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let expected = map.m_c.t_matmul(&x).unwrap();
        assert!(tokens.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn hidden_width_never_zero() {
        assert_eq!(engine_hidden(5), 1);
        assert_eq!(engine_hidden(24), 2);
        assert_eq!(engine_hidden(4096), 341);
    }

    #[test]
    fn wrong_token_width_is_a_dimension_error() {
        let (store, p) = engine(24, 2, SoftmaxAxis::Column, 9);
        let err = p.evaluate(&store, &Matrix::zeros(3, 12)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let err = p.evaluate(&store, &Matrix::zeros(3, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn fixed_prompt_ignores_input_and_has_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = FixedPromptParams::init(&mut store, 24, 4, &mut rng);
        let mut tape = Tape::new(&store);
        let a = p.forward(&mut tape);
        let b = p.forward(&mut tape);
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(a).shape(), (4, 24));
    }

    #[test]
    fn conditional_prompt_with_zero_offset_map_equals_fixed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ConditionalPromptParams::init(&mut store, 8, 3, &mut rng);
        let x1 = Matrix::random_uniform(4, 8, 1.0, &mut rng);
        let x2 = Matrix::random_uniform(4, 8, 1.0, &mut rng);

        let run = |store: &ParamStore, x: &Matrix| {
            let mut tape = Tape::new(store);
            let xv = tape.constant(x.clone());
            let out = p.forward(&mut tape, xv).unwrap();
            tape.value(out).clone()
        };
        assert_ne!(run(&store, &x1), run(&store, &x2));

        store.set_value(p.offset_w, Matrix::zeros(8, 8)).unwrap();
        let fixed = store.value(p.prompt.prompt).clone();
        assert_eq!(run(&store, &x1), fixed);
        assert_eq!(run(&store, &x2), fixed);
    }
}
