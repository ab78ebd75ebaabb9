use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamId, ParamStore};

/// One frozen mixing layer: `H ← H + tanh(mix · H · w + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub mix: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// Frozen stand-in for a pretrained vision encoder.
///
/// An input vector is embedded into `patch_tokens` rows of width `n`, passed
/// through the mixing layers, and after every `tap_every`-th layer the mean
/// row is taken as one source token.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub input_width: usize,
    pub token_width: usize,
    pub patch_tokens: usize,
    pub tap_every: usize,
}

impl ToyEncoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_width: usize,
        token_width: usize,
        patch_tokens: usize,
        layers: usize,
        tap_every: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if tap_every == 0 || layers % tap_every != 0 {
            return Err(Error::Config(format!(
                "encoder layers ({layers}) must be a multiple of tap_every ({tap_every})"
            )));
        }
        let embed_w = store.add(
            "encoder.embed_w",
            Matrix::random_uniform(
                input_width,
                patch_tokens * token_width,
                1.0 / (input_width as f64).sqrt(),
                rng,
            ),
            false,
        );
        let embed_b = store.add(
            "encoder.embed_b",
            Matrix::random_uniform(1, patch_tokens * token_width, 0.1, rng),
            false,
        );
        let layers = (0..layers)
            .map(|l| EncoderLayer {
                mix: store.add(
                    format!("encoder.{l}.mix"),
                    Matrix::random_uniform(
                        patch_tokens,
                        patch_tokens,
                        1.0 / (patch_tokens as f64).sqrt(),
                        rng,
                    ),
                    false,
                ),
                w: store.add(
                    format!("encoder.{l}.w"),
                    Matrix::random_uniform(
                        token_width,
                        token_width,
                        1.0 / (token_width as f64).sqrt(),
                        rng,
                    ),
                    false,
                ),
                b: store.add(
                    format!("encoder.{l}.b"),
                    Matrix::random_uniform(1, token_width, 0.1, rng),
                    false,
                ),
            })
            .collect();
        Ok(ToyEncoder {
            embed_w,
            embed_b,
            layers,
            input_width,
            token_width,
            patch_tokens,
            tap_every,
        })
    }

    pub fn source_tokens(&self) -> usize {
        self.layers.len() / self.tap_every
    }

    /// Source tokens `X`, `d × n`.
    pub fn encode(&self, store: &ParamStore, input: &[f64]) -> Result<Matrix> {
        if input.len() != self.input_width {
            return Err(Error::dim(
                "encode",
                (1, input.len()),
                (1, self.input_width),
            ));
        }
        let embedded = Matrix::row_vector(input)
            .matmul(store.value(self.embed_w))?
            .add(store.value(self.embed_b))?;
        let mut h = Matrix::from_vec(self.patch_tokens, self.token_width, embedded.into_vec())?;
        let mut taps = Vec::with_capacity(self.source_tokens());
        for (l, layer) in self.layers.iter().enumerate() {
            let mixed = store
                .value(layer.mix)
                .matmul(&h)?
                .matmul(store.value(layer.w))?
                .add_row(store.value(layer.b))?;
            h = h.add(&mixed.map(f64::tanh))?;
            if (l + 1) % self.tap_every == 0 {
                taps.push(h.mean_rows(0, self.patch_tokens)?);
            }
        }
        let refs: Vec<&Matrix> = taps.iter().collect();
        Matrix::concat_rows(&refs)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_w, self.embed_b];
        for l in &self.layers {
            ids.extend([l.mix, l.w, l.b]);
        }
        ids
    }
}
