use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// A parameter value with its gradient accumulator and freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Matrix, trainable: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            value,
            grad,
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model in declaration order.
///
/// Modules hold [`ParamId`]s; the tape borrows the store during a forward
/// pass and gradients are folded back in with [`ParamStore::accumulate`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param::new(value, trainable));
        self.names.push(name.into());
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (p, n))| (ParamId(i), n.as_str(), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).trainable).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds tape gradients into the accumulators. Frozen parameters are
    /// skipped; their accumulators stay zero.
    pub fn accumulate(&mut self, grads: &[(ParamId, Matrix)]) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Number of scalar entries, split as `(trainable, frozen)`.
    pub fn count(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.len(), f)
            } else {
                (t, f + p.len())
            }
        })
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}
