use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for. Only `Weight` receives weight decay; `Buffer`
/// entries are stored and checkpointed but never trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Affine,
    Threshold,
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let mut tensor = tensor;
        tensor.set_requires_grad(kind.is_trainable());
        self.entries.push(Entry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Number of trainable scalars (everything except buffers).
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn num_elements_of(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Global L2 norm of all gradients, summed in parameter order.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            e.tensor.scale_grad(s);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }
}
