use super::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`ParamBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat, ordered store of every named tensor in a model.
///
/// Trainable entries (`requires_grad = true`) are what the optimizer and the
/// gradient checker enumerate; non-trainable entries hold state such as
/// batch-norm running statistics so checkpoints capture the whole model.
#[derive(Debug, Clone, Default)]
pub struct ParamBank {
    entries: Vec<BankEntry>,
}

impl ParamBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter under a dot-separated name.
    pub fn param(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(BankEntry {
            name: name.into(),
            tensor: tensor.with_grad(),
        });
        id
    }

    /// Registers non-trainable state (serialized, never optimized).
    pub fn state(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let mut tensor = tensor;
        tensor.requires_grad = false;
        let id = ParamId(self.entries.len());
        self.entries.push(BankEntry {
            name: name.into(),
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
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

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &BankEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.tensor.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Total number of scalar values in trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.tensor.requires_grad)
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Copies values from another bank by name; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamBank) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Corrupt {
                    what: "checkpoint",
                    msg: format!("missing parameter `{}`", e.name),
                })?;
            if src.tensor.shape != e.tensor.shape {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: e.tensor.shape.clone(),
                    rhs: src.tensor.shape.clone(),
                });
            }
            e.tensor.data.copy_from_slice(&src.tensor.data);
        }
        Ok(())
    }

    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.tensor.data.iter().any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_lookup() {
        let mut bank = ParamBank::new();
        let a = bank.param("backbone.layer0.phi1", Tensor::zeros(vec![2, 2]));
        let s = bank.state("backbone.layer0.bn.running_mean", Tensor::zeros(vec![2]));
        assert_eq!(bank.lookup("backbone.layer0.phi1"), Some(a));
        assert!(bank.get(a).requires_grad);
        assert!(!bank.get(s).requires_grad);
        assert_eq!(bank.trainable_ids(), vec![a]);
    }
}
