use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Spec(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on the tape as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Moves tape gradients of `vars` (as returned by [`ParamSet::bind`])
    /// onto the parameter tensors, adding to any already present.
    pub fn collect_grads(&mut self, graph: &mut Graph<T>, vars: &[Var]) -> Result<()> {
        for ((_, tensor), var) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = graph.take_grad(*var) {
                match tensor.take_grad() {
                    Some(mut acc) => {
                        for (a, d) in acc.iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                        tensor.set_grad(acc)?;
                    }
                    None => tensor.set_grad(g)?,
                }
            }
        }
        Ok(())
    }

    /// Removes and returns the tensors from index `at` onward.
    pub fn split_off(&mut self, at: usize) -> Self {
        Self {
            entries: self.entries.split_off(at),
        }
    }

    pub fn append(&mut self, mut other: Self) {
        self.entries.append(&mut other.entries);
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// True when every tensor matches `other` bit for bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.dims() == b.dims()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}
