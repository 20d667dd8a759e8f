use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors with a canonical flattening order: names sorted
/// lexicographically, each tensor row-major.
///
/// Every mutable access bumps an internal version so that activation tapes
/// recorded against an older state can be detected as stale.
#[derive(Debug)]
pub struct ParamVector {
    tensors: BTreeMap<String, Tensor>,
    id: u64,
    version: u64,
}

impl Clone for ParamVector {
    fn clone(&self) -> Self {
        ParamVector {
            tensors: self.tensors.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        ParamVector::new()
    }
}

impl FromIterator<(String, Tensor)> for ParamVector {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamVector {
            tensors: iter.into_iter().collect(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector {
            tensors: BTreeMap::new(),
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.version += 1;
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.version += 1;
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.version += 1;
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }

    pub fn zeros_like(&self) -> ParamVector {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    /// True when both vectors have the same names and shapes.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Input("parameter vectors have different layouts".into()))
        }
    }

    /// Canonical flattened view.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        let parts: Vec<f64> = self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.dot(b))
            .collect();
        Ok(parts.iter().sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors.values().map(Tensor::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        self.version += 1;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.version += 1;
        self.tensors.values_mut().for_each(|t| t.scale(alpha));
    }

    /// First non-finite scalar as `name[index]`.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors
            .iter()
            .find_map(|(k, t)| t.first_non_finite().map(|i| format!("{k}[{i}]")))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Moves every tensor into `dest` under `prefix.name`.
    pub fn into_prefixed(self, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + '_ {
        self.tensors
            .into_iter()
            .map(move |(k, t)| (format!("{prefix}.{k}"), t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(entries: &[(&str, &[f64])]) -> ParamVector {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn flatten_order_is_lexicographic() {
        let p = pv(&[("b", &[3.0]), ("a", &[1.0, 2.0])]);
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0]);
        assert_eq!(p.flatten(), p.flatten());
    }

    #[test]
    fn dot_requires_matching_layout() {
        let a = pv(&[("a", &[1.0, 2.0])]);
        let b = pv(&[("a", &[3.0, -1.0])]);
        assert_eq!(a.dot(&b).unwrap(), 1.0);
        let c = pv(&[("z", &[3.0, -1.0])]);
        assert!(a.dot(&c).is_err());
    }

    #[test]
    fn mutation_changes_stamp_but_clone_gets_new_identity() {
        let mut a = pv(&[("a", &[1.0])]);
        let s0 = a.stamp();
        a.scale(2.0);
        assert_ne!(a.stamp(), s0);
        let b = a.clone();
        assert_ne!(a.stamp().0, b.stamp().0);
        assert_eq!(a, b);
    }
}
