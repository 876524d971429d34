use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::Matrix;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Identifies one parameter tensor inside one store for gradient bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

/// A named, ordered collection of parameter tensors.
///
/// Cloning yields an independent store with a new tag, so gradients of the
/// clone and the original never alias.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    values: Vec<Matrix>,
    requires_grad: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            tag: fresh_tag(),
            names: self.names.clone(),
            values: self.values.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: fresh_tag(), names: Vec::new(), values: Vec::new(), requires_grad: true }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> usize {
        // Box-Muller; keeps the dependency surface to `rand` alone.
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> usize {
        self.add(name, Matrix::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &Matrix {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { store: self.tag, index }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Registers (or reuses) the graph leaf for parameter `index`.
    pub fn var(&self, g: &mut Graph, index: usize) -> Var {
        g.param(self.key(index), &self.values[index], self.requires_grad)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for x in m.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces values from `other` by name; shapes must match exactly.
    pub fn load_from(&mut self, other: &[(String, Matrix)]) -> Result<(), String> {
        for (name, m) in other {
            let idx = self.index_of(name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.values[idx].shape() != m.shape() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.values[idx].shape(),
                    m.shape()
                ));
            }
            self.values[idx] = m.clone();
        }
        if other.len() != self.values.len() {
            return Err(format!("expected {} parameters, found {}", self.values.len(), other.len()));
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<(String, Matrix)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}
