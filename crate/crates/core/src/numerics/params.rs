//! Named, flat parameter storage. Every learnable tensor lives in one flat
//! vector, which keeps the optimizer, checkpointing, and finite-difference
//! verification trivial.

use std::collections::HashMap;

use rand::RngCore;

use super::{Scalar, Tensor};
use crate::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Initialization scheme for a parameter tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Every entry set to the given value.
    Const(f64),
    /// Normal(0, std^2) resampled until |z| <= 2 std.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    data: Vec<F>,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            data: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        rng: &mut impl RngCore,
    ) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let offset = self.data.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat(F::zero()).take(n)),
            Init::Ones => self.data.extend(std::iter::repeat(F::one()).take(n)),
            Init::Const(v) => self
                .data
                .extend(std::iter::repeat(F::from_f64(v)).take(n)),
            Init::TruncNormal(std) => {
                for _ in 0..n {
                    self.data.push(F::from_f64(trunc_normal(rng, std)));
                }
            }
        }
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            offset,
        });
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn tensor(&self, idx: usize) -> Tensor<F> {
        let e = &self.entries[idx];
        Tensor::new(e.shape.clone(), self.data[e.offset..e.offset + e.len()].to_vec())
            .expect("entry shape matches stored data")
    }

    pub fn tensor_by_name(&self, name: &str) -> Result<Tensor<F>> {
        Ok(self.tensor(self.entry_index(name)?))
    }

    pub fn set(&mut self, idx: usize, values: &[F]) {
        let e = &self.entries[idx];
        assert_eq!(values.len(), e.len());
        self.data[e.offset..e.offset + values.len()].copy_from_slice(values);
    }

    /// Re-create the store with the same entry layout but a different scalar
    /// type (used to lift a trained f32 model into f64 for verification).
    pub fn convert<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal via Box-Muller on 53-bit uniforms, resampled into [-2, 2]
/// standard deviations, then scaled.
fn trunc_normal(rng: &mut impl RngCore, std: f64) -> f64 {
    loop {
        let u1 = uniform01(rng);
        let u2 = uniform01(rng);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn uniform01(rng: &mut impl RngCore) -> f64 {
    // (0, 1]: avoids ln(0)
    let x = rng.next_u64() >> 11; // 53 bits
    (x as f64 + 1.0) / (1u64 << 53) as f64
}
