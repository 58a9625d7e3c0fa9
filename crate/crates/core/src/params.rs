//! Named parameter tensors, running batch-norm statistics and their
//! flattened real-pair view.

use fas_autodiff::{BnMode, BnStats, CTensor, Tape, Var, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: CTensor,
}

/// Ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: CTensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &CTensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut CTensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of real scalars (two per complex entry).
    pub fn num_real(&self) -> usize {
        2 * self.entries.iter().map(|e| e.value.len()).sum::<usize>()
    }

    /// Real and imaginary parts of every entry, interleaved, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_real());
        for e in &self.entries {
            for z in e.value.data() {
                out.push(z.re);
                out.push(z.im);
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_real() {
            return Err(FasError::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_real()
            )));
        }
        let mut it = flat.chunks_exact(2);
        for e in &mut self.entries {
            for z in e.value.data_mut() {
                let c = it.next().unwrap();
                *z = C64::new(c[0], c[1]);
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().fill(C64::new(0.0, 0.0));
        }
    }
}

/// Running statistics and hyperparameters of one complex batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBnState {
    pub name: String,
    pub mean: Vec<C64>,
    /// `(V_rr, V_ri, V_ii)` per feature.
    pub cov: Vec<[f64; 3]>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl ComplexBnState {
    /// Zero mean and identity covariance.
    pub fn new(
        name: impl Into<String>,
        features: usize,
        momentum: f64,
        eps: f64,
        mode: BnMode,
    ) -> Self {
        Self {
            name: name.into(),
            mean: vec![C64::new(0.0, 0.0); features],
            cov: vec![[1.0, 0.0, 1.0]; features],
            momentum,
            eps,
            mode,
        }
    }

    /// Exponential moving average towards the batch statistics.
    pub fn update(&mut self, batch: &BnStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = *r * (1.0 - m) + b * m;
        }
        for (r, b) in self.cov.iter_mut().zip(&batch.cov) {
            for i in 0..3 {
                r[i] = (1.0 - m) * r[i] + m * b[i];
            }
        }
    }
}

/// Deterministic parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-normal fan-in weights: real and imaginary parts are each
    /// `N(0, 1/fan_in)`, so complex entries have variance `2/fan_in`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> CTensor {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| C64::new(normal.sample(&mut self.rng), normal.sample(&mut self.rng)))
            .collect();
        CTensor::new(shape.to_vec(), data).expect("shape matches")
    }
}
