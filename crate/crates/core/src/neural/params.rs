use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A named dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Named trainable arrays. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(Error::Config(format!("parameter `{name}`: data length does not match {rows}x{cols}")));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, rows, cols, data });
        Ok(id)
    }

    /// Uniform(-scale, scale) initialization.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, rows, cols, data).expect("fresh parameter name")
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols]).expect("fresh parameter name")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.index()]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i as u32), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Gradient accumulators paired with a [`ParameterSet`]; buffers are allocated
/// on first touch.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn new(params: &ParameterSet) -> Gradients {
        Gradients {
            grads: vec![Vec::new(); params.len()],
        }
    }

    pub(crate) fn buf(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        let g = &mut self.grads[id.index()];
        if g.is_empty() {
            *g = vec![0.0; len];
        }
        g
    }

    /// Gradient of one parameter, `None` when it was never touched.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        let g = &self.grads[id.index()];
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn get_or_zero(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if b.is_empty() {
                continue;
            }
            if a.is_empty() {
                *a = b.clone();
            } else {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn check_finite(&self, params: &ParameterSet) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.params[i].name)));
            }
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.clear();
        }
    }
}
