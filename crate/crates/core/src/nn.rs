//! Named parameter storage and the small set of layers the models use.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv3dGeometry, Float, Tensor};

/// Flat, name-ordered parameter table. Names are `/`-separated paths such
/// as `vqgan/enc/conv_in/w`; the ordering makes iteration deterministic.
#[derive(Clone)]
pub struct ParamStore<F: Float> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: bool,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Registers (or replaces) a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor<F>) {
        self.params.insert(name.into(), value.detach_requires_grad());
    }

    /// The parameter as a graph leaf. Frozen stores hand out constants.
    pub fn get(&self, name: &str) -> Result<Tensor<F>> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))?;
        Ok(if self.frozen { t.detach() } else { t.clone() })
    }

    /// The stored leaf itself (carries accumulated gradients).
    pub fn leaf(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces the value of an existing parameter with a fresh leaf.
    pub fn set_data(&mut self, name: &str, data: Vec<F>) -> Result<()> {
        let old = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))?;
        *old = Tensor::leaf(data, old.shape(), true)?;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(|t| t.zero_grad());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// CRC-32 over names and values; equal fingerprints mean equal contents
    /// with overwhelming probability.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize()
    }
}

/// Normal initialisation scaled by `gain / sqrt(fan_in)`.
pub fn init_normal<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
}

impl Linear {
    /// Weight stored as `[in, out]` so that `y = x · W + b`.
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = format!("{name}/w");
        store.insert(&w, &init_normal(&[d_in, d_out], d_in, 1.0, rng));
        let b = bias.then(|| {
            let b = format!("{name}/b");
            store.insert(&b, &Tensor::zeros(&[d_out]));
            b
        });
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = x.matmul(&store.get(&self.w)?)?;
        match &self.b {
            Some(b) => y.add(&store.get(b)?),
            None => Ok(y),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    w: String,
    b: String,
    geom: Conv3dGeometry,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
        gain: f64,
    ) -> Self {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let fan_in = c_in * kernel.iter().product::<usize>();
        store.insert(&w, &init_normal(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], fan_in, gain, rng));
        store.insert(&b, &Tensor::zeros(&[c_out]));
        Self { w, b, geom }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv3d(&store.get(&self.w)?, Some(&store.get(&self.b)?), self.geom)
    }

    pub fn param_names(&self) -> [&str; 2] {
        [&self.w, &self.b]
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    w: String,
    b: String,
    geom: Conv3dGeometry,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
        gain: f64,
    ) -> Self {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        // each output sees roughly c_in * prod(k / s) inputs
        let overlap: usize = (0..3).map(|i| (kernel[i] / geom.stride[i]).max(1)).product();
        store.insert(&w, &init_normal(&[c_in, c_out, kernel[0], kernel[1], kernel[2]], c_in * overlap, gain, rng));
        store.insert(&b, &Tensor::zeros(&[c_out]));
        Self { w, b, geom }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv_transpose3d(&store.get(&self.w)?, Some(&store.get(&self.b)?), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    groups: usize,
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = format!("{name}/gamma");
        let beta = format!("{name}/beta");
        store.insert(&gamma, &Tensor::ones(&[channels]));
        store.insert(&beta, &Tensor::zeros(&[channels]));
        // fall back to fewer groups for narrow layers
        let mut g = groups.min(channels).max(1);
        while !channels.is_multiple_of(g) {
            g -= 1;
        }
        Self { gamma, beta, groups: g }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.group_norm(self.groups, &store.get(&self.gamma)?, &store.get(&self.beta)?, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        let gamma = format!("{name}/gamma");
        let beta = format!("{name}/beta");
        store.insert(&gamma, &Tensor::ones(&[d]));
        store.insert(&beta, &Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&store.get(&self.gamma)?, &store.get(&self.beta)?, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: String,
    rows: usize,
}

impl Embedding {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        rows: usize,
        d: usize,
        std: f64,
    ) -> Self {
        let table = format!("{name}/table");
        store.insert(&table, &Tensor::randn(&[rows, d], std, rng));
        Self { table, rows }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, ids: &[usize]) -> Result<Tensor<F>> {
        store.get(&self.table)?.index_select(ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn frozen_store_yields_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true);
        let x = Tensor::<f64>::ones(&[4, 3]);
        assert!(lin.forward(&store, &x).unwrap().requires_grad());
        store.freeze();
        assert!(!lin.forward(&store, &x).unwrap().requires_grad());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", &Tensor::ones(&[2]));
        let before = store.fingerprint();
        store.set_data("a", vec![1.0, 2.0]).unwrap();
        assert_ne!(before, store.fingerprint());
        assert!(store.set_data("missing", vec![]).is_err());
    }

    #[test]
    fn group_norm_falls_back_to_divisor() {
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 12, 8);
        assert_eq!(gn.groups, 6);
    }
}
