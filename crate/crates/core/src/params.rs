//! Named parameter storage with optimizer grouping.

use ndarray::ArrayD;
use rand::Rng;

/// Gaussian init truncated at two standard deviations (resampled).
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut (impl Rng + ?Sized)) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| loop {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return std * z;
        }
    })
}

/// Learning-rate / checkpoint grouping for a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    AnnBackbone,
    SnnBackbone,
    Adapter,
    Tda,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::AnnBackbone,
        ParamGroup::SnnBackbone,
        ParamGroup::Adapter,
        ParamGroup::Tda,
        ParamGroup::Head,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::AnnBackbone => "ann_backbone",
            ParamGroup::SnnBackbone => "snn_backbone",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Tda => "tda",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f64>,
}

/// Flat store of model parameters; ids are dense indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn num_scalars(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.map_or(true, |g| e.group == g))
            .map(|e| e.value.len())
            .sum()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &ArrayD<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// L2 norm over one group's gradients (0 when absent).
    pub fn group_norm(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        let mut sq = 0.0;
        for (id, e) in store.iter() {
            if e.group == group {
                if let Some(g) = self.get(id) {
                    sq += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        sq.sqrt()
    }
}
