use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// A named trainable tensor and its most recently applied gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Float = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        self.params.insert(name.clone(), Parameter { name, value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Layout over the parameters whose name satisfies `keep`.
    pub fn layout(&self, keep: impl Fn(&str) -> bool) -> Arc<GradientLayout> {
        let entries = self
            .params
            .values()
            .filter(|p| keep(&p.name))
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        Arc::new(GradientLayout::new(entries))
    }

    /// Stores each block of `grad` as the `grad` field of its parameter.
    pub fn set_grads(&mut self, grad: &GradientVector<T>) -> Result<()> {
        for (i, name) in grad.layout().names().iter().enumerate() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| DiffError::UnknownParameter(name.clone()))?;
            let block = grad.block(i).to_vec();
            p.grad = Some(Tensor::new(p.value.shape().to_vec(), block)?);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Ordered parameter names with their shapes and flat offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientLayout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl GradientLayout {
    /// Entries are sorted by name.
    pub fn new(mut entries: Vec<(String, Vec<usize>)>) -> Self {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for (_, s) in &entries {
            offsets.push(total);
            total += s.iter().product::<usize>();
        }
        let (names, shapes) = entries.into_iter().unzip();
        Self { names, shapes, offsets, total }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }
}

/// Gradient over a parameter subset as one flat vector in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T: Float = f32> {
    layout: Arc<GradientLayout>,
    flat: Vec<T>,
}

impl<T: Float> GradientVector<T> {
    pub fn new(layout: Arc<GradientLayout>, flat: Vec<T>) -> Self {
        assert_eq!(layout.total(), flat.len(), "flat length must match layout");
        Self { layout, flat }
    }

    pub fn zeros(layout: Arc<GradientLayout>) -> Self {
        let n = layout.total();
        Self::new(layout, vec![T::zero(); n])
    }

    pub fn layout(&self) -> &Arc<GradientLayout> {
        &self.layout
    }

    pub fn param_names(&self) -> &[String] {
        self.layout.names()
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn block(&self, i: usize) -> &[T] {
        let off = self.layout.offset(i);
        let n: usize = self.layout.shape(i).iter().product();
        &self.flat[off..off + n]
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.layout.position(name).map(|i| self.block(i))
    }

    /// Sequential inner product in layout order.
    pub fn dot(&self, other: &Self) -> T {
        self.flat
            .iter()
            .zip(&other.flat)
            .fold(T::zero(), |s, (&a, &b)| s + a * b)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, c: T) {
        self.flat.iter_mut().for_each(|x| *x = *x * c);
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: T, other: &Self) {
        for (a, &b) in self.flat.iter_mut().zip(&other.flat) {
            *a = *a + c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}
