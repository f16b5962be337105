use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// A named block of parameters with its shape. `fan_in` drives the
/// initialization bound and is not persisted.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), fan_in }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered segment descriptor shared by all models of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for s in &segments {
            offsets.push(total);
            total += s.size();
        }
        Self { segments, offsets, total }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let start = self.offsets[index];
        start..start + self.segments[index].size()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Split a flat buffer into one slice per segment, in layout order.
    pub fn split<'a, T>(&self, mut data: &'a [T]) -> Vec<&'a [T]> {
        let mut out = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let (head, tail) = data.split_at(s.size());
            out.push(head);
            data = tail;
        }
        out
    }

    pub fn split_mut<'a, T>(&self, mut data: &'a mut [T]) -> Vec<&'a mut [T]> {
        let mut out = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let (head, tail) = std::mem::take(&mut data).split_at_mut(s.size());
            out.push(head);
            data = tail;
        }
        out
    }

    fn check(&self, other: &Layout) -> Result<()> {
        if self == other {
            return Ok(());
        }
        let first = self
            .segments
            .iter()
            .zip(&other.segments)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("segment {} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} vs {} segments", self.segments.len(), other.segments.len()));
        Err(Error::LayoutMismatch(first))
    }
}

/// Flat ordered array of every trainable scalar of one model; the unit of
/// federated exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParameterVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    /// Uniform initialization in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` per segment.
    pub fn init_uniform(layout: Arc<Layout>, rng: &mut Rng) -> Self {
        let mut values = Vec::with_capacity(layout.len());
        for s in layout.segments() {
            let bound = 1.0 / (s.fan_in.max(1) as f64).sqrt();
            values.extend((0..s.size()).map(|_| rng.gen_range(-bound..bound) as f32));
        }
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_layout(&self, other: &Layout) -> Result<()> {
        self.layout.check(other)
    }

    /// Copy values from another vector of the same layout.
    pub fn assign(&mut self, other: &ParameterVector) -> Result<()> {
        self.check_layout(other.layout())?;
        self.values.copy_from_slice(&other.values);
        Ok(())
    }

    pub fn segment(&self, name: &str) -> Option<&[f32]> {
        self.layout.find(name).map(|i| &self.values[self.layout.range(i)])
    }
}

/// Gradient buffer aligned with a [`ParameterVector`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} gradient values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|i| &self.values[self.layout.range(i)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::new(vec![Segment::new("w", &[2, 3], 3), Segment::new("b", &[2], 3)]))
    }

    #[test]
    fn layout_offsets() {
        let l = layout();
        assert_eq!(l.len(), 8);
        assert_eq!(l.range(1), 6..8);
        let data: Vec<u8> = (0..8).collect();
        let parts = l.split(&data);
        assert_eq!(parts[0], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(parts[1], &[6, 7]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = ParameterVector::init_uniform(layout(), &mut Rng::seed_from_u64(3));
        let b = ParameterVector::init_uniform(layout(), &mut Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let bound = 1.0 / 3f32.sqrt();
        assert!(a.values().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let a = ParameterVector::zeros(layout());
        let other = Arc::new(Layout::new(vec![Segment::new("w", &[3, 2], 2), Segment::new("b", &[2], 2)]));
        let mut b = ParameterVector::zeros(other);
        assert!(matches!(b.assign(&a), Err(Error::LayoutMismatch(_))));
        assert!(ParameterVector::new(layout(), vec![0.0; 3]).is_err());
    }
}
