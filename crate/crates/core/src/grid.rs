//! Latent grids and text conditions.
//!
//! A [`LatentGrid`] is an `height x width x channels` real field stored in
//! row-major site order with channels innermost, so `site(i)` is a contiguous
//! slice of length `channels`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Standard-normal grid drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for v in g.data.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        g
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    #[inline]
    pub fn site(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn site_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &LatentGrid) -> LatentGrid {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &LatentGrid) -> LatentGrid {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scaled(&self, s: f64) -> LatentGrid {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> LatentGrid {
        debug_assert!(self.same_shape(other));
        LatentGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Mean and (population) variance over every value in the grid.
    pub fn mean_variance(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }
}

/// Sentinel class id for the null (unconditional) prompt.
pub const UNCONDITIONAL: usize = usize::MAX;

/// A synthetic "prompt": a class id plus its embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub class_id: usize,
    pub embedding: Vec<f64>,
}

impl TextCondition {
    pub fn unconditional(dim: usize) -> Self {
        Self {
            class_id: UNCONDITIONAL,
            embedding: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn is_unconditional(&self) -> bool {
        self.class_id == UNCONDITIONAL
    }
}

/// Frozen embedding table standing in for a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    table: Vec<Vec<f64>>,
}

impl TextEncoder {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e4c0_de00_0001);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self { dim, table }
    }

    pub fn from_table(table: Vec<Vec<f64>>) -> Result<Self> {
        let dim = table.first().map(|r| r.len()).unwrap_or(0);
        if table.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged embedding table"));
        }
        Ok(Self { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.table.len()
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn condition(&self, class_id: usize) -> Result<TextCondition> {
        if class_id == UNCONDITIONAL {
            return Ok(TextCondition::unconditional(self.dim));
        }
        let embedding = self
            .table
            .get(class_id)
            .ok_or_else(|| Error::invalid(format!("class id {class_id} out of range")))?
            .clone();
        Ok(TextCondition { class_id, embedding })
    }

    pub fn unconditional(&self) -> TextCondition {
        TextCondition::unconditional(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(LatentGrid::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(LatentGrid::from_vec(2, 2, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn site_slices_are_channel_contiguous() {
        let g = LatentGrid::from_vec(1, 2, 3, (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(g.site(1), &[3.0, 4.0, 5.0]);
        assert_eq!(g.get(0, 1, 2), 5.0);
    }

    #[test]
    fn encoder_is_deterministic_per_class() {
        let a = TextEncoder::new(4, 6, 9);
        let b = TextEncoder::new(4, 6, 9);
        assert_eq!(a.condition(2).unwrap(), b.condition(2).unwrap());
        assert_ne!(a.condition(1).unwrap().embedding, a.condition(2).unwrap().embedding);
        assert!(a.condition(4).is_err());
        assert!(a.condition(UNCONDITIONAL).unwrap().embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn randn_is_seeded() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert_eq!(LatentGrid::randn(3, 3, 2, &mut r1), LatentGrid::randn(3, 3, 2, &mut r2));
    }
}
