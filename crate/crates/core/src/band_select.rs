//! Visible/infrared band split and representative-band selection.

use crate::error::{Error, Result};
use crate::hsi_io::HsiCube;

/// Upper edge of the visible range.
pub const DEFAULT_THRESHOLD_NM: f64 = 760.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BandSplit {
    pub visible_indices: Vec<usize>,
    pub infrared_indices: Vec<usize>,
    pub threshold_nm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Visible,
    Infrared,
}

impl BandSplit {
    pub fn side(&self, side: Side) -> &[usize] {
        match side {
            Side::Visible => &self.visible_indices,
            Side::Infrared => &self.infrared_indices,
        }
    }
}

/// Partitions band indices into `<= threshold_nm` (visible) and
/// `> threshold_nm` (infrared). Both sides must be non-empty.
pub fn split_spectrum(cube: &HsiCube, threshold_nm: f64) -> Result<BandSplit> {
    let wl = cube.wavelengths();
    let (lo, hi) = (wl[0], wl[wl.len() - 1]);
    if !(lo..=hi).contains(&threshold_nm) {
        return Err(Error::Precondition(format!(
            "threshold {threshold_nm} nm outside cube range [{lo}, {hi}] nm"
        )));
    }
    let (visible_indices, infrared_indices): (Vec<usize>, Vec<usize>) =
        (0..wl.len()).partition(|&i| wl[i] <= threshold_nm);
    if visible_indices.is_empty() || infrared_indices.is_empty() {
        return Err(Error::SpectralCoverage(format!(
            "split at {threshold_nm} nm leaves {} visible and {} infrared bands",
            visible_indices.len(),
            infrared_indices.len()
        )));
    }
    Ok(BandSplit { visible_indices, infrared_indices, threshold_nm })
}

/// Strategy for picking representative channels out of one spectral side.
pub trait BandSelector {
    /// Returns `count` indices drawn from `candidates`, ascending.
    fn select(&self, cube: &HsiCube, candidates: &[usize], count: usize) -> Result<Vec<usize>>;
}

/// Keeps the bands with the highest spatial variance; ties go to the lower
/// band index.
#[derive(Debug, Clone, Copy, Default)]
pub struct VarianceRanking;

pub fn band_variance(cube: &HsiCube, band: usize) -> f64 {
    let img = cube.band_image(band);
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

impl BandSelector for VarianceRanking {
    fn select(&self, cube: &HsiCube, candidates: &[usize], count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > candidates.len() {
            return Err(Error::Parameter(format!(
                "cannot select {count} bands from a side of {}",
                candidates.len()
            )));
        }
        let mut scored: Vec<(f64, usize)> =
            candidates.iter().map(|&b| (band_variance(cube, b), b)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut picked: Vec<usize> = scored[..count].iter().map(|&(_, b)| b).collect();
        picked.sort_unstable();
        Ok(picked)
    }
}

pub fn select_representative(cube: &HsiCube, split: &BandSplit, side: Side, count: usize) -> Result<Vec<usize>> {
    VarianceRanking.select(cube, split.side(side), count)
}
