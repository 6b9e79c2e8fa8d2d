//! Glue between the stages: decoding cores to fields, guided reconstruction and
//! scoring against ground truth.

use nalgebra::{DMatrix, DVector};

use crate::data::{grid_coords, vrmse, SyntheticRecord};
use crate::error::{ensure, Result};
use crate::ftm::{CoreSequence, CoreStandardizer, ObservationSet, TrainedFtm};
use crate::gpsd::{Denoiser, NoiseSchedule, TrainedGpsd};
use crate::mpdps::{mpdps_sample, GuidanceConfig, GuidanceSet};
use crate::tucker::{design_matrix, CoordinateTuple, FeatureMap};

/// Decodes raw cores on a fixed grid through one precomputed design matrix.
pub struct GridDecoder {
    pub grid: Vec<usize>,
    a: DMatrix<f64>,
}

impl GridDecoder {
    pub fn new<F: FeatureMap + ?Sized>(latents: &F, grid: &[usize]) -> Result<Self> {
        ensure!(grid.len() == latents.order(), "grid has {} modes, model has {}", grid.len(), latents.order());
        let coords: Vec<CoordinateTuple> = grid_coords(grid)
            .into_iter()
            .map(|x| CoordinateTuple::new(x, 0.0))
            .collect();
        Ok(Self {
            grid: grid.to_vec(),
            a: design_matrix(latents, &coords)?,
        })
    }

    pub fn volume(&self) -> usize {
        self.a.nrows()
    }

    /// One frame per core of a raw (unstandardized) sequence.
    pub fn decode(&self, seq: &CoreSequence) -> Result<Vec<Vec<f64>>> {
        ensure!(seq.core_dim() == self.a.ncols(), "core size does not match the decoder");
        Ok(seq
            .cores
            .iter()
            .map(|c| (&self.a * DVector::from_column_slice(c.data())).iter().copied().collect())
            .collect())
    }
}

/// VRMSE over all frames together and per frame.
pub fn score_frames(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    ensure!(pred.len() == truth.len() && !pred.is_empty(), "frame counts differ");
    let all_p: Vec<f64> = pred.concat();
    let all_t: Vec<f64> = truth.concat();
    let total = vrmse(&all_p, &all_t)?;
    let per = pred.iter().zip(truth).map(|(p, t)| vrmse(p, t)).collect::<Result<Vec<_>>>()?;
    Ok((total, per))
}

/// The two trained stages needed for sampling.
pub struct Model<'a> {
    pub ftm: &'a TrainedFtm,
    pub gpsd: &'a TrainedGpsd,
    pub schedule: &'a NoiseSchedule,
}

impl Model<'_> {
    pub fn ranks(&self) -> &[usize] {
        &self.ftm.config.ranks
    }

    pub fn standardizer(&self) -> &CoreStandardizer {
        &self.ftm.standardizer
    }

    /// Samples standardized cores at `target_times` guided by `obs` and maps them
    /// back to raw core space.
    pub fn reconstruct(
        &self,
        obs: &ObservationSet,
        target_times: &[f64],
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<CoreSequence> {
        let set = GuidanceSet::build(&self.ftm.latents, self.standardizer(), obs, target_times, guidance)?;
        self.sample_with(&self.gpsd.denoiser, &set, seed)
    }

    pub fn sample_with<D: Denoiser + ?Sized>(&self, denoiser: &D, set: &GuidanceSet, seed: u64) -> Result<CoreSequence> {
        let z = mpdps_sample(denoiser, self.schedule, &self.gpsd.noise, set, self.ranks(), seed)?;
        Ok(self.standardizer().destandardize(&z))
    }
}

/// Ground-truth frames of a record rendered at arbitrary times on a grid.
pub fn truth_frames(record: &SyntheticRecord, grid: &[usize], times: &[f64]) -> Vec<Vec<f64>> {
    record.render(grid, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tucker::{decode_entry, CoreTensor, FnFeatureMap};

    #[test]
    fn grid_decoder_matches_entrywise_decode() {
        let lat = FnFeatureMap::new(
            vec![2, 2],
            vec![Box::new(|x: f64| vec![1.0, x]), Box::new(|x: f64| vec![x * x, 1.0 - x])],
        )
        .unwrap();
        let core = CoreTensor::new(vec![2, 2], vec![0.3, -0.2, 1.1, 0.5]).unwrap();
        let seq = CoreSequence::new(vec![0.0], vec![core.clone()]).unwrap();
        let dec = GridDecoder::new(&lat, &[5, 4]).unwrap();
        let frame = &dec.decode(&seq).unwrap()[0];
        for (x, v) in grid_coords(&[5, 4]).iter().zip(frame) {
            let want = decode_entry(&core, &lat, &CoordinateTuple::new(x.clone(), 0.0)).unwrap();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_frames_score_zero() {
        let t = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0]];
        let (total, per) = score_frames(&t, &t).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
    }
}
