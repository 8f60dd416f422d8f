//! Reward landscapes sampled on a regular grid of cell centres.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::artifact::RewardArtifact;
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::toyworld::StateVec;

/// Fixes one coordinate of a 3-D domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub axis: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub res: usize,
    /// Row-major: `values[row * res + col]`, rows along the second free axis.
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub axes: (usize, usize),
    pub lo: (f64, f64),
    pub hi: (f64, f64),
}

pub fn heatmap(artifact: &RewardArtifact, res: usize, slice: Option<Slice>) -> Result<Heatmap> {
    let dom = &artifact.scorer.domain;
    if res == 0 {
        return Err(invalid("resolution must be at least 1"));
    }
    let (ax, ay) = match (dom.dims, slice) {
        (2, _) => (0, 1),
        (3, Some(s)) if s.axis < 3 => {
            if !(dom.lo[s.axis]..=dom.hi[s.axis]).contains(&s.value) {
                return Err(Error::OutOfDomain(vec![s.value]));
            }
            let free: Vec<usize> = (0..3).filter(|a| *a != s.axis).collect();
            (free[0], free[1])
        }
        (3, _) => return Err(invalid("3-D heatmaps need a slice")),
        _ => return Err(invalid("heatmaps support 2-D and 3-D domains")),
    };
    let coord =
        |axis: usize, k: usize| dom.lo[axis] + dom.extent(axis) * (k as f64 + 0.5) / res as f64;
    let values = par::map_range(res * res, |i| {
        let (row, col) = (i / res, i % res);
        let mut p = vec![0.0; dom.dims];
        if let Some(s) = slice.filter(|_| dom.dims == 3) {
            p[s.axis] = s.value;
        }
        p[ax] = coord(ax, col);
        p[ay] = coord(ay, row);
        artifact.reward_or_zero(&StateVec::new(p), 0)
    });
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Heatmap {
        res,
        values,
        min,
        max,
        axes: (ax, ay),
        lo: (dom.lo[ax], dom.lo[ay]),
        hi: (dom.hi[ax], dom.hi[ay]),
    })
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.res + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, v)| if *v > b.1 { (i, *v) } else { b },
            )
            .0;
        (i / self.res, i % self.res)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "x", "y", "reward"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for row in 0..self.res {
            for col in 0..self.res {
                let x = self.lo.0 + (self.hi.0 - self.lo.0) * (col as f64 + 0.5) / self.res as f64;
                let y = self.lo.1 + (self.hi.1 - self.lo.1) * (row as f64 + 0.5) / self.res as f64;
                w.write_record([
                    row.to_string(),
                    col.to_string(),
                    x.to_string(),
                    y.to_string(),
                    self.at(row, col).to_string(),
                ])
                .map_err(|e| Error::Data(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
