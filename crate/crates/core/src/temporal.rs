//! Learnable relative temporal embeddings.
//!
//! A `T₀ × d` table represents positions spread uniformly over a video's length:
//! row 0 is the start, row `T₀ − 1` the end. Anything that reads the table at a
//! fractional position does so by linear blending of the two neighbouring rows,
//! expressed as a constant weight matrix times the table so gradients reach it.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Grid points closer than this to an integer row index read that row exactly.
const GRID_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalTable<S> {
    table: Tensor<S>,
}

/// Timestamp of grid row `i` in a video of `duration` seconds.
///
/// [`TemporalTable::decode_timestamp`] returns exactly this value, so grid
/// timestamps round-trip bit-for-bit.
pub fn grid_timestamp(i: usize, rows: usize, duration: f64) -> f64 {
    (i as f64 / (rows - 1) as f64) * duration
}

/// Blend weights `(lower, upper, frac)` for a fractional source coordinate.
fn blend(coord: f64, rows: usize) -> (usize, usize, f64) {
    let nearest = coord.round();
    if (coord - nearest).abs() < GRID_SNAP {
        let i = (nearest.max(0.0) as usize).min(rows - 1);
        return (i, i, 0.0);
    }
    let lo = (coord.floor().max(0.0) as usize).min(rows - 1);
    let hi = (lo + 1).min(rows - 1);
    (lo, hi, coord - lo as f64)
}

fn weights_for<S: Scalar>(coords: &[f64], rows: usize) -> Result<Tensor<S>> {
    let mut w = Tensor::zeros(&[coords.len(), rows]);
    for (k, &x) in coords.iter().enumerate() {
        let (lo, hi, frac) = blend(x, rows);
        if lo == hi {
            w.set(k, lo, S::one());
        } else {
            w.set(k, lo, S::of(1.0 - frac));
            w.set(k, hi, S::of(frac));
        }
    }
    Ok(w)
}

/// Align-corners resampling matrix (`target_len × rows`).
pub fn interpolation_weights<S: Scalar>(rows: usize, target_len: usize) -> Result<Tensor<S>> {
    if target_len == 0 {
        return Err(Error::Range("interpolation target length must be ≥ 1".into()));
    }
    let coords: Vec<f64> = if target_len == 1 {
        vec![(rows - 1) as f64 / 2.0]
    } else {
        (0..target_len)
            .map(|k| k as f64 * (rows - 1) as f64 / (target_len - 1) as f64)
            .collect()
    };
    weights_for(&coords, rows)
}

/// Reading matrix (`times.len() × rows`) for timestamps relative to `duration`.
pub fn timestamp_weights<S: Scalar>(rows: usize, times: &[f64], duration: f64) -> Result<Tensor<S>> {
    if !(duration > 0.0) {
        return Err(Error::Range(format!("duration must be positive, got {duration}")));
    }
    if times.is_empty() {
        return Err(Error::Range("no timestamps to embed".into()));
    }
    let mut coords = Vec::with_capacity(times.len());
    for &t in times {
        if !(0.0..=duration).contains(&t) {
            return Err(Error::Range(format!("timestamp {t} outside [0, {duration}]")));
        }
        coords.push(t / duration * (rows - 1) as f64);
    }
    weights_for(&coords, rows)
}

impl<S: Scalar> TemporalTable<S> {
    /// Sinusoidal init: column `2i` is `sin(p / 10000^(2i/d))`, column `2i+1` the cosine.
    pub fn init_sinusoidal(rows: usize, dim: usize) -> Result<Self> {
        Self::check_dims(rows, dim)?;
        let mut table = Tensor::zeros(&[rows, dim]);
        for p in 0..rows {
            for i in 0..dim / 2 {
                let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                table.set(p, 2 * i, S::of(angle.sin()));
                table.set(p, 2 * i + 1, S::of(angle.cos()));
            }
        }
        Ok(Self {
            table: table.with_grad(true),
        })
    }

    fn check_dims(rows: usize, dim: usize) -> Result<()> {
        if rows < 2 {
            return Err(Error::Config(format!("temporal table needs ≥ 2 rows, got {rows}")));
        }
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal embedding width must be even and positive, got {dim}"
            )));
        }
        Ok(())
    }

    pub fn from_tensor(table: Tensor<S>) -> Result<Self> {
        let (rows, dim) = table.dims2()?;
        Self::check_dims(rows, dim)?;
        Ok(Self { table })
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.table
    }

    pub fn interpolate(&self, target_len: usize) -> Result<Tensor<S>> {
        interpolation_weights::<S>(self.rows(), target_len)?.matmul(&self.table)
    }

    pub fn embed_timestamp(&self, t: f64, duration: f64) -> Result<Tensor<S>> {
        timestamp_weights::<S>(self.rows(), &[t], duration)?.matmul(&self.table)
    }

    /// Maps a predicted embedding to seconds via the most cosine-similar row.
    pub fn decode_timestamp(&self, pred: &[S], duration: f64) -> Result<f64> {
        decode_timestamp(&self.table, pred, duration)
    }
}

/// Decodes against any `rows × d` table; ties go to the smaller row index.
pub fn decode_timestamp<S: Scalar>(table: &Tensor<S>, pred: &[S], duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::Range(format!("duration must be positive, got {duration}")));
    }
    let (rows, dim) = table.dims2()?;
    if pred.len() != dim {
        return Err(Error::Shape {
            op: "decode_timestamp",
            lhs: vec![1, pred.len()],
            rhs: vec![rows, dim],
        });
    }
    let pnorm = pred.iter().map(|&x| x * x).sum::<S>().sqrt();
    if !(pnorm.as_f64() >= crate::numerics::MIN_NORM) {
        return Err(Error::Degenerate {
            op: "decode_timestamp",
            row: 0,
            norm: pnorm.as_f64(),
        });
    }
    let mut best = 0;
    let mut best_score = S::neg_infinity();
    for i in 0..rows {
        let row = table.row(i);
        let rnorm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
        if rnorm == S::zero() {
            continue;
        }
        let score = row.iter().zip(pred).map(|(&a, &b)| a * b).sum::<S>() / (rnorm * pnorm);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(grid_timestamp(best, rows, duration))
}

/// Tape version of [`TemporalTable::interpolate`].
pub fn interpolate_var<S: Scalar>(tape: &mut Tape<S>, table: Var, target_len: usize) -> Result<Var> {
    let rows = tape.value(table).rows();
    let w = tape.constant(interpolation_weights(rows, target_len)?);
    tape.matmul(w, table)
}

/// Tape version of [`TemporalTable::embed_timestamp`] for several timestamps at once.
pub fn embed_timestamps_var<S: Scalar>(
    tape: &mut Tape<S>,
    table: Var,
    times: &[f64],
    duration: f64,
) -> Result<Var> {
    let rows = tape.value(table).rows();
    let w = tape.constant(timestamp_weights(rows, times, duration)?);
    tape.matmul(w, table)
}
