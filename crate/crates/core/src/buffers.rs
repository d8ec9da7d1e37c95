//! Column-oriented batch interface for callers that hold token data in flat
//! numeric arrays rather than per-token records.
//!
//! Top-k lists are ragged: entries of token `i` occupy
//! `ids[offsets[i]..offsets[i + 1]]` and the matching `logps` range. Both
//! entry points rebuild records and call the record pipeline, so results are
//! bitwise identical to it. Inputs are never mutated.

use crate::categorical::SparseTopK;
use crate::correction::{self, tis_weight, JackpotConfig, TokenRecord, LOGP_TOL};
use crate::error::{Error, Result};
use crate::z_estimator::BatchCalibration;

/// Ragged top-k lists for a batch.
#[derive(Debug, Clone, Copy)]
pub struct RaggedTopK<'a> {
    /// `N + 1` monotone offsets starting at 0.
    pub offsets: &'a [usize],
    pub ids: &'a [usize],
    pub logps: &'a [f64],
}

impl RaggedTopK<'_> {
    fn check(&self, what: &'static str, n: usize) -> Result<()> {
        if self.offsets.len() != n + 1 {
            return Err(Error::LengthMismatch {
                what,
                expected: n + 1,
                got: self.offsets.len(),
            });
        }
        if self.ids.len() != self.logps.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: self.ids.len(),
                got: self.logps.len(),
            });
        }
        if self.offsets[0] != 0 || self.offsets[n] != self.ids.len() {
            return Err(Error::InvalidRecord {
                index: 0,
                message: format!("{what} offsets must run from 0 to {}", self.ids.len()),
            });
        }
        if let Some(i) = self.offsets.windows(2).position(|w| w[0] > w[1]) {
            return Err(Error::InvalidRecord {
                index: i,
                message: format!("{what} offsets decrease"),
            });
        }
        Ok(())
    }

    fn list(&self, i: usize) -> Result<SparseTopK> {
        let range = self.offsets[i]..self.offsets[i + 1];
        let entries = self.ids[range.clone()]
            .iter()
            .copied()
            .zip(self.logps[range].iter().copied())
            .collect();
        SparseTopK::with_mass_tolerance(entries, LOGP_TOL).map_err(|e| Error::InvalidRecord {
            index: i,
            message: e.to_string(),
        })
    }
}

/// Parallel per-token buffers of length `N`.
#[derive(Debug, Clone, Copy)]
pub struct BatchBuffers<'a> {
    pub token_id: &'a [usize],
    pub logp_inf: &'a [f64],
    pub logp_ref: &'a [f64],
    pub logp_new: &'a [f64],
    pub advantage: &'a [f64],
    pub group_id: &'a [u64],
    pub trajectory_id: &'a [u64],
    pub position: &'a [u64],
    pub topk_inf: RaggedTopK<'a>,
    pub topk_new: RaggedTopK<'a>,
}

impl BatchBuffers<'_> {
    pub fn len(&self) -> usize {
        self.token_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_id.is_empty()
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            ("logp_inf", self.logp_inf.len()),
            ("logp_ref", self.logp_ref.len()),
            ("logp_new", self.logp_new.len()),
            ("advantage", self.advantage.len()),
            ("group_id", self.group_id.len()),
            ("trajectory_id", self.trajectory_id.len()),
            ("position", self.position.len()),
        ];
        for (what, got) in lens {
            if got != n {
                return Err(Error::LengthMismatch { what, expected: n, got });
            }
        }
        self.topk_inf.check("topk_inf", n)?;
        self.topk_new.check("topk_new", n)
    }

    /// Validated records in buffer order.
    pub fn to_records(&self) -> Result<Vec<TokenRecord>> {
        self.check_lengths()?;
        (0..self.len())
            .map(|i| {
                let rec = TokenRecord {
                    token_id: self.token_id[i],
                    logp_inf: self.logp_inf[i],
                    logp_ref: self.logp_ref[i],
                    logp_new: self.logp_new[i],
                    topk_inf: self.topk_inf.list(i)?,
                    topk_new: self.topk_new.list(i)?,
                    advantage: self.advantage[i],
                    group_id: self.group_id[i],
                    position: self.position[i],
                    trajectory_id: self.trajectory_id[i],
                };
                rec.validate(i)?;
                Ok(rec)
            })
            .collect()
    }
}

/// Owned storage for [`BatchBuffers`], e.g. flattened from records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OwnedBuffers {
    pub token_id: Vec<usize>,
    pub logp_inf: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub logp_new: Vec<f64>,
    pub advantage: Vec<f64>,
    pub group_id: Vec<u64>,
    pub trajectory_id: Vec<u64>,
    pub position: Vec<u64>,
    pub inf_offsets: Vec<usize>,
    pub inf_ids: Vec<usize>,
    pub inf_logps: Vec<f64>,
    pub new_offsets: Vec<usize>,
    pub new_ids: Vec<usize>,
    pub new_logps: Vec<f64>,
}

impl OwnedBuffers {
    pub fn from_records(records: &[TokenRecord]) -> Self {
        let mut b = OwnedBuffers {
            inf_offsets: vec![0],
            new_offsets: vec![0],
            ..Default::default()
        };
        for r in records {
            b.token_id.push(r.token_id);
            b.logp_inf.push(r.logp_inf);
            b.logp_ref.push(r.logp_ref);
            b.logp_new.push(r.logp_new);
            b.advantage.push(r.advantage);
            b.group_id.push(r.group_id);
            b.trajectory_id.push(r.trajectory_id);
            b.position.push(r.position);
            for &(id, lp) in r.topk_inf.entries() {
                b.inf_ids.push(id);
                b.inf_logps.push(lp);
            }
            b.inf_offsets.push(b.inf_ids.len());
            for &(id, lp) in r.topk_new.entries() {
                b.new_ids.push(id);
                b.new_logps.push(lp);
            }
            b.new_offsets.push(b.new_ids.len());
        }
        b
    }

    pub fn view(&self) -> BatchBuffers<'_> {
        BatchBuffers {
            token_id: &self.token_id,
            logp_inf: &self.logp_inf,
            logp_ref: &self.logp_ref,
            logp_new: &self.logp_new,
            advantage: &self.advantage,
            group_id: &self.group_id,
            trajectory_id: &self.trajectory_id,
            position: &self.position,
            topk_inf: RaggedTopK {
                offsets: &self.inf_offsets,
                ids: &self.inf_ids,
                logps: &self.inf_logps,
            },
            topk_new: RaggedTopK {
                offsets: &self.new_offsets,
                ids: &self.new_ids,
                logps: &self.new_logps,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBuffers {
    pub mask: Vec<u8>,
    pub rho: Vec<f64>,
    pub w_obrs: Vec<f64>,
    pub calibration: BatchCalibration,
}

/// Masks and jackpot weights for a column batch.
pub fn batch_weights(buffers: &BatchBuffers<'_>, cfg: &JackpotConfig, tis_c: f64) -> Result<WeightBuffers> {
    let records = buffers.to_records()?;
    let out = correction::batch_weights(&records, cfg, tis_c)?;
    Ok(WeightBuffers {
        mask: out.weights.iter().map(|w| w.mask).collect(),
        rho: out.weights.iter().map(|w| w.rho).collect(),
        w_obrs: out.weights.iter().map(|w| w.w_obrs).collect(),
        calibration: out.calibration,
    })
}

/// `min(p_ref / p_inf, c)` per token.
pub fn batch_tis(buffers: &BatchBuffers<'_>, c: f64) -> Result<Vec<f64>> {
    buffers.check_lengths()?;
    buffers
        .logp_ref
        .iter()
        .zip(buffers.logp_inf)
        .enumerate()
        .map(|(index, (&r, &i))| {
            tis_weight(r, i, c).map_err(|e| Error::InvalidRecord {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}
