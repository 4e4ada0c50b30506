use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MoeConfig;
use crate::error::{Error, Result};

/// Gate matrix `(M, E)` plus unsharded expert weights. Shards are sliced on
/// demand: shard `p` of `n` takes columns of `W1` and rows of `W2` in the
/// range `[p * H / n, (p + 1) * H / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub gate: Array2<f64>,
    /// `(M, H)` per expert.
    pub w1: Vec<Array2<f64>>,
    /// `(H, M)` per expert.
    pub w2: Vec<Array2<f64>>,
}

impl ExpertWeights {
    /// Uniform weights scaled by `1/sqrt(fan_in)`, drawn from a seeded stream.
    pub fn random(cfg: &MoeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, h, e) = (cfg.embed, cfg.hidden, cfg.experts);
        let mut draw = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0) * scale)
        };
        let gate = draw(m, e);
        let w1 = (0..e).map(|_| draw(m, h)).collect();
        let w2 = (0..e).map(|_| draw(h, m)).collect();
        Self { gate, w1, w2 }
    }

    pub fn experts(&self) -> usize {
        self.w1.len()
    }

    pub fn embed(&self) -> usize {
        self.gate.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.first().map_or(0, |w| w.ncols())
    }

    pub fn check(&self, cfg: &MoeConfig) -> Result<()> {
        let ok = self.gate.dim() == (cfg.embed, cfg.experts)
            && self.w1.len() == cfg.experts
            && self.w2.len() == cfg.experts
            && self.w1.iter().all(|w| w.dim() == (cfg.embed, cfg.hidden))
            && self.w2.iter().all(|w| w.dim() == (cfg.hidden, cfg.embed));
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("expert weights do not match the MoE config".into()))
        }
    }

    pub fn shard(
        &self,
        expert: usize,
        part: usize,
        parts: usize,
    ) -> Result<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
        let h = self.hidden();
        if parts == 0 || h % parts != 0 || part >= parts {
            return Err(Error::Indivisible {
                op: "expert shard",
                len: h as u64,
                parts: parts as u64,
            });
        }
        let w = h / parts;
        let cols = part * w..(part + 1) * w;
        Ok((
            self.w1[expert].slice(s![.., cols.clone()]),
            self.w2[expert].slice(s![cols, ..]),
        ))
    }
}

/// `relu(rows . W1_p) . W2_p`, the partial output of one expert shard.
pub fn expert_shard_forward(rows: ArrayView2<f64>, w1: ArrayView2<f64>, w2: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != w1.nrows() || w1.ncols() != w2.nrows() || w2.ncols() != rows.ncols() {
        return Err(Error::Dimension(format!(
            "rows {:?}, W1 shard {:?}, W2 shard {:?}",
            rows.dim(),
            w1.dim(),
            w2.dim()
        )));
    }
    let hidden = rows.dot(&w1).mapv_into(|v| v.max(0.0));
    Ok(hidden.dot(&w2))
}

/// Multiply-accumulates of one shard call.
pub(crate) fn shard_macs(rows: usize, embed: usize, hidden_shard: usize) -> u64 {
    2 * (rows * embed * hidden_shard) as u64
}
