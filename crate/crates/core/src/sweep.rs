//! Grid sweeps over layer shapes and layouts.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::config::{ClusterSpec, MoeConfig, ParallelLayout, Volumes};
use crate::cost::{cost_baseline, fit_profile, measure_samples, select_schedule, CostProfile};
use crate::error::{Error, Result};
use crate::moe::ScheduleKind;
use crate::timing::{geometric_sizes, schedule_times, Timer};

/// Candidate values per dimension. `M` and `H` are given per ESP rank.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub p: Vec<usize>,
    pub n_mp: Vec<usize>,
    pub n_esp: Vec<usize>,
    pub b: Vec<usize>,
    pub l: Vec<usize>,
    pub m_per_esp: Vec<usize>,
    pub h_per_esp: Vec<usize>,
    pub f: Vec<f64>,
    /// `E = experts_per_ep_rank * N_EP`.
    pub experts_per_ep_rank: Vec<usize>,
    /// Clamped to `E`.
    pub k: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            p: vec![8, 16, 32],
            n_mp: vec![1, 2, 4],
            n_esp: vec![1, 2, 4],
            b: vec![2, 4, 8],
            l: vec![512, 1024, 2048],
            m_per_esp: vec![1024, 2048, 4096],
            h_per_esp: vec![1024, 2048, 4096],
            f: vec![1.2, 2.4],
            experts_per_ep_rank: vec![1],
            k: vec![2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub moe: MoeConfig,
    pub layout: ParallelLayout,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text)?;
        g.check()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        let lists = [
            &self.p,
            &self.n_mp,
            &self.n_esp,
            &self.b,
            &self.l,
            &self.m_per_esp,
            &self.h_per_esp,
            &self.experts_per_ep_rank,
            &self.k,
        ];
        if lists.iter().any(|l| l.is_empty()) || self.f.is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(())
    }

    /// Valid points in nested grid order, plus the number skipped.
    pub fn points(&self) -> Result<(Vec<GridPoint>, usize)> {
        self.check()?;
        let mut out = Vec::new();
        let mut skipped = 0;
        for &p in &self.p {
            for &mp in &self.n_mp {
                for &esp in &self.n_esp {
                    for &b in &self.b {
                        for &l in &self.l {
                            for &mpe in &self.m_per_esp {
                                for &hpe in &self.h_per_esp {
                                    for &f in &self.f {
                                        for &epr in &self.experts_per_ep_rank {
                                            for &k in &self.k {
                                                match point(p, mp, esp, b, l, mpe, hpe, f, epr, k) {
                                                    Some(pt) => out.push(pt),
                                                    None => skipped += 1,
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((out, skipped))
    }
}

#[allow(clippy::too_many_arguments)]
fn point(
    p: usize,
    mp: usize,
    esp: usize,
    b: usize,
    l: usize,
    m_per_esp: usize,
    h_per_esp: usize,
    f: f64,
    experts_per_ep_rank: usize,
    k: usize,
) -> Option<GridPoint> {
    if esp == 0 || p % esp != 0 {
        return None;
    }
    let ep = p / esp;
    let layout = ParallelLayout::new(mp, ep, esp).ok()?;
    let e = experts_per_ep_rank * ep;
    let moe = MoeConfig::new(b, l, m_per_esp * esp, h_per_esp * esp, e, k.min(e), f).ok()?;
    crate::moe::check_layout(&moe, &layout).ok()?;
    Some(GridPoint { moe, layout })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config_id: usize,
    pub point: GridPoint,
    pub t_b: f64,
    pub t_d1: f64,
    pub t_d2: f64,
    pub chosen: ScheduleKind,
    pub predicted_speedup: f64,
}

pub const SWEEP_HEADER: &str = "config_id,P,N_MP,N_EP,N_ESP,B,L,M,H,f,t_B,t_D1,t_D2,chosen,predicted_speedup";

impl SweepRow {
    pub fn csv(&self) -> String {
        let (m, l) = (&self.point.moe, &self.point.layout);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_id,
            l.world(),
            l.mp(),
            l.ep(),
            l.esp(),
            m.batch,
            m.seq_len,
            m.embed,
            m.hidden,
            m.capacity_factor,
            self.t_b,
            self.t_d1,
            self.t_d2,
            self.chosen.as_str().to_uppercase(),
            self.predicted_speedup
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: usize,
    pub skipped: usize,
    pub mean_speedup: f64,
    pub min_speedup: f64,
    pub max_speedup: f64,
    pub fraction_above_4: f64,
}

impl SweepSummary {
    pub fn of(rows: &[SweepRow], skipped: usize) -> Self {
        let n = rows.len();
        let s: Vec<f64> = rows.iter().map(|r| r.predicted_speedup).collect();
        Self {
            rows: n,
            skipped,
            mean_speedup: s.iter().sum::<f64>() / n.max(1) as f64,
            min_speedup: s.iter().copied().fold(f64::INFINITY, f64::min),
            max_speedup: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fraction_above_4: s.iter().filter(|&&x| x > 4.0).count() as f64 / n.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

/// Prices every valid point with one profile. Points are evaluated in
/// parallel and returned in grid order.
pub fn sweep(grid: &SweepGrid, profile: &CostProfile) -> Result<SweepResult> {
    let (points, skipped) = grid.points()?;
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let rows = points
        .into_par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let v = Volumes::new(&pt.moe, &pt.layout);
            let t_b = cost_baseline(&v, profile)?;
            let sel = select_schedule(&v, profile)?;
            Ok(SweepRow {
                config_id: i,
                point: pt,
                t_b,
                t_d1: sel.t_d1,
                t_d2: sel.t_d2,
                chosen: sel.chosen,
                predicted_speedup: t_b / sel.t_d1.min(sel.t_d2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = SweepSummary::of(&rows, skipped);
    Ok(SweepResult { rows, summary })
}

/// Cluster used when a sweep is checked against the timing simulator: four
/// devices per node, NVLink-class intra links and a slower network.
pub fn preset_cluster(p: usize) -> Result<ClusterSpec> {
    let per_node = p.min(4);
    if p % per_node != 0 {
        return Err(Error::InvalidConfig(format!(
            "P = {p} does not fill nodes of {per_node}"
        )));
    }
    ClusterSpec::new(p / per_node, per_node, 2.5e-10, 8e-10, 1e-5)
}

/// Sizes the selector check profiles collectives at: `2^12 .. 2^34`.
pub fn default_profile_sizes() -> Vec<u64> {
    geometric_sizes(12, 34)
}

/// Model choice against the simulator's faster schedule at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementRow {
    pub point: GridPoint,
    pub model: ScheduleKind,
    pub sim: ScheduleKind,
    pub sim_t_d1: f64,
    pub sim_t_d2: f64,
}

impl AgreementRow {
    pub fn agrees(&self) -> bool {
        self.model == self.sim
    }

    /// `|t_D1 - t_D2| / max(t_D1, t_D2)` under the simulator.
    pub fn sim_gap(&self) -> f64 {
        (self.sim_t_d1 - self.sim_t_d2).abs() / self.sim_t_d1.max(self.sim_t_d2)
    }
}

/// For each point, fits a profile from simulated measurements of its own
/// cluster and layout and compares the selector with the simulator.
pub fn selector_agreement<F>(grid: &SweepGrid, cluster_for: F, sizes: &[u64]) -> Result<Vec<AgreementRow>>
where
    F: Fn(usize) -> Result<ClusterSpec> + Sync,
{
    let (points, _) = grid.points()?;
    let mut layouts: Vec<ParallelLayout> = points.iter().map(|p| p.layout).collect();
    layouts.sort_by_key(|l| (l.world(), l.mp(), l.ep(), l.esp()));
    layouts.dedup();
    let profiles = layouts
        .par_iter()
        .map(|l| {
            let c = cluster_for(l.world())?;
            let samples = measure_samples(&Timer::new(l, &c)?, sizes)?;
            Ok((*l, c, fit_profile(&samples)?))
        })
        .collect::<Result<Vec<_>>>()?;

    points
        .into_par_iter()
        .map(|pt| {
            let (_, c, prof) = profiles
                .iter()
                .find(|(l, _, _)| *l == pt.layout)
                .expect("every layout was profiled");
            let v = Volumes::new(&pt.moe, &pt.layout);
            let model = select_schedule(&v, prof)?.chosen;
            let sim = schedule_times(&v, &pt.layout, c)?;
            Ok(AgreementRow {
                model,
                sim: crate::cost::choose(sim.t_d1, sim.t_d2),
                sim_t_d1: sim.t_d1,
                sim_t_d2: sim.t_d2,
                point: pt,
            })
        })
        .collect()
}
