use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2};

use super::expert::{expert_shard_forward, shard_macs, ExpertWeights};
use super::gate::{combine, gate, CapacityPolicy, GateOutput};
use crate::collectives::{
    allgather, allreduce, alltoall, fused_combine, fused_dispatch, local_combine, regroup_blocks, saa, split_local,
    Buffer, CommTrace, WorldState,
};
use crate::config::{GroupKind, MoeConfig, ParallelLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScheduleKind {
    Baseline,
    S1,
    S2,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Baseline, ScheduleKind::S1, ScheduleKind::S2];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Baseline => "baseline",
            ScheduleKind::S1 => "s1",
            ScheduleKind::S2 => "s2",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(ScheduleKind::Baseline),
            "s1" => Ok(ScheduleKind::S1),
            "s2" => Ok(ScheduleKind::S2),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule `{other}` (expected baseline, s1 or s2)"
            ))),
        }
    }
}

/// Checks the divisibility the data plane relies on.
pub fn check_layout(cfg: &MoeConfig, layout: &ParallelLayout) -> Result<()> {
    if cfg.experts % layout.ep() != 0 {
        return Err(Error::Layout(format!(
            "N_EP = {} does not divide E = {}",
            layout.ep(),
            cfg.experts
        )));
    }
    if cfg.hidden % layout.esp() != 0 {
        return Err(Error::Layout(format!(
            "N_ESP = {} does not divide H = {}",
            layout.esp(),
            cfg.hidden
        )));
    }
    if cfg.tokens() % layout.mp() != 0 {
        return Err(Error::Layout(format!(
            "N_MP = {} does not divide B*L = {}",
            layout.mp(),
            cfg.tokens()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub output: Array2<f64>,
    pub dropped: BTreeSet<(usize, usize)>,
}

/// Single-device oracle: gate, unsharded expert FFNs, weighted combine.
pub fn reference_forward(
    cfg: &MoeConfig,
    weights: &ExpertWeights,
    input: ArrayView2<f64>,
    policy: CapacityPolicy,
) -> Result<ReferenceOutput> {
    weights.check(cfg)?;
    let g = gate(input, weights.gate.view(), cfg.top_k, policy)?;
    let (e, slots, m) = g.dispatch.dim();
    let mut expert_out = Array3::zeros((e, slots, m));
    for x in 0..e {
        let rows = g.dispatch.slice(s![x, .., ..]);
        let y = expert_shard_forward(rows, weights.w1[x].view(), weights.w2[x].view())?;
        expert_out.slice_mut(s![x, .., ..]).assign(&y);
    }
    let output = combine(&g, expert_out.view())?;
    Ok(ReferenceOutput {
        output,
        dropped: g.dropped,
    })
}

#[derive(Debug, Clone)]
pub struct ScheduleRun {
    pub kind: ScheduleKind,
    /// Output held by each rank: the full `(B*L, M)` result of its MP group.
    pub outputs: Vec<Array2<f64>>,
    pub trace: CommTrace,
    /// Expert FFN multiply-accumulates summed over all ranks.
    pub ffn_macs: u64,
    /// Dropped `(token, expert)` pairs per MP group, in global token indices.
    pub dropped: Vec<BTreeSet<(usize, usize)>>,
}

/// Executes one MoE layer forward pass on `P` simulated ranks.
///
/// `inputs` holds one `(B*L, M)` tensor per MP group; every member of the
/// group starts from the same copy.
pub fn run_schedule(
    kind: ScheduleKind,
    cfg: &MoeConfig,
    layout: &ParallelLayout,
    weights: &ExpertWeights,
    inputs: &[Array2<f64>],
) -> Result<ScheduleRun> {
    cfg.validate()?;
    check_layout(cfg, layout)?;
    weights.check(cfg)?;
    let groups = layout.world() / layout.mp();
    if inputs.len() != groups {
        return Err(Error::Dimension(format!(
            "{} inputs supplied for {} MP groups",
            inputs.len(),
            groups
        )));
    }
    for x in inputs {
        if x.dim() != (cfg.tokens(), cfg.embed) {
            return Err(Error::Dimension(format!(
                "input {:?} should be ({}, {})",
                x.dim(),
                cfg.tokens(),
                cfg.embed
            )));
        }
    }
    let mut run = Runner {
        cfg,
        layout,
        weights,
        inputs,
        policy: CapacityPolicy::for_mp(cfg, layout.mp()),
        trace: CommTrace::new(),
        macs: 0,
    };
    let (outputs, dropped) = match kind {
        ScheduleKind::Baseline => run.baseline()?,
        ScheduleKind::S1 => run.s1()?,
        ScheduleKind::S2 => run.s2()?,
    };
    Ok(ScheduleRun {
        kind,
        outputs,
        trace: run.trace,
        ffn_macs: run.macs,
        dropped,
    })
}

type Outputs = (Vec<Array2<f64>>, Vec<BTreeSet<(usize, usize)>>);

struct Runner<'a> {
    cfg: &'a MoeConfig,
    layout: &'a ParallelLayout,
    weights: &'a ExpertWeights,
    inputs: &'a [Array2<f64>],
    policy: CapacityPolicy,
    trace: CommTrace,
    macs: u64,
}

fn to_buffer(a: &Array3<f64>) -> Buffer {
    let (e, c, m) = a.dim();
    let data = a.iter().copied().collect();
    Buffer {
        data,
        shape: vec![e * c, m],
    }
}

fn to_array3(b: &Buffer, e: usize, c: usize, m: usize) -> Result<Array3<f64>> {
    Array3::from_shape_vec((e, c, m), b.data.clone())
        .map_err(|err| Error::Dimension(format!("buffer of {} elements as ({e}, {c}, {m}): {err}", b.len())))
}

impl Runner<'_> {
    fn mp_group(&self, rank: usize) -> usize {
        rank / self.layout.mp()
    }

    fn gate_full(&self, rank: usize) -> Result<GateOutput> {
        let x = &self.inputs[self.mp_group(rank)];
        gate(x.view(), self.weights.gate.view(), self.cfg.top_k, self.policy)
    }

    /// Runs the local expert shards. Each rank's buffer is `P` source blocks
    /// of `(E / N_EP, slots, M)`; the result has the same layout and holds
    /// partial sums over the rank's slice of `H`.
    fn experts(&mut self, world: &WorldState, slots: usize) -> Result<WorldState> {
        let (p, ep, esp) = (self.layout.world(), self.layout.ep(), self.layout.esp());
        let m = self.cfg.embed;
        let local = self.cfg.experts / ep;
        let hs = self.cfg.hidden / esp;
        let block = local * slots * m;
        let mut out = Vec::with_capacity(p);
        for r in 0..p {
            let buf = world.buffer(r);
            if buf.len() != p * block {
                return Err(Error::ShapeMismatch {
                    op: "expert input",
                    rank: r,
                    expected: p * block,
                    found: buf.len(),
                });
            }
            let (i, sp) = (
                self.layout.position(GroupKind::Ep, r),
                self.layout.position(GroupKind::Esp, r),
            );
            let mut data = vec![0.0; buf.len()];
            for le in 0..local {
                let expert = i * local + le;
                // stack this expert's rows from every source block
                let mut rows = Array2::zeros((p * slots, m));
                for src in 0..p {
                    let start = src * block + le * slots * m;
                    let view = ArrayView2::from_shape((slots, m), &buf.data[start..start + slots * m])
                        .map_err(|err| Error::Dimension(err.to_string()))?;
                    rows.slice_mut(s![src * slots..(src + 1) * slots, ..]).assign(&view);
                }
                let (w1, w2) = self.weights.shard(expert, sp, esp)?;
                let y = expert_shard_forward(rows.view(), w1, w2)?;
                self.macs += shard_macs(p * slots, m, hs);
                for src in 0..p {
                    let start = src * block + le * slots * m;
                    for (d, v) in data[start..start + slots * m]
                        .iter_mut()
                        .zip(y.slice(s![src * slots..(src + 1) * slots, ..]).iter())
                    {
                        *d = *v;
                    }
                }
            }
            out.push(Buffer {
                data,
                shape: buf.shape.clone(),
            });
        }
        Ok(WorldState::new(out))
    }

    fn baseline(&mut self) -> Result<Outputs> {
        let (p, ep, esp) = (self.layout.world(), self.layout.ep(), self.layout.esp());
        let gates = (0..p).map(|r| self.gate_full(r)).collect::<Result<Vec<_>>>()?;
        let slots = self.policy.slots();
        let world = WorldState::new(gates.iter().map(|g| to_buffer(&g.dispatch)).collect());

        let world = allgather(&world, self.layout, GroupKind::Esp, &mut self.trace)?;
        let world = regroup_blocks(&world, esp, ep)?;
        let world = alltoall(&world, self.layout, GroupKind::Ep, &mut self.trace)?;
        let world = self.experts(&world, slots)?;
        let world = allreduce(&world, self.layout, GroupKind::Esp, &mut self.trace)?;
        let world = alltoall(&world, self.layout, GroupKind::Ep, &mut self.trace)?;
        let world = regroup_blocks(&world, ep, esp)?;
        let world = split_local(&world, self.layout, GroupKind::Esp, &mut self.trace)?;

        let mut outputs = Vec::with_capacity(p);
        for (r, g) in gates.iter().enumerate() {
            let y = to_array3(world.buffer(r), self.cfg.experts, slots, self.cfg.embed)?;
            outputs.push(combine(g, y.view())?);
        }
        let dropped = (0..p / self.layout.mp())
            .map(|g| gates[g * self.layout.mp()].dropped.clone())
            .collect();
        Ok((outputs, dropped))
    }

    fn s1(&mut self) -> Result<Outputs> {
        let (p, mp) = (self.layout.world(), self.layout.mp());
        let (n, m) = (self.cfg.tokens(), self.cfg.embed);
        let shard = n / mp;
        let slots = self.policy.per_segment;

        let world = WorldState::new(
            (0..p)
                .map(|r| {
                    let x = &self.inputs[self.mp_group(r)];
                    Buffer {
                        data: x.iter().copied().collect(),
                        shape: vec![n, m],
                    }
                })
                .collect(),
        );
        let world = split_local(&world, self.layout, GroupKind::Mp, &mut self.trace)?;
        let gates = (0..p)
            .map(|r| {
                let x = ArrayView2::from_shape((shard, m), &world.buffer(r).data[..])
                    .map_err(|err| Error::Dimension(err.to_string()))?;
                gate(x, self.weights.gate.view(), self.cfg.top_k, self.policy.per_shard())
            })
            .collect::<Result<Vec<_>>>()?;

        let world = WorldState::new(gates.iter().map(|g| to_buffer(&g.dispatch)).collect());
        let world = fused_dispatch(&world, self.layout, &mut self.trace)?;
        let world = self.experts(&world, slots)?;
        let world = fused_combine(&world, self.layout, &mut self.trace)?;

        let mut partial = Vec::with_capacity(p);
        for (r, g) in gates.iter().enumerate() {
            let y = to_array3(world.buffer(r), self.cfg.experts, slots, m)?;
            let out = combine(g, y.view())?;
            partial.push(Buffer {
                data: out.iter().copied().collect(),
                shape: vec![shard, m],
            });
        }
        let world = allgather(&WorldState::new(partial), self.layout, GroupKind::Mp, &mut self.trace)?;
        let outputs = (0..p)
            .map(|r| {
                Array2::from_shape_vec((n, m), world.buffer(r).data.clone())
                    .map_err(|err| Error::Dimension(err.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;

        let dropped = (0..p / mp)
            .map(|grp| {
                (0..mp)
                    .flat_map(|pos| {
                        gates[grp * mp + pos]
                            .dropped
                            .iter()
                            .map(move |&(t, e)| (t + pos * shard, e))
                    })
                    .collect()
            })
            .collect();
        Ok((outputs, dropped))
    }

    fn s2(&mut self) -> Result<Outputs> {
        let (p, mp, ep, esp) = (
            self.layout.world(),
            self.layout.mp(),
            self.layout.ep(),
            self.layout.esp(),
        );
        let (e, m) = (self.cfg.experts, self.cfg.embed);
        let slots = self.policy.per_segment;

        let gates = (0..p).map(|r| self.gate_full(r)).collect::<Result<Vec<_>>>()?;
        let world = WorldState::new(gates.iter().map(|g| to_buffer(&g.dispatch)).collect());
        // segment-major so that MP position m keeps the slots of token range m
        let world = regroup_blocks(&world, e, mp)?;
        let world = split_local(&world, self.layout, GroupKind::Mp, &mut self.trace)?;
        let world = fused_dispatch(&world, self.layout, &mut self.trace)?;
        let world = self.experts(&world, slots)?;
        let world = saa(&world, self.layout, &mut self.trace)?;
        let world = local_combine(&world, mp * ep, esp)?;
        let world = regroup_blocks(&world, mp, e)?;

        let mut outputs = Vec::with_capacity(p);
        for (r, g) in gates.iter().enumerate() {
            let y = to_array3(world.buffer(r), e, mp * slots, m)?;
            outputs.push(combine(g, y.view())?);
        }
        let dropped = (0..p / mp).map(|grp| gates[grp * mp].dropped.clone()).collect();
        Ok((outputs, dropped))
    }
}

/// `max |a - b| / max |b|`, or the plain difference when `b` is all zero.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let diff = a
        .iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
