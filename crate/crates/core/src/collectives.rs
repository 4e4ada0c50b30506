//! Functional (data-plane) collectives over simulated per-rank buffers.
//!
//! Every operation acts on all groups of the requested kind at once and is a
//! pure function `WorldState -> WorldState`. Collectives over singleton groups
//! are identities and leave no trace record. Buffers are chunked along the
//! flattened element order; the leading dimension of the logical shape is
//! scaled when it divides evenly, otherwise the shape degrades to 1-D.

use std::fmt;

use crate::config::{GroupKind, ParallelLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Buffer {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { data, shape })
    }

    pub fn flat(data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        Self { data, shape }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn scaled_shape(shape: &[usize], len: usize, mul: usize, div: usize) -> Vec<usize> {
    match shape.split_first() {
        Some((&lead, rest)) if (lead * mul) % div == 0 && !rest.is_empty() => {
            let mut s = vec![lead * mul / div];
            s.extend_from_slice(rest);
            s
        }
        _ => vec![len * mul / div],
    }
}

/// One buffer per rank in `[0, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    buffers: Vec<Buffer>,
}

impl WorldState {
    pub fn new(buffers: Vec<Buffer>) -> Self {
        Self { buffers }
    }

    pub fn from_flat(data: Vec<Vec<f64>>) -> Self {
        Self::new(data.into_iter().map(Buffer::flat).collect())
    }

    pub fn world(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer(&self, rank: usize) -> &Buffer {
        &self.buffers[rank]
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn into_buffers(self) -> Vec<Buffer> {
        self.buffers
    }

    pub fn data(&self, rank: usize) -> &[f64] {
        &self.buffers[rank].data
    }

    fn check_world(&self, layout: &ParallelLayout) -> Result<()> {
        if self.world() != layout.world() {
            return Err(Error::Layout(format!(
                "world has {} buffers but layout has P = {}",
                self.world(),
                layout.world()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommKind {
    AllGather,
    ReduceScatter,
    AllReduce,
    AllToAll,
    /// Local split; free in the forward pass.
    Split,
    /// Local replication ahead of a fused AlltoAll.
    Dump,
}

impl fmt::Display for CommKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CommKind::AllGather => "allgather",
            CommKind::ReduceScatter => "reducescatter",
            CommKind::AllReduce => "allreduce",
            CommKind::AllToAll => "alltoall",
            CommKind::Split => "split",
            CommKind::Dump => "dump",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommRecord {
    pub kind: CommKind,
    /// `None` for purely local operations that are not tied to a group.
    pub group: Option<GroupKind>,
    pub group_size: usize,
    /// Elements each rank sends over the network (zero for local ops).
    pub elements_per_rank: usize,
    /// Per-phase (or per-constituent) volumes; sums to `elements_per_rank`.
    pub phase_volumes: Vec<usize>,
    /// Communication this op owes in the backward pass.
    pub backward: Option<CommKind>,
}

impl CommRecord {
    fn simple(kind: CommKind, group: GroupKind, group_size: usize, elements: usize) -> Self {
        Self {
            kind,
            group: Some(group),
            group_size,
            elements_per_rank: elements,
            phase_volumes: vec![elements],
            backward: None,
        }
    }

    pub fn phases(&self) -> usize {
        self.phase_volumes.len()
    }

    /// True for records that move data between ranks.
    pub fn communicates(&self) -> bool {
        !matches!(self.kind, CommKind::Split | CommKind::Dump)
    }
}

impl fmt::Display for CommRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let group = self.group.map(|g| g.as_str()).unwrap_or("local");
        write!(
            f,
            "{}({}) size={} elements_per_rank={} phases={}",
            self.kind,
            group,
            self.group_size,
            self.elements_per_rank,
            self.phases()
        )?;
        if let Some(b) = self.backward {
            write!(f, " backward={b}")?;
        }
        Ok(())
    }
}

/// Append-only log of the collectives a schedule issued.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommTrace {
    records: Vec<CommRecord>,
}

impl CommTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: CommRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    /// Records that move data, as `(kind, group)` pairs in issue order.
    pub fn communication_pattern(&self) -> Vec<(CommKind, GroupKind)> {
        self.records
            .iter()
            .filter(|r| r.communicates())
            .filter_map(|r| r.group.map(|g| (r.kind, g)))
            .collect()
    }

    pub fn volume_of(&self, kind: CommKind, group: GroupKind) -> usize {
        self.records
            .iter()
            .filter(|r| r.kind == kind && r.group == Some(group))
            .map(|r| r.elements_per_rank)
            .sum()
    }

    pub fn total_volume(&self) -> usize {
        self.records.iter().map(|r| r.elements_per_rank).sum()
    }
}

fn uniform_len(world: &WorldState, group: &[usize], op: &'static str) -> Result<usize> {
    let n = world.buffers[group[0]].len();
    for &r in group {
        let found = world.buffers[r].len();
        if found != n {
            return Err(Error::ShapeMismatch {
                op,
                rank: r,
                expected: n,
                found,
            });
        }
    }
    Ok(n)
}

fn divisible(op: &'static str, len: usize, parts: usize) -> Result<usize> {
    if parts == 0 || len % parts != 0 {
        return Err(Error::Indivisible {
            op,
            len: len as u64,
            parts: parts as u64,
        });
    }
    Ok(len / parts)
}

/// Runs `f` over every non-singleton group, returning the new world and the
/// per-rank volume reported by the first group (if any group communicated).
fn per_group<F>(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    mut f: F,
) -> Result<(WorldState, Option<usize>)>
where
    F: FnMut(&WorldState, &[usize], &mut Vec<Buffer>) -> Result<usize>,
{
    world.check_world(layout)?;
    let mut out = world.buffers.clone();
    let mut volume = None;
    if layout.group_size(kind) > 1 {
        for group in layout.groups(kind) {
            let v = f(world, &group, &mut out)?;
            volume.get_or_insert(v);
        }
    }
    Ok((WorldState::new(out), volume))
}

fn allgather_impl(world: &WorldState, layout: &ParallelLayout, kind: GroupKind) -> Result<(WorldState, Option<usize>)> {
    per_group(world, layout, kind, |w, group, out| {
        let n = uniform_len(w, group, "allgather")?;
        let g = group.len();
        let mut data = Vec::with_capacity(n * g);
        for &r in group {
            data.extend_from_slice(&w.buffers[r].data);
        }
        let shape = scaled_shape(&w.buffers[group[0]].shape, n, g, 1);
        for &r in group {
            out[r] = Buffer {
                data: data.clone(),
                shape: shape.clone(),
            };
        }
        Ok((g - 1) * n)
    })
}

fn reduce_scatter_impl(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
) -> Result<(WorldState, Option<usize>)> {
    per_group(world, layout, kind, |w, group, out| {
        let n = uniform_len(w, group, "reduce_scatter")?;
        let g = group.len();
        let c = divisible("reduce_scatter", n, g)?;
        let shape = scaled_shape(&w.buffers[group[0]].shape, n, 1, g);
        for (i, &dst) in group.iter().enumerate() {
            let mut acc = vec![0.0; c];
            for &src in group {
                for (a, v) in acc.iter_mut().zip(&w.buffers[src].data[i * c..(i + 1) * c]) {
                    *a += v;
                }
            }
            out[dst] = Buffer {
                data: acc,
                shape: shape.clone(),
            };
        }
        Ok((g - 1) * c)
    })
}

/// Every member ends with the concatenation, in group order, of all
/// members' buffers.
pub fn allgather(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    trace: &mut CommTrace,
) -> Result<WorldState> {
    let (out, vol) = allgather_impl(world, layout, kind)?;
    if let Some(v) = vol {
        trace.push(CommRecord::simple(
            CommKind::AllGather,
            kind,
            layout.group_size(kind),
            v,
        ));
    }
    Ok(out)
}

/// Member at group position `i` receives the elementwise sum of everyone's
/// chunk `i`.
pub fn reduce_scatter(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    trace: &mut CommTrace,
) -> Result<WorldState> {
    let (out, vol) = reduce_scatter_impl(world, layout, kind)?;
    if let Some(v) = vol {
        trace.push(CommRecord::simple(
            CommKind::ReduceScatter,
            kind,
            layout.group_size(kind),
            v,
        ));
    }
    Ok(out)
}

/// ReduceScatter followed by AllGather.
pub fn allreduce(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    trace: &mut CommTrace,
) -> Result<WorldState> {
    let (scattered, rs) = reduce_scatter_impl(world, layout, kind)?;
    let (mut out, ag) = allgather_impl(&scattered, layout, kind)?;
    if let (Some(rs), Some(ag)) = (rs, ag) {
        trace.push(CommRecord {
            kind: CommKind::AllReduce,
            group: Some(kind),
            group_size: layout.group_size(kind),
            elements_per_rank: rs + ag,
            phase_volumes: vec![rs, ag],
            backward: None,
        });
        // the gather path rescaled the shape twice; restore the original
        for (o, w) in out.buffers.iter_mut().zip(&world.buffers) {
            o.shape = w.shape.clone();
        }
    }
    Ok(out)
}

/// Block transpose: chunk `j` of member `i` lands at position `i` of member `j`.
pub fn alltoall(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    trace: &mut CommTrace,
) -> Result<WorldState> {
    let (out, vol) = per_group(world, layout, kind, |w, group, out| {
        let n = uniform_len(w, group, "alltoall")?;
        let g = group.len();
        let c = divisible("alltoall", n, g)?;
        for (j, &dst) in group.iter().enumerate() {
            let mut data = Vec::with_capacity(n);
            for &src in group {
                data.extend_from_slice(&w.buffers[src].data[j * c..(j + 1) * c]);
            }
            out[dst] = Buffer {
                data,
                shape: w.buffers[dst].shape.clone(),
            };
        }
        Ok((g - 1) * c)
    })?;
    if let Some(v) = vol {
        trace.push(CommRecord::simple(CommKind::AllToAll, kind, layout.group_size(kind), v));
    }
    Ok(out)
}

/// Each rank keeps the chunk matching its group position. No forward
/// communication; the record notes the AllGather owed in backward.
pub fn split_local(
    world: &WorldState,
    layout: &ParallelLayout,
    kind: GroupKind,
    trace: &mut CommTrace,
) -> Result<WorldState> {
    let (out, vol) = per_group(world, layout, kind, |w, group, out| {
        let n = uniform_len(w, group, "split_local")?;
        let g = group.len();
        let c = divisible("split_local", n, g)?;
        for (i, &r) in group.iter().enumerate() {
            out[r] = Buffer {
                data: w.buffers[r].data[i * c..(i + 1) * c].to_vec(),
                shape: scaled_shape(&w.buffers[r].shape, n, 1, g),
            };
        }
        Ok(0)
    })?;
    if vol.is_some() {
        trace.push(CommRecord {
            kind: CommKind::Split,
            group: Some(kind),
            group_size: layout.group_size(kind),
            elements_per_rank: 0,
            phase_volumes: vec![0],
            backward: Some(CommKind::AllGather),
        });
    }
    Ok(out)
}

/// Replaces every buffer by `replication` concatenated copies of itself.
pub fn dump_local(world: &WorldState, replication: usize, trace: &mut CommTrace) -> Result<WorldState> {
    if replication == 0 {
        return Err(Error::InvalidConfig("dump replication must be at least 1".into()));
    }
    if replication == 1 {
        return Ok(world.clone());
    }
    let buffers = world
        .buffers
        .iter()
        .map(|b| Buffer {
            data: b.data.repeat(replication),
            shape: scaled_shape(&b.shape, b.len(), replication, 1),
        })
        .collect();
    trace.push(CommRecord {
        kind: CommKind::Dump,
        group: None,
        group_size: replication,
        elements_per_rank: 0,
        phase_volumes: vec![0],
        backward: None,
    });
    Ok(WorldState::new(buffers))
}

/// Local relabelling: views each buffer as a `rows x cols` grid of equal
/// blocks and transposes the grid. Moves no data between ranks.
pub fn regroup_blocks(world: &WorldState, rows: usize, cols: usize) -> Result<WorldState> {
    let buffers = world
        .buffers
        .iter()
        .map(|b| {
            Ok(Buffer {
                data: transpose_blocks(&b.data, rows, cols)?,
                shape: b.shape.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WorldState::new(buffers))
}

pub(crate) fn transpose_blocks(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let b = divisible("regroup_blocks", data.len(), rows * cols)?;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..cols {
        for r in 0..rows {
            let start = (r * cols + c) * b;
            out.extend_from_slice(&data[start..start + b]);
        }
    }
    Ok(out)
}

/// Dispatch direction of the fused EP&ESP AlltoAll: a local dump of
/// `N_ESP` copies followed by one AlltoAll across all `N_EP * N_ESP` ranks.
///
/// Each buffer is read as `N_EP` chunks, chunk `j` destined for EP position
/// `j`. After the dump the copies are laid out copy-major; they are
/// regrouped (locally) to EP-major, ESP-minor destination order, so block
/// `j * N_ESP + s` goes to the rank at EP position `j` and ESP position `s`,
/// which is rank `j * N_ESP + s`. The result is element-identical to
/// AllGather(ESP), regroup `(N_ESP, N_EP) -> (N_EP, N_ESP)`, AlltoAll(EP):
/// every rank holds one chunk from every source rank, in source-rank order.
pub fn fused_dispatch(world: &WorldState, layout: &ParallelLayout, trace: &mut CommTrace) -> Result<WorldState> {
    world.check_world(layout)?;
    let dumped = dump_local(world, layout.esp(), trace)?;
    let ordered = regroup_blocks(&dumped, layout.esp(), layout.ep())?;
    alltoall(&ordered, layout, GroupKind::EpEsp, trace)
}

/// Combine direction: AlltoAll across the EP&ESP group, then a local sum of
/// the `N_ESP` partial results received for each EP position. Equals
/// AllReduce(ESP), AlltoAll(EP), regroup, Split(ESP).
pub fn fused_combine(world: &WorldState, layout: &ParallelLayout, trace: &mut CommTrace) -> Result<WorldState> {
    let exchanged = alltoall(world, layout, GroupKind::EpEsp, trace)?;
    local_combine(&exchanged, layout.ep(), layout.esp())
}

/// Sums groups of `esp` consecutive blocks: a buffer of `ep * esp` blocks
/// becomes `ep` blocks.
pub fn local_combine(world: &WorldState, ep: usize, esp: usize) -> Result<WorldState> {
    let buffers = world
        .buffers
        .iter()
        .map(|b| {
            let blk = divisible("local_combine", b.len(), ep * esp)?;
            let mut data = vec![0.0; ep * blk];
            for j in 0..ep {
                let dst = &mut data[j * blk..(j + 1) * blk];
                for s in 0..esp {
                    let start = (j * esp + s) * blk;
                    for (d, v) in dst.iter_mut().zip(&b.data[start..start + blk]) {
                        *d += v;
                    }
                }
            }
            Ok(Buffer {
                shape: scaled_shape(&b.shape, b.len(), 1, esp),
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WorldState::new(buffers))
}

/// Simultaneous AlltoAll (EP&ESP) and AllGather (MP).
///
/// The AlltoAll runs in `G` phases; in phase `p` the rank at position `i`
/// receives its chunk from position `(i - p) mod G` (phase 0 is the local
/// block). The slice received in phase `p` is forwarded to the other MP
/// members in phase `p + 1`, so one extra drain phase finishes the gather.
/// The result equals `allgather(MP)` applied to `alltoall(EP&ESP)`.
pub fn saa(world: &WorldState, layout: &ParallelLayout, trace: &mut CommTrace) -> Result<WorldState> {
    world.check_world(layout)?;
    let g = layout.world();
    let ranks: Vec<usize> = (0..g).collect();
    let n = uniform_len(world, &ranks, "saa")?;
    let c = divisible("saa", n, g)?;
    let mp = layout.mp();

    // gathered[q][m * g + src] = block that MP member m received from src
    let mut gathered: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; mp * g]; g];
    let mut in_flight: Vec<Option<(usize, Vec<f64>)>> = vec![None; g];
    let mut a2a_phases = Vec::with_capacity(g);
    let mut ag_phases = Vec::with_capacity(g + 1);

    let forward =
        |gathered: &mut Vec<Vec<Option<Vec<f64>>>>, in_flight: &mut Vec<Option<(usize, Vec<f64>)>>| -> Result<()> {
            for (r, slot) in in_flight.iter_mut().enumerate() {
                if let Some((src, block)) = slot.take() {
                    let m = layout.position(GroupKind::Mp, r);
                    for q in layout.group_members(GroupKind::Mp, r)? {
                        if q != r {
                            gathered[q][m * g + src] = Some(block.clone());
                        }
                    }
                }
            }
            Ok(())
        };

    for phase in 0..g {
        // AllGather of the slice that arrived in the previous phase
        let had_slice = in_flight.iter().any(Option::is_some);
        forward(&mut gathered, &mut in_flight)?;
        ag_phases.push(if had_slice { c * (mp - 1) } else { 0 });

        for (i, slot) in in_flight.iter_mut().enumerate() {
            let src = (i + g - phase) % g;
            let block = world.buffers[src].data[i * c..(i + 1) * c].to_vec();
            let m = layout.position(GroupKind::Mp, i);
            gathered[i][m * g + src] = Some(block.clone());
            *slot = Some((src, block));
        }
        a2a_phases.push(if phase == 0 { 0 } else { c });
    }
    forward(&mut gathered, &mut in_flight)?;
    ag_phases.push(c * (mp - 1));

    let mut buffers = Vec::with_capacity(g);
    for (q, blocks) in gathered.into_iter().enumerate() {
        let mut data = Vec::with_capacity(n * mp);
        for b in blocks {
            data.extend(b.expect("every block is delivered by the final phase"));
        }
        buffers.push(Buffer {
            shape: scaled_shape(&world.buffers[q].shape, n, mp, 1),
            data,
        });
    }

    if g > 1 {
        trace.push(CommRecord {
            kind: CommKind::AllToAll,
            group: Some(GroupKind::EpEsp),
            group_size: g,
            elements_per_rank: a2a_phases.iter().sum(),
            phase_volumes: a2a_phases,
            backward: None,
        });
    }
    if mp > 1 {
        trace.push(CommRecord {
            kind: CommKind::AllGather,
            group: Some(GroupKind::Mp),
            group_size: mp,
            elements_per_rank: ag_phases.iter().sum(),
            phase_volumes: ag_phases,
            backward: None,
        });
    }
    Ok(WorldState::new(buffers))
}
