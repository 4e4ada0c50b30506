//! Message-level timing over the two-level topology.
//!
//! Collectives are lowered to rounds of point-to-point transfers. Within a
//! round every rank owns one intra-node and one inter-node send channel; a
//! channel's time is `alpha_link + beta * elements` summed over what it
//! carries that round, channels run concurrently, and a round lasts as long
//! as its slowest channel. Rounds run back to back.

use std::collections::BTreeMap;
use std::fmt;

use crate::collectives::CommKind;
use crate::config::{classify_placement, ClusterSpec, GroupKind, MoeConfig, ParallelLayout, PlacementCase, Volumes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkClass {
    Intra,
    Inter,
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkClass::Intra => "intra",
            LinkClass::Inter => "inter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub elements: u64,
    pub link: LinkClass,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferPlan {
    pub rounds: Vec<Vec<Transfer>>,
    /// Size of the group the plan was lowered for.
    pub group_size: usize,
}

impl TransferPlan {
    pub fn is_empty(&self) -> bool {
        self.rounds.iter().all(Vec::is_empty)
    }

    pub fn sent_by(&self, rank: usize) -> u64 {
        self.transfers()
            .filter(|t| t.src == rank && t.dst != rank)
            .map(|t| t.elements)
            .sum()
    }

    pub fn received_by(&self, rank: usize) -> u64 {
        self.transfers()
            .filter(|t| t.dst == rank && t.src != rank)
            .map(|t| t.elements)
            .sum()
    }

    pub fn transfers(&self) -> impl Iterator<Item = &Transfer> {
        self.rounds.iter().flatten()
    }
}

fn link(cluster: &ClusterSpec, a: usize, b: usize) -> LinkClass {
    if cluster.same_node(a, b) {
        LinkClass::Intra
    } else {
        LinkClass::Inter
    }
}

fn split(op: &'static str, x: u64, g: usize) -> Result<u64> {
    if g == 0 || x % g as u64 != 0 {
        return Err(Error::Indivisible {
            op,
            len: x,
            parts: g as u64,
        });
    }
    Ok(x / g as u64)
}

fn ring(cluster: &ClusterSpec, group: &[usize], slice: u64, reverse: bool) -> Vec<Vec<Transfer>> {
    let g = group.len();
    (1..g)
        .map(|_| {
            (0..g)
                .map(|i| {
                    let j = if reverse { (i + g - 1) % g } else { (i + 1) % g };
                    let (src, dst) = (group[i], group[j]);
                    Transfer {
                        src,
                        dst,
                        elements: slice,
                        link: link(cluster, src, dst),
                    }
                })
                .collect()
        })
        .collect()
}

/// Lowers one collective over `group` to transfers.
///
/// `x` is the per-rank size of the full tensor: the gathered output for
/// AllGather, the input for ReduceScatter, and the buffer for AllReduce and
/// AlltoAll.
///
/// * AlltoAll: one round; each member sends `x / G` to every member,
///   including the block it keeps, which is a local copy on the intra channel.
/// * AllGather: ring of `G - 1` rounds of `x / G`.
/// * ReduceScatter: reverse ring of `G - 1` rounds of `x / G`.
/// * AllReduce: ReduceScatter then AllGather.
///
/// Singleton AllGather, ReduceScatter and AllReduce lower to an empty plan.
pub fn lower_collective(kind: CommKind, group: &[usize], x: u64, cluster: &ClusterSpec) -> Result<TransferPlan> {
    let g = group.len();
    if g == 0 {
        return Err(Error::Layout("collective over an empty group".into()));
    }
    if let Some(&r) = group.iter().find(|&&r| r >= cluster.world()) {
        return Err(Error::Layout(format!(
            "rank {r} outside a cluster of {} ranks",
            cluster.world()
        )));
    }
    let rounds = match kind {
        CommKind::AllToAll => {
            let c = split("alltoall", x, g)?;
            let round = group
                .iter()
                .flat_map(|&src| {
                    group.iter().map(move |&dst| Transfer {
                        src,
                        dst,
                        elements: c,
                        link: link(cluster, src, dst),
                    })
                })
                .collect();
            vec![round]
        }
        CommKind::AllGather => ring(cluster, group, split("allgather", x, g)?, false),
        CommKind::ReduceScatter => ring(cluster, group, split("reducescatter", x, g)?, true),
        CommKind::AllReduce => {
            let c = split("allreduce", x, g)?;
            let mut r = ring(cluster, group, c, true);
            r.extend(ring(cluster, group, c, false));
            r
        }
        CommKind::Split | CommKind::Dump => Vec::new(),
    };
    Ok(TransferPlan { rounds, group_size: g })
}

/// Lowers a collective onto every group of `kind` at once.
pub fn lower_on_layout(
    kind: CommKind,
    group: GroupKind,
    x: u64,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
) -> Result<TransferPlan> {
    if cluster.world() != layout.world() {
        return Err(Error::Layout(format!(
            "cluster has {} ranks but layout needs P = {}",
            cluster.world(),
            layout.world()
        )));
    }
    let mut plan = TransferPlan {
        rounds: Vec::new(),
        group_size: layout.group_size(group),
    };
    for members in layout.groups(group) {
        let p = lower_collective(kind, &members, x, cluster)?;
        for (i, round) in p.rounds.into_iter().enumerate() {
            if plan.rounds.len() <= i {
                plan.rounds.push(Vec::new());
            }
            plan.rounds[i].extend(round);
        }
    }
    Ok(plan)
}

fn channel_times(round: &[Transfer], cluster: &ClusterSpec) -> BTreeMap<(usize, LinkClass), f64> {
    let mut load: BTreeMap<(usize, LinkClass), u64> = BTreeMap::new();
    for t in round.iter().filter(|t| t.elements > 0) {
        *load.entry((t.src, t.link)).or_default() += t.elements;
    }
    load.into_iter()
        .map(|(key, elements)| {
            let beta = match key.1 {
                LinkClass::Intra => cluster.beta_intra,
                LinkClass::Inter => cluster.beta_inter,
            };
            (key, cluster.alpha_link + beta * elements as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanTiming {
    pub seconds: f64,
    pub round_seconds: Vec<f64>,
    /// Seconds during which each link class was the slowest channel.
    pub critical: BTreeMap<LinkClass, f64>,
}

impl PlanTiming {
    pub fn bottleneck(&self) -> Option<LinkClass> {
        self.critical
            .iter()
            .filter(|(_, &s)| s > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(&l, _)| l)
    }
}

pub fn simulate_plan_detailed(plan: &TransferPlan, cluster: &ClusterSpec) -> PlanTiming {
    let mut out = PlanTiming::default();
    for round in &plan.rounds {
        let times = channel_times(round, cluster);
        let slowest = times.iter().max_by(|a, b| a.1.total_cmp(b.1));
        let t = slowest.map_or(0.0, |(_, &t)| t);
        if let Some(((_, l), _)) = slowest {
            *out.critical.entry(*l).or_default() += t;
        }
        out.round_seconds.push(t);
        out.seconds += t;
    }
    out
}

pub fn simulate_plan(plan: &TransferPlan, cluster: &ClusterSpec) -> f64 {
    simulate_plan_detailed(plan, cluster).seconds
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaaTiming {
    pub seconds: f64,
    pub alltoall_seconds: f64,
    pub allgather_seconds: f64,
    pub phase_seconds: Vec<f64>,
}

/// Time of the phased AlltoAll + AllGather overlap.
///
/// With `a` and `g` the standalone times and `G` phases, slice `p` of the
/// AlltoAll takes `a / G` and its gather `g / G`; gather `p` overlaps
/// AlltoAll `p + 1`. Startup is charged once per collective and spread over
/// the slices.
pub fn time_saa(a2a: &TransferPlan, ag: &TransferPlan, phases: usize, cluster: &ClusterSpec) -> Result<SaaTiming> {
    if phases == 0 || phases != a2a.group_size {
        return Err(Error::PhaseMismatch {
            phases,
            group: a2a.group_size,
        });
    }
    let a = simulate_plan(a2a, cluster);
    let g = simulate_plan(ag, cluster);
    let n = phases as f64;
    let mut phase_seconds = Vec::with_capacity(phases + 1);
    phase_seconds.push(a / n);
    for _ in 1..phases {
        phase_seconds.push(a.max(g) / n);
    }
    phase_seconds.push(g / n);
    // same total as summing the phases, but exact when either side is zero
    let seconds = a + g - (n - 1.0) / n * a.min(g);
    Ok(SaaTiming {
        seconds,
        alltoall_seconds: a,
        allgather_seconds: g,
        phase_seconds,
    })
}

/// Collective selectors the timing and cost models price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollectiveKey {
    AgMp,
    A2aEp,
    A2aEpEsp,
    AgEsp,
    RsEsp,
    ArEsp,
    Overlap,
}

impl CollectiveKey {
    pub const ALL: [CollectiveKey; 7] = [
        CollectiveKey::AgMp,
        CollectiveKey::A2aEp,
        CollectiveKey::A2aEpEsp,
        CollectiveKey::AgEsp,
        CollectiveKey::RsEsp,
        CollectiveKey::ArEsp,
        CollectiveKey::Overlap,
    ];

    /// `(collective, group)` column values of the CSV formats.
    pub fn csv_names(&self) -> (&'static str, &'static str) {
        match self {
            CollectiveKey::AgMp => ("allgather", "mp"),
            CollectiveKey::A2aEp => ("alltoall", "ep"),
            CollectiveKey::A2aEpEsp => ("alltoall", "ep_esp"),
            CollectiveKey::AgEsp => ("allgather", "esp"),
            CollectiveKey::RsEsp => ("reducescatter", "esp"),
            CollectiveKey::ArEsp => ("allreduce", "esp"),
            CollectiveKey::Overlap => ("overlap", "ep_esp"),
        }
    }

    pub fn from_csv(collective: &str, group: &str) -> Option<Self> {
        let group = group.parse::<GroupKind>().ok()?;
        Self::ALL.into_iter().find(|k| {
            let (c, g) = k.csv_names();
            c == collective && g.parse::<GroupKind>().ok() == Some(group)
        })
    }

    fn comm(&self) -> Option<(CommKind, GroupKind)> {
        Some(match self {
            CollectiveKey::AgMp => (CommKind::AllGather, GroupKind::Mp),
            CollectiveKey::A2aEp => (CommKind::AllToAll, GroupKind::Ep),
            CollectiveKey::A2aEpEsp => (CommKind::AllToAll, GroupKind::EpEsp),
            CollectiveKey::AgEsp => (CommKind::AllGather, GroupKind::Esp),
            CollectiveKey::RsEsp => (CommKind::ReduceScatter, GroupKind::Esp),
            CollectiveKey::ArEsp => (CommKind::AllReduce, GroupKind::Esp),
            CollectiveKey::Overlap => return None,
        })
    }
}

impl fmt::Display for CollectiveKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollectiveKey::AgMp => "AG_MP",
            CollectiveKey::A2aEp => "A2A_EP",
            CollectiveKey::A2aEpEsp => "A2A_EP&ESP",
            CollectiveKey::AgEsp => "AG_ESP",
            CollectiveKey::RsEsp => "RS_ESP",
            CollectiveKey::ArEsp => "AR_ESP",
            CollectiveKey::Overlap => "Overlap",
        })
    }
}

/// Simulated timings of one cluster and layout.
#[derive(Debug, Clone)]
pub struct Timer<'a> {
    layout: &'a ParallelLayout,
    cluster: &'a ClusterSpec,
}

impl<'a> Timer<'a> {
    pub fn new(layout: &'a ParallelLayout, cluster: &'a ClusterSpec) -> Result<Self> {
        cluster.validate()?;
        if cluster.world() != layout.world() {
            return Err(Error::Layout(format!(
                "cluster has {} ranks but layout needs P = {}",
                cluster.world(),
                layout.world()
            )));
        }
        Ok(Self { layout, cluster })
    }

    pub fn plan(&self, key: CollectiveKey, x: u64) -> Result<TransferPlan> {
        let (kind, group) = key
            .comm()
            .ok_or_else(|| Error::InvalidConfig("the overlap term has no standalone plan".into()))?;
        lower_on_layout(kind, group, x, self.layout, self.cluster)
    }

    /// Standalone time of a collective on `x` elements.
    pub fn time(&self, key: CollectiveKey, x: u64) -> Result<f64> {
        Ok(simulate_plan(&self.plan(key, x)?, self.cluster))
    }

    /// SAA of `A2A_EP&ESP(a2a_x)` with `AG_MP(ag_x)`.
    pub fn saa(&self, a2a_x: u64, ag_x: u64) -> Result<SaaTiming> {
        let a = self.plan(CollectiveKey::A2aEpEsp, a2a_x)?;
        let g = self.plan(CollectiveKey::AgMp, ag_x)?;
        time_saa(&a, &g, self.layout.world(), self.cluster)
    }

    /// What the overlap term measures at size `x`: SAA time minus the
    /// standalone MP AllGather of `x * N_MP / N_ESP`.
    pub fn overlap(&self, x: u64) -> Result<f64> {
        let (mp, esp) = (self.layout.mp() as u64, self.layout.esp() as u64);
        if (x * mp) % esp != 0 {
            return Err(Error::Indivisible {
                op: "overlap",
                len: x * mp,
                parts: esp,
            });
        }
        let ag_x = x * mp / esp;
        Ok(self.saa(x, ag_x)?.seconds - self.time(CollectiveKey::AgMp, ag_x)?)
    }

    /// One timing sample of the given key, as a profiling run would record.
    pub fn measure(&self, key: CollectiveKey, x: u64) -> Result<f64> {
        match key {
            CollectiveKey::Overlap => self.overlap(x),
            k => self.time(k, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub t_b: f64,
    pub t_d: f64,
    pub t_d1: f64,
    pub t_d2: f64,
    /// `(label, seconds)` of every priced collective.
    pub collectives: Vec<(String, f64)>,
    pub saa: SaaTiming,
    pub bottleneck: Option<LinkClass>,
}

/// Simulated communication time of each schedule for one layer shape.
pub fn schedule_times(vol: &Volumes, layout: &ParallelLayout, cluster: &ClusterSpec) -> Result<TimingReport> {
    let timer = Timer::new(layout, cluster)?;
    let y = vol.y();
    let y_mp = vol.y_mp();
    let ag_esp = timer.time(CollectiveKey::AgEsp, vol.blm * vol.n_esp)?;
    let ar_esp = timer.time(CollectiveKey::ArEsp, y)?;
    let a2a_ep = timer.time(CollectiveKey::A2aEp, y)?;
    let a2a_fused = timer.time(CollectiveKey::A2aEpEsp, y)?;
    let a2a_fused_mp = timer.time(CollectiveKey::A2aEpEsp, y_mp)?;
    let ag_mp_blm = timer.time(CollectiveKey::AgMp, vol.blm)?;
    let saa = timer.saa(y_mp, vol.etm)?;

    let mut bottleneck: BTreeMap<LinkClass, f64> = BTreeMap::new();
    for (key, x) in [
        (CollectiveKey::AgEsp, vol.blm * vol.n_esp),
        (CollectiveKey::ArEsp, y),
        (CollectiveKey::A2aEp, y),
        (CollectiveKey::A2aEpEsp, y),
    ] {
        let d = simulate_plan_detailed(&timer.plan(key, x)?, cluster);
        for (l, s) in d.critical {
            *bottleneck.entry(l).or_default() += s;
        }
    }

    Ok(TimingReport {
        t_b: ag_esp + ar_esp + 2.0 * a2a_ep,
        t_d: 2.0 * a2a_fused,
        t_d1: 2.0 * a2a_fused_mp + ag_mp_blm,
        t_d2: a2a_fused_mp + saa.seconds,
        collectives: vec![
            ("AG_ESP(BLM*N_ESP)".into(), ag_esp),
            ("AR_ESP(ETM*N_ESP)".into(), ar_esp),
            ("A2A_EP(ETM*N_ESP)".into(), a2a_ep),
            ("A2A_EP&ESP(ETM*N_ESP)".into(), a2a_fused),
            ("A2A_EP&ESP(ETM*N_ESP/N_MP)".into(), a2a_fused_mp),
            ("AG_MP(BLM)".into(), ag_mp_blm),
        ],
        saa,
        bottleneck: bottleneck
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l),
    })
}

pub fn schedule_times_for(cfg: &MoeConfig, layout: &ParallelLayout, cluster: &ClusterSpec) -> Result<TimingReport> {
    schedule_times(&Volumes::new(cfg, layout), layout, cluster)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Inequality {
    /// `A2A_EP&ESP(x) <= AG_ESP(x) + A2A_EP(x)`
    FusedVsGather,
    /// `A2A_EP&ESP(x) == A2A_EP(x)` on a single node
    SingleNodeEquality,
    /// `A2A_EP&ESP(x) <= RS_ESP(x) + A2A_EP(x)`
    FusedVsScatter,
    /// `t_B - t_D >= AG_ESP(x)`
    FusedGain,
    /// `t_B - t_D2 >= 0`
    OverlapGain,
}

impl Inequality {
    pub fn label(&self) -> &'static str {
        match self {
            Inequality::FusedVsGather => "fused_vs_gather",
            Inequality::SingleNodeEquality => "single_node_equality",
            Inequality::FusedVsScatter => "fused_vs_scatter",
            Inequality::FusedGain => "fused_gain",
            Inequality::OverlapGain => "overlap_gain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityRow {
    pub case: PlacementCase,
    pub inequality: Inequality,
    pub x: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub case: PlacementCase,
    pub rows: Vec<InequalityRow>,
    /// Set when the MP inequality was not checked, with the reason.
    pub skipped: Option<String>,
}

impl InequalityReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,inequality,x,lhs_seconds,rhs_seconds,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                r.case.number(),
                r.inequality.label(),
                r.x,
                r.lhs,
                r.rhs,
                r.pass
            ));
        }
        s
    }
}

/// Relative tolerance of the single-node equality.
pub const EQUALITY_TOLERANCE: f64 = 1e-12;

/// `2^lo, 2^(lo+1), ..., 2^hi`.
pub fn geometric_sizes(lo: u32, hi: u32) -> Vec<u64> {
    (lo..=hi).map(|e| 1u64 << e).collect()
}

/// Checks the collective and schedule inequalities at every size in `sizes`.
///
/// `x` stands in for both `B*L*M*N_ESP` and `E*T*M*N_ESP`, so the MP term
/// reads `t_B(x) - [A2A_EP&ESP(x/N_MP) + SAA(A2A_EP&ESP(x/N_MP), AG_MP(x/N_ESP))]`.
/// The MP inequality is only checked for `N_MP >= 2` with node-local MP
/// groups.
pub fn verify_inequalities(cluster: &ClusterSpec, layout: &ParallelLayout, sizes: &[u64]) -> Result<InequalityReport> {
    let case = classify_placement(cluster, layout)?;
    if case == PlacementCase::Other {
        return Err(Error::UnsupportedPlacement(format!(
            "{layout} on {} nodes x {} devices splits both ESP and EP groups across nodes; \
             neither group kind is node-local, so the comparison does not apply",
            cluster.num_nodes, cluster.devices_per_node
        )));
    }
    let timer = Timer::new(layout, cluster)?;
    let (mp, esp) = (layout.mp() as u64, layout.esp() as u64);
    let check_mp = mp >= 2 && layout.mp_intra_node(cluster);
    let skipped = if mp < 2 {
        Some("N_MP = 1".to_string())
    } else if !check_mp {
        Some("MP groups straddle nodes (out of model)".to_string())
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut push = |inequality, x, lhs: f64, rhs: f64, pass| {
        rows.push(InequalityRow {
            case,
            inequality,
            x,
            lhs,
            rhs,
            pass,
        })
    };
    for &x in sizes {
        let fused = timer.time(CollectiveKey::A2aEpEsp, x)?;
        let ep = timer.time(CollectiveKey::A2aEp, x)?;
        let ag = timer.time(CollectiveKey::AgEsp, x)?;
        let rs = timer.time(CollectiveKey::RsEsp, x)?;
        let ar = timer.time(CollectiveKey::ArEsp, x)?;

        push(Inequality::FusedVsGather, x, fused, ag + ep, fused <= ag + ep);
        if case == PlacementCase::SingleNode {
            let close = (fused - ep).abs() <= EQUALITY_TOLERANCE * fused.abs().max(ep.abs());
            push(Inequality::SingleNodeEquality, x, fused, ep, close);
        }
        push(Inequality::FusedVsScatter, x, fused, rs + ep, fused <= rs + ep);

        let t_b = ag + ar + 2.0 * ep;
        let t_d = 2.0 * fused;
        push(Inequality::FusedGain, x, t_b - t_d, ag, t_b - t_d >= ag);

        if check_mp {
            let vol = Volumes {
                blm: x / esp,
                etm: x / esp,
                n_esp: esp,
                n_mp: mp,
            };
            let a = timer.time(CollectiveKey::A2aEpEsp, vol.y_mp())?;
            let saa = timer.saa(vol.y_mp(), vol.etm)?;
            let t_d2 = a + saa.seconds;
            push(Inequality::OverlapGain, x, t_b - t_d2, 0.0, t_b - t_d2 >= 0.0);
        }
    }
    Ok(InequalityReport { case, rows, skipped })
}
