//! Configuration types: the MoE layer shape, the cluster, the parallel
//! layout and the rank/group overlay.
//!
//! Rank mapping used throughout the crate:
//!
//! * ESP groups are contiguous blocks: block `g` holds ranks
//!   `[g * N_ESP, (g + 1) * N_ESP)`.
//! * EP groups are strided: ranks with the same offset inside their ESP
//!   block. A rank's EP position is therefore `rank / N_ESP` and its ESP
//!   position is `rank % N_ESP`, so the EP&ESP group orders ranks
//!   EP-major, ESP-minor, which coincides with plain rank order.
//! * MP groups are contiguous blocks of `N_MP` ranks.
//! * Ranks fill nodes contiguously (`node = rank / devices_per_node`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Shape of one MoE layer as seen by a single rank.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    /// Samples per rank (B).
    pub batch: usize,
    /// Tokens per sample (L).
    pub seq_len: usize,
    /// Token embedding size (M).
    pub embed: usize,
    /// Expert hidden size (H).
    pub hidden: usize,
    /// Total number of experts (E).
    pub experts: usize,
    /// Experts selected per token (k).
    pub top_k: usize,
    /// Capacity factor (f).
    pub capacity_factor: f64,
}

impl MoeConfig {
    pub fn new(
        batch: usize,
        seq_len: usize,
        embed: usize,
        hidden: usize,
        experts: usize,
        top_k: usize,
        capacity_factor: f64,
    ) -> Result<Self> {
        let cfg = Self {
            batch,
            seq_len,
            embed,
            hidden,
            experts,
            top_k,
            capacity_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("B", self.batch),
            ("L", self.seq_len),
            ("M", self.embed),
            ("H", self.hidden),
            ("E", self.experts),
            ("k", self.top_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.top_k > self.experts {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds E = {}",
                self.top_k, self.experts
            )));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "capacity factor must be positive, got {}",
                self.capacity_factor
            )));
        }
        Ok(())
    }

    /// Tokens held by one rank, `B * L`.
    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Expert capacity `T`, see [`derive_capacity`].
    pub fn capacity(&self) -> usize {
        derive_capacity(self)
    }
}

/// `T = ceil(k * f * B * L / E)`, never below one.
pub fn derive_capacity(cfg: &MoeConfig) -> usize {
    let raw = (cfg.top_k * cfg.tokens()) as f64 * cfg.capacity_factor / cfg.experts as f64;
    // absorb representation error so that exact integers do not round up
    let t = (raw * (1.0 - 1e-12)).ceil();
    (t as usize).max(1)
}

/// Tensor sizes (in elements) that the schedule cost formulas take.
///
/// `etm` is `E * T * M` with `T` padded to a multiple of `N_MP`, which is the
/// slot count the MP-sharded gates actually produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Volumes {
    pub blm: u64,
    pub etm: u64,
    pub n_esp: u64,
    pub n_mp: u64,
}

impl Volumes {
    pub fn new(cfg: &MoeConfig, layout: &ParallelLayout) -> Self {
        let mp = layout.mp();
        let padded = cfg.capacity().div_ceil(mp) * mp;
        Self {
            blm: (cfg.tokens() * cfg.embed) as u64,
            etm: (cfg.experts * padded * cfg.embed) as u64,
            n_esp: layout.esp() as u64,
            n_mp: mp as u64,
        }
    }

    /// `E * T * M * N_ESP`, the dispatch volume per rank.
    pub fn y(&self) -> u64 {
        self.etm * self.n_esp
    }

    /// `y / N_MP`.
    pub fn y_mp(&self) -> u64 {
        self.y() / self.n_mp
    }
}

/// Homogeneous two-level cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    pub devices_per_node: usize,
    /// Seconds per element on intra-node links.
    pub beta_intra: f64,
    /// Seconds per element on inter-node links.
    pub beta_inter: f64,
    /// Startup seconds per point-to-point step.
    pub alpha_link: f64,
}

impl ClusterSpec {
    pub fn new(
        num_nodes: usize,
        devices_per_node: usize,
        beta_intra: f64,
        beta_inter: f64,
        alpha_link: f64,
    ) -> Result<Self> {
        let c = Self {
            num_nodes,
            devices_per_node,
            beta_intra,
            beta_inter,
            alpha_link,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.devices_per_node == 0 {
            return Err(Error::InvalidConfig(
                "cluster needs at least one node and one device per node".into(),
            ));
        }
        if !(self.beta_intra > 0.0 && self.beta_inter > 0.0) {
            return Err(Error::InvalidConfig("link betas must be positive".into()));
        }
        if self.beta_intra >= self.beta_inter {
            return Err(Error::InvalidConfig(format!(
                "intra-node links must be faster than inter-node links \
                 (beta_intra {} >= beta_inter {})",
                self.beta_intra, self.beta_inter
            )));
        }
        if !(self.alpha_link >= 0.0 && self.alpha_link.is_finite()) {
            return Err(Error::InvalidConfig("alpha_link must be non-negative".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> usize {
        self.num_nodes * self.devices_per_node
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.devices_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKind {
    Mp,
    Ep,
    Esp,
    EpEsp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [GroupKind::Mp, GroupKind::Ep, GroupKind::Esp, GroupKind::EpEsp];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKind::Mp => "mp",
            GroupKind::Ep => "ep",
            GroupKind::Esp => "esp",
            GroupKind::EpEsp => "ep_esp",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mp" => Ok(GroupKind::Mp),
            "ep" => Ok(GroupKind::Ep),
            "esp" => Ok(GroupKind::Esp),
            "ep_esp" | "ep&esp" | "epesp" => Ok(GroupKind::EpEsp),
            other => Err(Error::UnknownGroupKind(other.to_string())),
        }
    }
}

/// Group sizes of the hybrid layout. The MoE region spans every rank, so
/// `P = N_EP * N_ESP`, and MP groups are overlaid on the same ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParallelLayout {
    mp: usize,
    ep: usize,
    esp: usize,
}

impl ParallelLayout {
    pub fn new(mp: usize, ep: usize, esp: usize) -> Result<Self> {
        if mp == 0 || ep == 0 || esp == 0 {
            return Err(Error::Layout("group sizes must be at least 1".into()));
        }
        let world = ep * esp;
        if world % mp != 0 {
            return Err(Error::Layout(format!(
                "N_MP = {mp} does not divide P = N_EP * N_ESP = {world}"
            )));
        }
        Ok(Self { mp, ep, esp })
    }

    pub fn mp(&self) -> usize {
        self.mp
    }

    pub fn ep(&self) -> usize {
        self.ep
    }

    pub fn esp(&self) -> usize {
        self.esp
    }

    pub fn world(&self) -> usize {
        self.ep * self.esp
    }

    pub fn group_size(&self, kind: GroupKind) -> usize {
        match kind {
            GroupKind::Mp => self.mp,
            GroupKind::Ep => self.ep,
            GroupKind::Esp => self.esp,
            GroupKind::EpEsp => self.world(),
        }
    }

    /// Sorted membership of `rank`'s group of the given kind.
    pub fn group_members(&self, kind: GroupKind, rank: usize) -> Result<Vec<usize>> {
        self.check_rank(rank)?;
        Ok(match kind {
            GroupKind::Mp => {
                let start = rank / self.mp * self.mp;
                (start..start + self.mp).collect()
            }
            GroupKind::Esp => {
                let start = rank / self.esp * self.esp;
                (start..start + self.esp).collect()
            }
            GroupKind::Ep => {
                let offset = rank % self.esp;
                (0..self.ep).map(|i| i * self.esp + offset).collect()
            }
            GroupKind::EpEsp => (0..self.world()).collect(),
        })
    }

    /// Index of `rank` inside its group of the given kind.
    pub fn position(&self, kind: GroupKind, rank: usize) -> usize {
        match kind {
            GroupKind::Mp => rank % self.mp,
            GroupKind::Esp => rank % self.esp,
            GroupKind::Ep => rank / self.esp,
            GroupKind::EpEsp => rank,
        }
    }

    /// All groups of one kind, ordered by their smallest member.
    pub fn groups(&self, kind: GroupKind) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.world()];
        let mut out = Vec::new();
        for r in 0..self.world() {
            if seen[r] {
                continue;
            }
            let g = self.group_members(kind, r).expect("rank is in range by construction");
            for &m in &g {
                seen[m] = true;
            }
            out.push(g);
        }
        out
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.world() {
            return Err(Error::Layout(format!(
                "rank {rank} out of range for P = {}",
                self.world()
            )));
        }
        Ok(())
    }

    /// True when every MP group lives inside a single node.
    pub fn mp_intra_node(&self, cluster: &ClusterSpec) -> bool {
        self.groups(GroupKind::Mp).iter().all(|g| group_in_one_node(cluster, g))
    }
}

impl fmt::Display for ParallelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mp{}-ep{}-esp{}", self.mp, self.ep, self.esp)
    }
}

fn group_in_one_node(cluster: &ClusterSpec, group: &[usize]) -> bool {
    group.iter().all(|&r| cluster.node_of(r) == cluster.node_of(group[0]))
}

/// How EP and ESP groups map onto nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlacementCase {
    SingleNode,
    EspIntraNode,
    EpIntraNode,
    Other,
}

impl PlacementCase {
    pub fn number(&self) -> u8 {
        match self {
            PlacementCase::SingleNode => 1,
            PlacementCase::EspIntraNode => 2,
            PlacementCase::EpIntraNode => 3,
            PlacementCase::Other => 4,
        }
    }
}

impl fmt::Display for PlacementCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PlacementCase::SingleNode => "case1-single-node",
            PlacementCase::EspIntraNode => "case2-esp-intra-node",
            PlacementCase::EpIntraNode => "case3-ep-intra-node",
            PlacementCase::Other => "case4-other",
        };
        f.write_str(s)
    }
}

pub fn classify_placement(cluster: &ClusterSpec, layout: &ParallelLayout) -> Result<PlacementCase> {
    if cluster.world() != layout.world() {
        return Err(Error::Layout(format!(
            "cluster has {} ranks but layout needs P = {}",
            cluster.world(),
            layout.world()
        )));
    }
    if cluster.num_nodes == 1 {
        return Ok(PlacementCase::SingleNode);
    }
    let all_in_node = |kind| layout.groups(kind).iter().all(|g| group_in_one_node(cluster, g));
    if all_in_node(GroupKind::Esp) {
        Ok(PlacementCase::EspIntraNode)
    } else if all_in_node(GroupKind::Ep) {
        Ok(PlacementCase::EpIntraNode)
    } else {
        Ok(PlacementCase::Other)
    }
}

/// Everything a run needs: layer shape, layout, cluster and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub moe: MoeConfig,
    pub layout: ParallelLayout,
    pub cluster: ClusterSpec,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(rename = "B")]
    batch: usize,
    #[serde(rename = "L")]
    seq_len: usize,
    #[serde(rename = "M")]
    embed: usize,
    #[serde(rename = "H")]
    hidden: usize,
    #[serde(rename = "E")]
    experts: usize,
    k: usize,
    f: f64,
    #[serde(rename = "N_MP")]
    n_mp: usize,
    #[serde(rename = "N_EP")]
    n_ep: usize,
    #[serde(rename = "N_ESP")]
    n_esp: usize,
    num_nodes: usize,
    devices_per_node: usize,
    beta_intra: f64,
    beta_inter: f64,
    alpha_link: f64,
    seed: Option<u64>,
}

impl RunConfig {
    pub fn new(moe: MoeConfig, layout: ParallelLayout, cluster: ClusterSpec, seed: Option<u64>) -> Result<Self> {
        if cluster.world() != layout.world() {
            return Err(Error::Layout(format!(
                "cluster has {} ranks but layout needs P = {}",
                cluster.world(),
                layout.world()
            )));
        }
        Ok(Self {
            moe,
            layout,
            cluster,
            seed,
        })
    }

    /// Parses the flat `key = value` config format (a TOML subset).
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text)?;
        let moe = MoeConfig::new(raw.batch, raw.seq_len, raw.embed, raw.hidden, raw.experts, raw.k, raw.f)?;
        let layout = ParallelLayout::new(raw.n_mp, raw.n_ep, raw.n_esp)?;
        let cluster = ClusterSpec::new(
            raw.num_nodes,
            raw.devices_per_node,
            raw.beta_intra,
            raw.beta_inter,
            raw.alpha_link,
        )?;
        Self::new(moe, layout, cluster, raw.seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
