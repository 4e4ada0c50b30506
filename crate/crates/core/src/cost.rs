//! Alpha-beta cost model: fitting, schedule formulas, and the S1/S2 selector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::{MoeConfig, ParallelLayout, Volumes};
use crate::error::{Error, Result};
use crate::moe::ScheduleKind;
use crate::timing::{CollectiveKey, Timer};

/// `t = alpha + beta * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaBeta {
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    /// The unconstrained fit had a negative intercept.
    pub alpha_clamped: bool,
}

impl AlphaBeta {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            r_squared: 1.0,
            alpha_clamped: false,
        }
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.alpha + self.beta * x
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            alpha: self.alpha * s,
            beta: self.beta * s,
            ..*self
        }
    }
}

fn r_squared(samples: &[(f64, f64)], alpha: f64, beta: f64) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.1 - mean).powi(2)).sum();
    let ss_res: f64 = samples.iter().map(|s| (s.1 - alpha - beta * s.0).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    }
}

/// Ordinary least squares of `seconds` on `elements`.
///
/// A negative intercept is clamped to zero and the slope refitted through
/// the origin; `alpha_clamped` records that it happened.
pub fn fit_alpha_beta(samples: &[(f64, f64)]) -> Result<AlphaBeta> {
    if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
        return Err(Error::Fit("non-finite sample".into()));
    }
    let distinct: BTreeSet<u64> = samples.iter().map(|s| s.0.to_bits()).collect();
    if distinct.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least two distinct sizes, got {}",
            distinct.len()
        )));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("sizes have zero variance".into()));
    }
    let mut beta = sxy / sxx;
    let mut alpha = my - beta * mx;
    let mut clamped = false;
    if alpha < 0.0 {
        clamped = true;
        alpha = 0.0;
        let sxx0: f64 = samples.iter().map(|s| s.0 * s.0).sum();
        beta = samples.iter().map(|s| s.0 * s.1).sum::<f64>() / sxx0;
        log::warn!("negative fitted intercept clamped to zero");
    }
    if beta < 0.0 {
        return Err(Error::Fit(format!("negative slope {beta:e}")));
    }
    Ok(AlphaBeta {
        alpha,
        beta,
        r_squared: r_squared(samples, alpha, beta),
        alpha_clamped: clamped,
    })
}

/// One timing sample, as in the fit-input CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub key: CollectiveKey,
    pub elements: u64,
    pub seconds: f64,
}

/// Fitted parameters per collective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostProfile {
    entries: BTreeMap<CollectiveKey, AlphaBeta>,
}

impl CostProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: CollectiveKey, ab: AlphaBeta) {
        self.entries.insert(key, ab);
    }

    pub fn get(&self, key: CollectiveKey) -> Result<AlphaBeta> {
        self.entries
            .get(&key)
            .copied()
            .ok_or_else(|| Error::MissingProfile(vec![missing_name(key)]))
    }

    pub fn entries(&self) -> impl Iterator<Item = (CollectiveKey, AlphaBeta)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn require(&self, keys: &[CollectiveKey]) -> Result<()> {
        let missing: Vec<String> = keys
            .iter()
            .filter(|k| !self.entries.contains_key(k))
            .map(|k| missing_name(*k))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingProfile(missing))
        }
    }

    /// Every alpha and beta multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (*k, v.scaled(s))).collect(),
        }
    }

    fn at(&self, key: CollectiveKey, x: f64) -> Result<f64> {
        Ok(self.get(key)?.predict(x))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(PROFILE_HEADER);
        s.push('\n');
        for (k, ab) in &self.entries {
            let (c, g) = k.csv_names();
            s.push_str(&format!("{c},{g},{},{},{}\n", ab.alpha, ab.beta, ab.r_squared));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut p = Self::new();
        for (line, fields) in csv_rows(text, PROFILE_HEADER)? {
            if fields.len() != 5 {
                return Err(csv_err(line, format!("expected 5 fields, found {}", fields.len())));
            }
            let key = parse_key(line, fields[0], fields[1])?;
            let alpha = parse_f64(line, "alpha", fields[2])?;
            let beta = parse_f64(line, "beta", fields[3])?;
            let r2 = parse_f64(line, "r_squared", fields[4])?;
            if alpha < 0.0 || beta < 0.0 {
                return Err(csv_err(line, "alpha and beta must be non-negative".into()));
            }
            p.insert(
                key,
                AlphaBeta {
                    alpha,
                    beta,
                    r_squared: r2,
                    alpha_clamped: false,
                },
            );
        }
        Ok(p)
    }
}

pub const SAMPLES_HEADER: &str = "collective,group,elements,seconds";
pub const PROFILE_HEADER: &str = "collective,group,alpha,beta,r_squared";
pub const PREDICTION_HEADER: &str = "config_id,t_B,t_D,t_D1,t_D2,chosen";

fn csv_err(line: usize, msg: String) -> Error {
    Error::Csv { line, msg }
}

fn parse_f64(line: usize, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| csv_err(line, format!("{name} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(csv_err(line, format!("{name} `{s}` is not finite")));
    }
    Ok(v)
}

fn parse_key(line: usize, collective: &str, group: &str) -> Result<CollectiveKey> {
    CollectiveKey::from_csv(collective.trim(), group.trim())
        .ok_or_else(|| csv_err(line, format!("unknown collective/group pair `{collective},{group}`")))
}

/// Non-empty data rows with 1-based line numbers, after checking the header.
fn csv_rows<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((n, h)) => return Err(csv_err(n, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(csv_err(1, "empty file".into())),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n, l.split(',').collect()))
        .collect())
}

pub fn samples_from_csv(text: &str) -> Result<Vec<Sample>> {
    csv_rows(text, SAMPLES_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            if f.len() != 4 {
                return Err(csv_err(line, format!("expected 4 fields, found {}", f.len())));
            }
            let key = parse_key(line, f[0], f[1])?;
            let elements = f[2]
                .trim()
                .parse::<u64>()
                .map_err(|_| csv_err(line, format!("elements `{}` is not a non-negative integer", f[2])))?;
            let seconds = parse_f64(line, "seconds", f[3])?;
            Ok(Sample { key, elements, seconds })
        })
        .collect()
}

pub fn samples_to_csv(samples: &[Sample]) -> String {
    let mut s = String::from(SAMPLES_HEADER);
    s.push('\n');
    for x in samples {
        let (c, g) = x.key.csv_names();
        s.push_str(&format!("{c},{g},{},{}\n", x.elements, x.seconds));
    }
    s
}

/// Fits one entry per collective present in `samples`.
pub fn fit_profile(samples: &[Sample]) -> Result<CostProfile> {
    let mut grouped: BTreeMap<CollectiveKey, Vec<(f64, f64)>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.key).or_default().push((s.elements as f64, s.seconds));
    }
    let mut p = CostProfile::new();
    for (k, pts) in grouped {
        let ab = fit_alpha_beta(&pts).map_err(|e| Error::Fit(format!("{k}: {e}")))?;
        p.insert(k, ab);
    }
    Ok(p)
}

/// Simulated timings of every collective at every size.
pub fn measure_samples(timer: &Timer<'_>, sizes: &[u64]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(sizes.len() * CollectiveKey::ALL.len());
    for key in CollectiveKey::ALL {
        for &x in sizes {
            out.push(Sample {
                key,
                elements: x,
                seconds: timer.measure(key, x)?,
            });
        }
    }
    Ok(out)
}

fn esp_mp(v: &Volumes) -> (f64, f64) {
    (v.n_esp as f64, v.n_mp as f64)
}

/// `t_B = AG_ESP(BLM*N_ESP) + AR_ESP(y) + 2 * A2A_EP(y)` with `y = ETM*N_ESP`.
pub fn cost_baseline(v: &Volumes, p: &CostProfile) -> Result<f64> {
    p.require(&[CollectiveKey::AgEsp, CollectiveKey::ArEsp, CollectiveKey::A2aEp])?;
    let (esp, _) = esp_mp(v);
    let y = v.etm as f64 * esp;
    Ok(p.at(CollectiveKey::AgEsp, v.blm as f64 * esp)?
        + p.at(CollectiveKey::ArEsp, y)?
        + 2.0 * p.at(CollectiveKey::A2aEp, y)?)
}

/// `t_D = 2 * A2A_EP&ESP(y)`.
pub fn cost_fused(v: &Volumes, p: &CostProfile) -> Result<f64> {
    Ok(2.0 * p.at(CollectiveKey::A2aEpEsp, v.etm as f64 * v.n_esp as f64)?)
}

/// `t_D1 = 2 * A2A_EP&ESP(y / N_MP) + AG_MP(BLM)`.
pub fn cost_s1(v: &Volumes, p: &CostProfile) -> Result<f64> {
    p.require(&[CollectiveKey::A2aEpEsp, CollectiveKey::AgMp])?;
    let (esp, mp) = esp_mp(v);
    Ok(2.0 * p.at(CollectiveKey::A2aEpEsp, v.etm as f64 * esp / mp)? + p.at(CollectiveKey::AgMp, v.blm as f64)?)
}

/// `t_D2 = A2A_EP&ESP(y / N_MP) + Overlap(y / N_MP) + AG_MP(ETM)`.
pub fn cost_s2(v: &Volumes, p: &CostProfile) -> Result<f64> {
    p.require(&[CollectiveKey::A2aEpEsp, CollectiveKey::Overlap, CollectiveKey::AgMp])?;
    let (esp, mp) = esp_mp(v);
    let x = v.etm as f64 * esp / mp;
    Ok(p.at(CollectiveKey::A2aEpEsp, x)?
        + p.at(CollectiveKey::Overlap, x)?
        + p.at(CollectiveKey::AgMp, v.etm as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostMode {
    #[default]
    Standard,
    /// The selector's pseudo-code taken word for word: `T = k*f*B*L*M/E`
    /// (unrounded, with the extra `M`) and `t_D2 = A2A(y/N_MP) + alpha_o + beta_o*y`.
    Alg1Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: ScheduleKind,
    pub t_d1: f64,
    pub t_d2: f64,
}

/// S1 iff `t_D1 <= t_D2`.
pub fn choose(t_d1: f64, t_d2: f64) -> ScheduleKind {
    if t_d1 <= t_d2 {
        ScheduleKind::S1
    } else {
        ScheduleKind::S2
    }
}

pub fn select_schedule(v: &Volumes, p: &CostProfile) -> Result<Selection> {
    let t_d1 = cost_s1(v, p)?;
    let t_d2 = cost_s2(v, p)?;
    Ok(Selection {
        chosen: choose(t_d1, t_d2),
        t_d1,
        t_d2,
    })
}

pub fn select_alg1_literal(cfg: &MoeConfig, layout: &ParallelLayout, p: &CostProfile) -> Result<Selection> {
    p.require(&[CollectiveKey::A2aEpEsp, CollectiveKey::Overlap, CollectiveKey::AgMp])?;
    let (b, l, m, e) = (
        cfg.batch as f64,
        cfg.seq_len as f64,
        cfg.embed as f64,
        cfg.experts as f64,
    );
    let (esp, mp) = (layout.esp() as f64, layout.mp() as f64);
    let x = b * l * m;
    let t = cfg.top_k as f64 * cfg.capacity_factor * b * l * m / e;
    let y = e * t * m * esp;
    let a = p.get(CollectiveKey::A2aEpEsp)?;
    let g = p.get(CollectiveKey::AgMp)?;
    let o = p.get(CollectiveKey::Overlap)?;
    let t_d1 = 2.0 * a.predict(y / mp) + g.predict(x);
    let t_d2 = a.predict(y / mp) + o.predict(y);
    Ok(Selection {
        chosen: choose(t_d1, t_d2),
        t_d1,
        t_d2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub t_b: f64,
    pub t_d: f64,
    pub t_d1: f64,
    pub t_d2: f64,
    pub chosen: ScheduleKind,
    /// `(term, seconds)` contributions.
    pub terms: Vec<(String, f64)>,
}

impl CostReport {
    pub fn csv_row(&self, config_id: &str) -> String {
        format!(
            "{config_id},{},{},{},{},{}",
            self.t_b,
            self.t_d,
            self.t_d1,
            self.t_d2,
            self.chosen.as_str().to_uppercase()
        )
    }
}

fn missing_name(key: CollectiveKey) -> String {
    let (c, g) = key.csv_names();
    format!("{key} ({c},{g})")
}

/// Prices every schedule; needs a complete profile.
pub fn cost_report(cfg: &MoeConfig, layout: &ParallelLayout, p: &CostProfile, mode: CostMode) -> Result<CostReport> {
    p.require(&CollectiveKey::ALL)?;
    let v = Volumes::new(cfg, layout);
    let (esp, mp) = esp_mp(&v);
    let y = v.etm as f64 * esp;
    let sel = match mode {
        CostMode::Standard => select_schedule(&v, p)?,
        CostMode::Alg1Literal => select_alg1_literal(cfg, layout, p)?,
    };
    let terms = vec![
        (
            "AG_ESP(BLM*N_ESP)".into(),
            p.at(CollectiveKey::AgEsp, v.blm as f64 * esp)?,
        ),
        ("AR_ESP(ETM*N_ESP)".into(), p.at(CollectiveKey::ArEsp, y)?),
        ("A2A_EP(ETM*N_ESP)".into(), p.at(CollectiveKey::A2aEp, y)?),
        ("A2A_EP&ESP(ETM*N_ESP)".into(), p.at(CollectiveKey::A2aEpEsp, y)?),
        (
            "A2A_EP&ESP(ETM*N_ESP/N_MP)".into(),
            p.at(CollectiveKey::A2aEpEsp, y / mp)?,
        ),
        ("Overlap(ETM*N_ESP/N_MP)".into(), p.at(CollectiveKey::Overlap, y / mp)?),
        ("AG_MP(BLM)".into(), p.at(CollectiveKey::AgMp, v.blm as f64)?),
        ("AG_MP(ETM)".into(), p.at(CollectiveKey::AgMp, v.etm as f64)?),
    ];
    Ok(CostReport {
        t_b: cost_baseline(&v, p)?,
        t_d: cost_fused(&v, p)?,
        t_d1: sel.t_d1,
        t_d2: sel.t_d2,
        chosen: sel.chosen,
        terms,
    })
}

/// Pairwise orderings a profile in constraint set C satisfies, each in both
/// alpha and beta. Pairs are `(smaller, larger)`; the last entries are sums.
fn constraint_violations(p: &CostProfile) -> Result<Vec<String>> {
    use CollectiveKey::*;
    p.require(&CollectiveKey::ALL)?;
    let g = |k| p.get(k).expect("checked above");
    let mut bad = Vec::new();
    let mut check = |name: &str, lhs: (f64, f64), rhs: (f64, f64)| {
        if lhs.0 > rhs.0 || lhs.1 > rhs.1 {
            bad.push(name.to_string());
        }
    };
    let ab = |k| {
        let v: AlphaBeta = g(k);
        (v.alpha, v.beta)
    };
    let add = |a: (f64, f64), b: (f64, f64)| (a.0 + b.0, a.1 + b.1);
    check("AG_MP <= A2A_EP&ESP", ab(AgMp), ab(A2aEpEsp));
    check("AG_MP <= AG_ESP", ab(AgMp), ab(AgEsp));
    check("Overlap <= A2A_EP&ESP", ab(Overlap), ab(A2aEpEsp));
    check("A2A_EP&ESP <= AG_ESP + A2A_EP", ab(A2aEpEsp), add(ab(AgEsp), ab(A2aEp)));
    check("A2A_EP&ESP <= RS_ESP + A2A_EP", ab(A2aEpEsp), add(ab(RsEsp), ab(A2aEp)));
    check("AG_ESP + RS_ESP <= AR_ESP", add(ab(AgEsp), ab(RsEsp)), ab(ArEsp));
    Ok(bad)
}

/// Constraint set C: the orderings under which the fused schedules provably
/// beat the baseline at model level.
pub fn in_constraint_set(p: &CostProfile) -> Result<bool> {
    Ok(constraint_violations(p)?.is_empty())
}

pub fn constraint_report(p: &CostProfile) -> Result<Vec<String>> {
    constraint_violations(p)
}

/// Draws a random profile in constraint set C.
///
/// Alphas are log-uniform in `[1e-6, 1e-3]` seconds and betas in
/// `[1e-11, 1e-9]` seconds per element before the orderings are imposed.
pub fn random_profile_in_c<R: Rng + ?Sized>(rng: &mut R) -> CostProfile {
    use CollectiveKey::*;
    fn draw<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 7] {
        let u = |rng: &mut R| (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let a2a = u(rng);
        let ag_mp = a2a * rng.gen::<f64>();
        let overlap = a2a * rng.gen::<f64>();
        let ag_esp = ag_mp + u(rng);
        let rs_esp = u(rng);
        let a2a_ep = (a2a - ag_esp.min(rs_esp)).max(0.0) + u(rng);
        let ar_esp = ag_esp + rs_esp + u(rng);
        [ag_mp, a2a_ep, a2a, ag_esp, rs_esp, ar_esp, overlap]
    }
    let alphas = draw(rng, 1e-6, 1e-3);
    let betas = draw(rng, 1e-11, 1e-9);
    let keys = [AgMp, A2aEp, A2aEpEsp, AgEsp, RsEsp, ArEsp, Overlap];
    let mut p = CostProfile::new();
    for (i, k) in keys.into_iter().enumerate() {
        p.insert(k, AlphaBeta::new(alphas[i], betas[i]));
    }
    p
}

impl FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CostMode::Standard),
            "alg1-literal" => Ok(CostMode::Alg1Literal),
            _ => Err(Error::InvalidConfig(format!("unknown cost mode `{s}`"))),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Standard => "standard",
            CostMode::Alg1Literal => "alg1-literal",
        })
    }
}
