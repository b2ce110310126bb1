//! InfoNCE components, the six similarity-aggregation schemes and the
//! supervised/total objective.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Targets;
use crate::error::{Error, Result};
use crate::model::NORMALIZE_EPS;
use crate::tensor::{Scalar, Tensor};

/// Logit assigned to excluded candidates; far below any cosine / τ.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    All,
    Gg,
    F,
    S,
    Fs,
    Sf,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [Scheme::All, Scheme::Gg, Scheme::F, Scheme::S, Scheme::Fs, Scheme::Sf];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::All => "all",
            Scheme::Gg => "gg",
            Scheme::F => "f",
            Scheme::S => "s",
            Scheme::Fs => "fs",
            Scheme::Sf => "sf",
        }
    }

    /// Schemes whose candidates are the anchors themselves.
    fn self_geometry(self) -> bool {
        matches!(self, Scheme::All | Scheme::F | Scheme::S | Scheme::Sf)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown contrastive scheme `{s}` (expected all, gg, f, s, fs or sf)"
            ))
        })
    }
}

/// Parses a comma-separated scheme list. `none` or an empty string selects
/// no schemes; `+` is accepted as a separator too.
pub fn parse_schemes(text: &str) -> Result<BTreeSet<Scheme>> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for part in text.split([',', '+']) {
        let scheme: Scheme = part.trim().parse()?;
        if !out.insert(scheme) {
            return Err(Error::Config(format!("scheme `{scheme}` listed twice")));
        }
    }
    Ok(out)
}

/// Joins schemes with `+`, or `none` for the empty set.
pub fn format_schemes(schemes: &BTreeSet<Scheme>) -> String {
    if schemes.is_empty() {
        "none".to_owned()
    } else {
        schemes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub schemes: BTreeSet<Scheme>,
    pub tau: f64,
    pub alpha: f64,
    /// Let the [CLS] position take part in contrasts.
    pub include_cls: bool,
    /// Drop each anchor's own row from the repel candidates of
    /// self-referencing schemes (all, f, s, sf).
    pub exclude_self: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            schemes: BTreeSet::new(),
            tau: 0.5,
            alpha: 0.1,
            include_cls: true,
            exclude_self: false,
        }
    }
}

impl LossSpec {
    pub fn with_schemes(schemes: impl IntoIterator<Item = Scheme>) -> Self {
        Self {
            schemes: schemes.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The three components of one scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastTriple<V = f64> {
    pub attract: V,
    pub repel: V,
    pub cross: V,
}

impl ContrastTriple<Var> {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> ContrastTriple<f64> {
        ContrastTriple {
            attract: g.scalar_value(self.attract).as_f64(),
            repel: g.scalar_value(self.repel).as_f64(),
            cross: g.scalar_value(self.cross).as_f64(),
        }
    }

    pub fn sum<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let s = g.add(self.attract, self.repel)?;
        g.add(s, self.cross)
    }
}

impl ContrastTriple<f64> {
    pub fn sum(&self) -> f64 {
        self.attract + self.repel + self.cross
    }
}

/// Cosine similarities between the rows of `a: [.., K, d]` and
/// `c: [.., K', d]` (or a shared `c: [K', d]`), giving `[.., K, K']`.
pub fn cosine_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, c: Var) -> Result<Var> {
    let an = g.l2_normalize(a, NORMALIZE_EPS)?;
    let cn = g.l2_normalize(c, NORMALIZE_EPS)?;
    let r = g.shape(cn).len();
    if r < 2 {
        return Err(Error::invalid("cosine_matrix", format!("candidates of rank {r}")));
    }
    let ct = g.transpose(cn, r - 2, r - 1)?;
    g.matmul(an, ct)
}

/// InfoNCE over precomputed similarities `[.., K, K']`. `pos[k]` is the
/// positive candidate of anchor row `k`, shared across leading axes; `sign`
/// is +1 to attract and −1 to repel. The result is the mean over anchors.
pub fn info_nce_from_sims<T: Scalar>(
    g: &mut Graph<T>,
    sims: Var,
    pos: &[usize],
    sign: f64,
    tau: f64,
    exclude_self: bool,
) -> Result<Var> {
    let shape = g.shape(sims).to_vec();
    if shape.len() < 2 {
        return Err(Error::invalid("info_nce", format!("similarities of shape {shape:?}")));
    }
    let (k, kc) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if kc < 2 {
        return Err(Error::DegenerateContrast(kc));
    }
    if pos.len() != k {
        return Err(Error::invalid(
            "info_nce",
            format!("{} positives for {k} anchors", pos.len()),
        ));
    }
    let groups = shape[..shape.len() - 2].iter().product::<usize>();
    let mut logits = g.scale(sims, sign / tau);
    if exclude_self {
        if k != kc {
            return Err(Error::invalid("info_nce", "exclude_self needs square similarities"));
        }
        if pos.iter().enumerate().any(|(a, &p)| a == p) {
            return Err(Error::invalid(
                "info_nce",
                "a positive coincides with the excluded self pair",
            ));
        }
        let mask: Vec<bool> = (0..groups * k * kc).map(|i| (i / kc) % k == i % kc).collect();
        logits = g.mask_fill(logits, &mask, MASKED_LOGIT)?;
    }
    let r = shape.len();
    let logp = g.log_softmax(logits, r - 1)?;
    let index: Vec<usize> = (0..groups).flat_map(|_| pos.iter().copied()).collect();
    let picked = g.take_along_last(logp, &index)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Pulls each anchor toward its positive candidate.
pub fn info_nce_attract<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    candidates: Var,
    pos: &[usize],
    tau: f64,
) -> Result<Var> {
    let sims = cosine_matrix(g, anchors, candidates)?;
    info_nce_from_sims(g, sims, pos, 1.0, tau, false)
}

/// Repel form: similarities enter with a negative sign.
pub fn info_nce_repel<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    candidates: Var,
    pos: &[usize],
    tau: f64,
) -> Result<Var> {
    let sims = cosine_matrix(g, anchors, candidates)?;
    info_nce_from_sims(g, sims, pos, -1.0, tau, false)
}

/// Repels each global anchor from the local vector at the same index.
pub fn info_nce_cross<T: Scalar>(g: &mut Graph<T>, globals: Var, locals: Var, tau: f64) -> Result<Var> {
    let k = g.shape(globals).iter().rev().nth(1).copied().unwrap_or(0);
    let sims = cosine_matrix(g, globals, locals)?;
    info_nce_from_sims(g, sims, &identity(k), -1.0, tau, false)
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn cyclic(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Narrows `g`/`l` (and the table) to the contrast positions.
fn contrast_view<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &LossSpec) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "contrast",
            format!("expected [b, m+1, d], got {shape:?}"),
        ));
    }
    if spec.include_cls {
        Ok(x)
    } else {
        if shape[1] < 2 {
            return Err(Error::DegenerateContrast(shape[1] - 1));
        }
        g.narrow(x, 1, 1, shape[1] - 1)
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, gv: Var, lv: Var) -> Result<()> {
    if g.shape(gv) != g.shape(lv) {
        return Err(Error::shape("contrast", g.shape(gv), g.shape(lv)));
    }
    Ok(())
}

fn need_batch(b: usize) -> Result<()> {
    if b < 2 {
        Err(Error::DegenerateContrast(b))
    } else {
        Ok(())
    }
}

/// Attract on `ga→gc`, repel on `la→lc`, cross on `ga→lc_cross`.
#[allow(clippy::too_many_arguments)]
fn triple<T: Scalar>(
    g: &mut Graph<T>,
    (ga, gc): (Var, Var),
    (la, lc): (Var, Var),
    cross_candidates: Var,
    attract_pos: &[usize],
    repel_pos: &[usize],
    spec: &LossSpec,
    scheme: Scheme,
) -> Result<ContrastTriple<Var>> {
    let sims = cosine_matrix(g, ga, gc)?;
    let attract = info_nce_from_sims(g, sims, attract_pos, 1.0, spec.tau, false)?;
    let sims = cosine_matrix(g, la, lc)?;
    let repel = info_nce_from_sims(
        g,
        sims,
        repel_pos,
        -1.0,
        spec.tau,
        spec.exclude_self && scheme.self_geometry(),
    )?;
    let k = g.shape(ga).iter().rev().nth(1).copied().unwrap_or(0);
    let sims = cosine_matrix(g, ga, cross_candidates)?;
    let cross = info_nce_from_sims(g, sims, &identity(k), -1.0, spec.tau, false)?;
    Ok(ContrastTriple { attract, repel, cross })
}

/// Every (instance, feature) vector against all others; positive is the
/// same feature of the next instance.
pub fn scheme_all<T: Scalar>(g: &mut Graph<T>, gv: Var, lv: Var, spec: &LossSpec) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let (b, n, d) = dims3(g, gv);
    need_batch(b)?;
    let gf = g.reshape(gv, &[b * n, d])?;
    let lf = g.reshape(lv, &[b * n, d])?;
    let pos: Vec<usize> = (0..b * n).map(|r| ((r / n + 1) % b) * n + r % n).collect();
    triple(g, (gf, gf), (lf, lf), lf, &pos, &pos, spec, Scheme::All)
}

/// Each instance's vectors against a learned per-feature table.
pub fn scheme_gg<T: Scalar>(
    g: &mut Graph<T>,
    gv: Var,
    lv: Var,
    table: Var,
    spec: &LossSpec,
) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let full_n = g.shape(gv).get(1).copied().unwrap_or(0);
    let d = g.shape(gv).last().copied().unwrap_or(0);
    if g.shape(table) != [full_n, d] {
        return Err(Error::shape("scheme_gg", g.shape(table), &[full_n, d]));
    }
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let table = if spec.include_cls {
        table
    } else {
        g.narrow(table, 0, 1, full_n - 1)?
    };
    let n = g.shape(gv)[1];
    triple(
        g,
        (gv, table),
        (lv, table),
        lv,
        &identity(n),
        &cyclic(n),
        spec,
        Scheme::Gg,
    )
}

/// Features pooled over the batch; positive is the next feature.
pub fn scheme_f<T: Scalar>(g: &mut Graph<T>, gv: Var, lv: Var, spec: &LossSpec) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let (b, n, _) = dims3(g, gv);
    need_batch(b)?;
    let gp = g.mean_axis(gv, 0)?;
    let lp = g.mean_axis(lv, 0)?;
    let pos = cyclic(n);
    triple(g, (gp, gp), (lp, lp), lp, &pos, &pos, spec, Scheme::F)
}

/// Instances pooled over features; positive is the next instance.
pub fn scheme_s<T: Scalar>(g: &mut Graph<T>, gv: Var, lv: Var, spec: &LossSpec) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let (b, _, _) = dims3(g, gv);
    need_batch(b)?;
    let gp = g.mean_axis(gv, 1)?;
    let lp = g.mean_axis(lv, 1)?;
    let pos = cyclic(b);
    triple(g, (gp, gp), (lp, lp), lp, &pos, &pos, spec, Scheme::S)
}

/// Mean over the other instances of the batch, per position: `[b, n, d]`.
fn leave_one_out_mean<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, n, d) = dims3(g, x);
    let w = T::of(1.0 / (b - 1) as f64);
    let weights = g.constant(Tensor::from_fn([b, b], |i| if i / b == i % b { T::zero() } else { w }));
    let flat = g.reshape(x, &[b, n * d])?;
    let mean = g.matmul(weights, flat)?;
    g.reshape(mean, &[b, n, d])
}

/// Each instance's features against the leave-one-out batch mean;
/// positives match feature indices.
pub fn scheme_fs<T: Scalar>(g: &mut Graph<T>, gv: Var, lv: Var, spec: &LossSpec) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let (b, n, _) = dims3(g, gv);
    need_batch(b)?;
    let gr = leave_one_out_mean(g, gv)?;
    let lr = leave_one_out_mean(g, lv)?;
    let pos = identity(n);
    triple(g, (gv, gr), (lv, lr), lr, &pos, &pos, spec, Scheme::Fs)
}

/// Instances against each other separately at every feature; positive is
/// the next instance.
pub fn scheme_sf<T: Scalar>(g: &mut Graph<T>, gv: Var, lv: Var, spec: &LossSpec) -> Result<ContrastTriple<Var>> {
    check_pair(g, gv, lv)?;
    let (gv, lv) = (contrast_view(g, gv, spec)?, contrast_view(g, lv, spec)?);
    let (b, _, _) = dims3(g, gv);
    need_batch(b)?;
    let gt = g.permute(gv, &[1, 0, 2])?;
    let lt = g.permute(lv, &[1, 0, 2])?;
    let pos = cyclic(b);
    triple(g, (gt, gt), (lt, lt), lt, &pos, &pos, spec, Scheme::Sf)
}

fn dims3<T: Scalar>(g: &Graph<T>, x: Var) -> (usize, usize, usize) {
    let s = g.shape(x);
    (s[0], s[1], s[2])
}

pub fn scheme_triple<T: Scalar>(
    g: &mut Graph<T>,
    scheme: Scheme,
    gv: Var,
    lv: Var,
    table: Var,
    spec: &LossSpec,
) -> Result<ContrastTriple<Var>> {
    match scheme {
        Scheme::All => scheme_all(g, gv, lv, spec),
        Scheme::Gg => scheme_gg(g, gv, lv, table, spec),
        Scheme::F => scheme_f(g, gv, lv, spec),
        Scheme::S => scheme_s(g, gv, lv, spec),
        Scheme::Fs => scheme_fs(g, gv, lv, spec),
        Scheme::Sf => scheme_sf(g, gv, lv, spec),
    }
}

/// The attract-side similarity container of a scheme, laid out as
/// all `(b·n, b·n)`, gg `(b, n, n)`, f `(n, n)`, s `(b, b)`, fs `(b, n, n)`,
/// sf `(b, b, n)`, where `n` counts contrast positions.
pub fn scheme_similarity<T: Scalar>(
    g: &mut Graph<T>,
    scheme: Scheme,
    gv: Var,
    table: Var,
    spec: &LossSpec,
) -> Result<Tensor<T>> {
    let x = contrast_view(g, gv, spec)?;
    let (b, n, d) = dims3(g, x);
    let sims = match scheme {
        Scheme::All => {
            let f = g.reshape(x, &[b * n, d])?;
            cosine_matrix(g, f, f)?
        }
        Scheme::Gg => {
            let table = if spec.include_cls {
                table
            } else {
                g.narrow(table, 0, 1, n)?
            };
            cosine_matrix(g, x, table)?
        }
        Scheme::F => {
            let p = g.mean_axis(x, 0)?;
            cosine_matrix(g, p, p)?
        }
        Scheme::S => {
            let p = g.mean_axis(x, 1)?;
            cosine_matrix(g, p, p)?
        }
        Scheme::Fs => {
            need_batch(b)?;
            let r = leave_one_out_mean(g, x)?;
            cosine_matrix(g, x, r)?
        }
        Scheme::Sf => {
            let t = g.permute(x, &[1, 0, 2])?;
            let s = cosine_matrix(g, t, t)?;
            g.permute(s, &[1, 2, 0])?
        }
    };
    Ok(g.value(sims).clone())
}

/// Summed contrastive objective with its per-scheme parts.
#[derive(Clone, Debug)]
pub struct ContrastBreakdown {
    pub total: Var,
    pub per_scheme: Vec<(Scheme, ContrastTriple<Var>)>,
}

pub fn contrast_total<T: Scalar>(
    g: &mut Graph<T>,
    gv: Var,
    lv: Var,
    table: Var,
    spec: &LossSpec,
) -> Result<ContrastBreakdown> {
    let mut total = g.constant(Tensor::scalar(T::zero()));
    let mut per_scheme = Vec::with_capacity(spec.schemes.len());
    for &scheme in &spec.schemes {
        let t = scheme_triple(g, scheme, gv, lv, table, spec)?;
        let s = t.sum(g)?;
        total = g.add(total, s)?;
        per_scheme.push((scheme, t));
    }
    Ok(ContrastBreakdown { total, per_scheme })
}

/// Mean cross-entropy for class targets, mean squared error for values.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Targets) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::invalid(
            "supervised_loss",
            format!("logits {shape:?} for {} targets", targets.len()),
        ));
    }
    match targets {
        Targets::Classes { labels, .. } => {
            if let Some(&bad) = labels.iter().find(|&&c| c >= shape[1]) {
                return Err(Error::invalid(
                    "supervised_loss",
                    format!("label {bad} out of range for {} classes", shape[1]),
                ));
            }
            let logp = g.log_softmax(logits, 1)?;
            let picked = g.take_along_last(logp, labels)?;
            let m = g.mean(picked);
            Ok(g.neg(m))
        }
        Targets::Values(values) => {
            if shape[1] != 1 {
                return Err(Error::invalid("supervised_loss", "regression expects one output"));
            }
            let y = g.constant(Tensor::from_fn([values.len(), 1], |i| T::of(values[i] as f64)));
            let diff = g.sub(logits, y)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
    }
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, sup: Var, contrast: Var, alpha: f64) -> Result<Var> {
    let weighted = g.scale(contrast, alpha);
    g.add(sup, weighted)
}
