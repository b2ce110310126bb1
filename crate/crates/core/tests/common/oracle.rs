//! Scalar-loop reference implementation of the contrastive schemes, written
//! directly from the per-anchor InfoNCE formula with explicit loops and no
//! tensor machinery. Inputs are `[b][n][d]` nested vectors.

#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

pub type Field = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug)]
pub struct Triple {
    pub attract: f64,
    pub repel: f64,
    pub cross: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean over anchors of `−log softmax(sign·sim/τ)[pos]`, optionally
/// leaving the anchor's own index out of the denominator.
pub fn info_nce(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    pos: &[usize],
    sign: f64,
    tau: f64,
    exclude_self: bool,
) -> f64 {
    let mut total = 0.0;
    for i in 0..anchors.len() {
        let mut denom = 0.0;
        for k in 0..candidates.len() {
            if exclude_self && k == i {
                continue;
            }
            denom += (sign * cosine(&anchors[i], &candidates[k]) / tau).exp();
        }
        let num = (sign * cosine(&anchors[i], &candidates[pos[i]]) / tau).exp();
        total += -(num / denom).ln();
    }
    total / anchors.len() as f64
}

fn triple(
    ga: &[Vec<f64>],
    gc: &[Vec<f64>],
    la: &[Vec<f64>],
    lc: &[Vec<f64>],
    cross_c: &[Vec<f64>],
    pa: &[usize],
    pr: &[usize],
    tau: f64,
) -> Triple {
    let ident: Vec<usize> = (0..ga.len()).collect();
    Triple {
        attract: info_nce(ga, gc, pa, 1.0, tau, false),
        repel: info_nce(la, lc, pr, -1.0, tau, false),
        cross: info_nce(ga, cross_c, &ident, -1.0, tau, false),
    }
}

fn add(acc: &mut Triple, t: Triple, w: f64) {
    acc.attract += w * t.attract;
    acc.repel += w * t.repel;
    acc.cross += w * t.cross;
}

const ZERO: Triple = Triple {
    attract: 0.0,
    repel: 0.0,
    cross: 0.0,
};

pub fn scheme_all(g: &Field, l: &Field, tau: f64) -> Triple {
    let (b, n) = (g.len(), g[0].len());
    let mut gf = Vec::new();
    let mut lf = Vec::new();
    let mut pos = Vec::new();
    for i in 0..b {
        for j in 0..n {
            gf.push(g[i][j].clone());
            lf.push(l[i][j].clone());
            pos.push(((i + 1) % b) * n + j);
        }
    }
    triple(&gf, &gf, &lf, &lf, &lf, &pos, &pos, tau)
}

pub fn scheme_gg(g: &Field, l: &Field, table: &[Vec<f64>], tau: f64) -> Triple {
    let (b, n) = (g.len(), g[0].len());
    let diag: Vec<usize> = (0..n).collect();
    let next: Vec<usize> = (0..n).map(|j| (j + 1) % n).collect();
    let mut acc = ZERO;
    for i in 0..b {
        add(
            &mut acc,
            triple(&g[i], table, &l[i], table, &l[i], &diag, &next, tau),
            1.0 / b as f64,
        );
    }
    acc
}

fn mean_over_instances(x: &Field) -> Vec<Vec<f64>> {
    let (b, n, d) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..b {
        for j in 0..n {
            for k in 0..d {
                out[j][k] += x[i][j][k] / b as f64;
            }
        }
    }
    out
}

fn mean_over_features(x: &Field) -> Vec<Vec<f64>> {
    let (n, d) = (x[0].len(), x[0][0].len());
    x.iter()
        .map(|inst| {
            let mut v = vec![0.0; d];
            for j in 0..n {
                for k in 0..d {
                    v[k] += inst[j][k] / n as f64;
                }
            }
            v
        })
        .collect()
}

pub fn scheme_f(g: &Field, l: &Field, tau: f64) -> Triple {
    let gp = mean_over_instances(g);
    let lp = mean_over_instances(l);
    let n = gp.len();
    let next: Vec<usize> = (0..n).map(|j| (j + 1) % n).collect();
    triple(&gp, &gp, &lp, &lp, &lp, &next, &next, tau)
}

pub fn scheme_s(g: &Field, l: &Field, tau: f64) -> Triple {
    let gp = mean_over_features(g);
    let lp = mean_over_features(l);
    let b = gp.len();
    let next: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
    triple(&gp, &gp, &lp, &lp, &lp, &next, &next, tau)
}

fn leave_one_out(x: &Field, i: usize) -> Vec<Vec<f64>> {
    let (b, n, d) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = vec![vec![0.0; d]; n];
    for other in 0..b {
        if other == i {
            continue;
        }
        for j in 0..n {
            for k in 0..d {
                out[j][k] += x[other][j][k] / (b - 1) as f64;
            }
        }
    }
    out
}

pub fn scheme_fs(g: &Field, l: &Field, tau: f64) -> Triple {
    let (b, n) = (g.len(), g[0].len());
    let diag: Vec<usize> = (0..n).collect();
    let mut acc = ZERO;
    for i in 0..b {
        let gr = leave_one_out(g, i);
        let lr = leave_one_out(l, i);
        add(
            &mut acc,
            triple(&g[i], &gr, &l[i], &lr, &lr, &diag, &diag, tau),
            1.0 / b as f64,
        );
    }
    acc
}

pub fn scheme_sf(g: &Field, l: &Field, tau: f64) -> Triple {
    let (b, n) = (g.len(), g[0].len());
    let next: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
    let mut acc = ZERO;
    for j in 0..n {
        let gj: Vec<Vec<f64>> = (0..b).map(|i| g[i][j].clone()).collect();
        let lj: Vec<Vec<f64>> = (0..b).map(|i| l[i][j].clone()).collect();
        add(
            &mut acc,
            triple(&gj, &gj, &lj, &lj, &lj, &next, &next, tau),
            1.0 / n as f64,
        );
    }
    acc
}

/// Nested `[b][n][d]` view of a flat row-major buffer.
pub fn field(data: &[f64], b: usize, n: usize, d: usize) -> Field {
    (0..b)
        .map(|i| {
            (0..n)
                .map(|j| data[(i * n + j) * d..(i * n + j + 1) * d].to_vec())
                .collect()
        })
        .collect()
}
