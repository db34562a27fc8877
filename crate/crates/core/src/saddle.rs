//! Alternating block gradient descent near a strict saddle of a quadratic.
//!
//! For `f(v) = ½ vᵀ H v` with blocks `v = (v₁, v₂)`, one alternating step is
//! `v₁ ← v₁ − η ∇₁f(v₁, v₂)` followed by `v₂ ← v₂ − η ∇₂f(v₁', v₂)`. Writing
//! `H = H_u + H_l` with `H_l` the `(2, 1)` block, the step is the linear map
//! `v ↦ M⁻¹ G v` with `M = I + η H_l` and `G = I − η H_u`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::derive_seed;
use crate::error::{Error, Result};

/// Disjoint, covering, non-empty index blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl Partition {
    pub fn new(first: Vec<usize>, second: Vec<usize>, dim: usize) -> Result<Self> {
        if first.is_empty() || second.is_empty() {
            return Err(Error::Partition("both blocks must be non-empty".into()));
        }
        let mut seen = vec![false; dim];
        for &i in first.iter().chain(&second) {
            match seen.get_mut(i) {
                None => return Err(Error::Partition(format!("index {i} outside dimension {dim}"))),
                Some(true) => return Err(Error::Partition(format!("index {i} appears twice"))),
                Some(s) => *s = true,
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Partition("blocks do not cover every index".into()));
        }
        Ok(Partition { first, second })
    }

    pub fn dim(&self) -> usize {
        self.first.len() + self.second.len()
    }

    /// `block[i]` is 0 or 1.
    fn membership(&self) -> Vec<u8> {
        let mut b = vec![0u8; self.dim()];
        for &i in &self.second {
            b[i] = 1;
        }
        b
    }
}

/// `(H_u, H_l)`: `H_l` holds only the entries with row in the second block
/// and column in the first; `H_u` holds the rest.
pub fn split_hessian(h: &DMatrix<f64>, partition: &Partition) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = h.nrows();
    if h.ncols() != d || partition.dim() != d {
        return Err(Error::Partition(format!(
            "partition of {} indices for a {}x{} matrix",
            partition.dim(),
            d,
            h.ncols()
        )));
    }
    let block = partition.membership();
    let mut hu = h.clone();
    let mut hl = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if block[i] == 1 && block[j] == 0 {
                hl[(i, j)] = h[(i, j)];
                hu[(i, j)] = 0.0;
            }
        }
    }
    Ok((hu, hl))
}

/// `(M, G) = (I + η H_l, I − η H_u)`.
pub fn build_m_g(hu: &DMatrix<f64>, hl: &DMatrix<f64>, eta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let id = DMatrix::identity(hu.nrows(), hu.ncols());
    (&id + hl * eta, &id - hu * eta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Eigenvalues as `(re, im)`.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Largest real part.
    pub lambda_max: f64,
    /// Largest modulus.
    pub radius: f64,
    /// Whether any eigenvalue has a non-negligible imaginary part.
    pub complex: bool,
}

/// Eigenvalues of `M⁻¹ G` by Householder reduction to Hessenberg form and
/// shifted QR iteration.
pub fn max_eigenvalue(m: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Spectrum> {
    let a = m
        .clone()
        .lu()
        .solve(g)
        .ok_or_else(|| Error::Shape("M is singular".into()))?;
    let eigenvalues = eigenvalues(a)?;
    let scale = eigenvalues.iter().map(|(r, i)| r.hypot(*i)).fold(1.0, f64::max);
    let complex = eigenvalues.iter().any(|(_, i)| i.abs() > 1e-10 * scale);
    let lambda_max = eigenvalues.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let radius = eigenvalues.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
    Ok(Spectrum {
        eigenvalues,
        lambda_max,
        radius,
        complex,
    })
}

/// In-place Householder reduction to upper Hessenberg form.
fn hessenberg(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] > 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        // A <- (I - 2vv^T) A on rows k+1..n.
        for j in 0..n {
            let s: f64 = v.iter().enumerate().map(|(r, vr)| vr * a[(k + 1 + r, j)]).sum();
            for (r, vr) in v.iter().enumerate() {
                a[(k + 1 + r, j)] -= 2.0 * vr * s;
            }
        }
        // A <- A (I - 2vv^T) on columns k+1..n.
        for i in 0..n {
            let s: f64 = v.iter().enumerate().map(|(c, vc)| vc * a[(i, k + 1 + c)]).sum();
            for (c, vc) in v.iter().enumerate() {
                a[(i, k + 1 + c)] -= 2.0 * vc * s;
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
}

const MAX_QR_ITERATIONS: usize = 60;

/// Eigenvalues of a general real matrix (Francis double-shift QR on the
/// Hessenberg form).
pub fn eigenvalues(mut a: DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Shape("eigenvalues of a non-square matrix".into()));
    }
    hessenberg(&mut a);
    let mut out = vec![(0.0, 0.0); n];
    let anorm: f64 = (0..n)
        .flat_map(|i| (i.saturating_sub(1)..n).map(move |j| (i, j)))
        .map(|(i, j)| a[(i, j)].abs())
        .sum();
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l > 0 {
                let mut s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() <= f64::EPSILON * s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[(nu, nu)];
            if l == nu {
                out[nu] = (x + t, 0.0);
                nn -= 1;
                break;
            }
            let mut y = a[(nu - 1, nu - 1)];
            let mut w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    let z = p + z.copysign(p);
                    out[nu - 1] = (x + z, 0.0);
                    out[nu] = (if z != 0.0 { x - w / z } else { x + z }, 0.0);
                } else {
                    out[nu] = (x + p, -z);
                    out[nu - 1] = (x + p, z);
                }
                nn -= 2;
                break;
            }
            if its == MAX_QR_ITERATIONS {
                return Err(Error::NoConvergence(its));
            }
            if its > 0 && its % 10 == 0 {
                // Exceptional shift.
                t += x;
                for i in 0..=nu {
                    a[(i, i)] -= x;
                }
                let s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let (mut p, mut q, mut r);
            let mut m = nu - 2;
            loop {
                let z = a[(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[(m + 1, m)] + a[(m, m + 1)];
                q = a[(m + 1, m + 1)] - z - rr - ss;
                r = a[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                if u <= f64::EPSILON * v {
                    break;
                }
                m -= 1;
            }
            for i in m..nu - 1 {
                a[(i + 2, i)] = 0.0;
                if i != m {
                    a[(i + 2, i - 1)] = 0.0;
                }
            }
            for k in m..nu {
                if k != m {
                    p = a[(k, k - 1)];
                    q = a[(k + 1, k - 1)];
                    r = if k + 1 != nu { a[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        a[(k, k - 1)] = -a[(k, k - 1)];
                    }
                } else {
                    a[(k, k - 1)] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in k..=nu {
                    let mut pp = a[(k, j)] + q * a[(k + 1, j)];
                    if k + 1 != nu {
                        pp += r * a[(k + 2, j)];
                        a[(k + 2, j)] -= pp * z;
                    }
                    a[(k + 1, j)] -= pp * y;
                    a[(k, j)] -= pp * x;
                }
                let mmin = nu.min(k + 3);
                for i in l..=mmin {
                    let mut pp = x * a[(i, k)] + y * a[(i, k + 1)];
                    if k + 1 != nu {
                        pp += z * a[(i, k + 2)];
                        a[(i, k + 2)] -= pp * r;
                    }
                    a[(i, k + 1)] -= pp * q;
                    a[(i, k)] -= pp;
                }
            }
        }
    }
    Ok(out)
}

/// A quadratic `½ vᵀ H v` around the stationary point `v* = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticSaddle {
    pub h: DMatrix<f64>,
    pub partition: Partition,
    pub eta: f64,
    /// Curvature parameter: a strict saddle has `λ_min(H) ≤ −γ_c`.
    pub gamma_c: f64,
    /// Spectral norm of `H`.
    pub c: f64,
    /// Largest spectral norm of the diagonal blocks.
    pub l_max: f64,
}

fn spectral_norm(h: &DMatrix<f64>) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(h.clone())
        .eigenvalues
        .iter()
        .fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn sub_block(h: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])])
}

impl QuadraticSaddle {
    pub fn new(h: DMatrix<f64>, partition: Partition, eta: f64, gamma_c: f64) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() != partition.dim() {
            return Err(Error::Partition("matrix and partition sizes differ".into()));
        }
        if h != h.transpose() {
            return Err(Error::Shape("H is not symmetric".into()));
        }
        if eta.is_nan() || eta <= 0.0 {
            return Err(Error::Config(format!("eta must be positive, got {eta}")));
        }
        let c = spectral_norm(&h);
        let l_max =
            spectral_norm(&sub_block(&h, &partition.first)).max(spectral_norm(&sub_block(&h, &partition.second)));
        Ok(QuadraticSaddle {
            h,
            partition,
            eta,
            gamma_c,
            c,
            l_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn lambda_min(&self) -> f64 {
        SymmetricEigen::new(self.h.clone())
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn is_strict_saddle(&self) -> bool {
        self.lambda_min() <= -self.gamma_c
    }

    pub fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (hu, hl) = split_hessian(&self.h, &self.partition)?;
        Ok(build_m_g(&hu, &hl, self.eta))
    }

    pub fn spectrum(&self) -> Result<Spectrum> {
        let (m, g) = self.matrices()?;
        max_eigenvalue(&m, &g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConclusionReport {
    pub lambda_max: f64,
    /// `1 + η γ_c / (1 + C / L_max)`.
    pub rhs: f64,
    pub margin: f64,
    pub complex: bool,
}

impl ConclusionReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.margin >= -tolerance
    }
}

pub fn check_conclusion1(inst: &QuadraticSaddle) -> Result<ConclusionReport> {
    let spec = inst.spectrum()?;
    let rhs = 1.0 + inst.eta * inst.gamma_c / (1.0 + inst.c / inst.l_max);
    Ok(ConclusionReport {
        lambda_max: spec.lambda_max,
        rhs,
        margin: spec.lambda_max - rhs,
        complex: spec.complex,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgdTrace {
    pub iterates: Vec<DVector<f64>>,
    /// `‖vᵏ − v*‖` for every iterate, starting with `v⁰`.
    pub distances: Vec<f64>,
    /// Blocks in update order within one step.
    pub order: [usize; 2],
    pub overflow: bool,
}

/// One alternating step: the first block, then the second using the
/// refreshed first block.
pub fn agd_step(h: &DMatrix<f64>, partition: &Partition, eta: f64, v: &mut DVector<f64>) {
    for block in [&partition.first, &partition.second] {
        let grads: Vec<f64> = block.iter().map(|&i| h.row(i).dot(&v.transpose())).collect();
        for (&i, g) in block.iter().zip(grads) {
            v[i] -= eta * g;
        }
    }
}

/// `horizon` alternating steps from `v0`; stops early on overflow.
pub fn agd_simulate(inst: &QuadraticSaddle, v0: &DVector<f64>, horizon: usize) -> AgdTrace {
    let mut v = v0.clone();
    let mut iterates = vec![v.clone()];
    let mut distances = vec![v.norm()];
    let mut overflow = false;
    for _ in 0..horizon {
        agd_step(&inst.h, &inst.partition, inst.eta, &mut v);
        let d = v.norm();
        if !d.is_finite() {
            overflow = true;
            break;
        }
        iterates.push(v.clone());
        distances.push(d);
    }
    AgdTrace {
        iterates,
        distances,
        order: [1, 2],
        overflow,
    }
}

/// Whether the iterates leave the ball of radius `radius` within `horizon`
/// steps, and the step at which they do.
pub fn escapes(inst: &QuadraticSaddle, v0: &DVector<f64>, horizon: usize, radius: f64) -> (bool, usize) {
    let mut v = v0.clone();
    for k in 1..=horizon {
        agd_step(&inst.h, &inst.partition, inst.eta, &mut v);
        let d = v.norm();
        if !d.is_finite() || d >= radius {
            return (true, k);
        }
    }
    (false, horizon)
}

/// Asymptotic per-step growth factor of `‖v‖`: the iterate is renormalized
/// every step and the last `window` log-growths are averaged.
pub fn growth_ratio(inst: &QuadraticSaddle, v0: &DVector<f64>, steps: usize, window: usize) -> f64 {
    let mut v = v0.normalize();
    let mut logs = Vec::with_capacity(steps);
    for _ in 0..steps {
        agd_step(&inst.h, &inst.partition, inst.eta, &mut v);
        let n = v.norm();
        logs.push(n.ln());
        v /= n;
    }
    let w = window.min(logs.len()).max(1);
    (logs[logs.len() - w..].iter().sum::<f64>() / w as f64).exp()
}

/// Random instance settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub instances: usize,
    pub dim_min: usize,
    pub dim_max: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// `η` is drawn uniformly from `(eta_min_frac / C, 1 / C]`.
    pub eta_min_frac: f64,
    /// Positive-definite control instances added to the sweep.
    pub controls: usize,
    pub starts: usize,
    pub start_radius: f64,
    pub escape_radius: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            instances: 100,
            dim_min: 2,
            dim_max: 10,
            gamma_min: 0.1,
            gamma_max: 1.0,
            eta_min_frac: 0.1,
            controls: 10,
            starts: 10,
            start_radius: 1e-3,
            escape_radius: 1.0,
            horizon: 50_000,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim_min >= 2
            && self.dim_max >= self.dim_min
            && self.gamma_min > 0.0
            && self.gamma_max >= self.gamma_min
            && self.eta_min_frac > 0.0
            && self.eta_min_frac <= 1.0
            && self.start_radius > 0.0
            && self.escape_radius > self.start_radius;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid saddle sweep settings {self:?}")))
        }
    }
}

fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    a.qr().q()
}

fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    (&h + h.transpose()) * 0.5
}

/// `H = Q Λ Qᵀ` with `λ_min = −γ_c (1 + u)`, `u ∈ [0, 1)`, and the other
/// eigenvalues uniform in `[−2, 2]`; random non-trivial partition; `η` in
/// `(eta_min_frac / C, 1 / C]`.
pub fn random_saddle(cfg: &SweepConfig, rng: &mut impl Rng) -> Result<QuadraticSaddle> {
    let d = rng.random_range(cfg.dim_min..=cfg.dim_max);
    let gamma_c = rng.random_range(cfg.gamma_min..=cfg.gamma_max);
    let mut lambda: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect();
    lambda[0] = -gamma_c * (1.0 + rng.random::<f64>());
    build_instance(d, &lambda, gamma_c, cfg, rng)
}

/// Positive-definite control: eigenvalues uniform in `[0.1, 2]`.
pub fn random_control(cfg: &SweepConfig, rng: &mut impl Rng) -> Result<QuadraticSaddle> {
    let d = rng.random_range(cfg.dim_min..=cfg.dim_max);
    let gamma_c = rng.random_range(cfg.gamma_min..=cfg.gamma_max);
    let lambda: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..=2.0)).collect();
    build_instance(d, &lambda, gamma_c, cfg, rng)
}

fn build_instance(
    d: usize,
    lambda: &[f64],
    gamma_c: f64,
    cfg: &SweepConfig,
    rng: &mut impl Rng,
) -> Result<QuadraticSaddle> {
    let q = random_orthogonal(d, rng);
    let h = symmetrize(&q * DMatrix::from_diagonal(&DVector::from_column_slice(lambda)) * q.transpose());
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(rng);
    let cut = rng.random_range(1..d);
    let mut first = idx[..cut].to_vec();
    let mut second = idx[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    let partition = Partition::new(first, second, d)?;
    let c = spectral_norm(&h);
    let u: f64 = rng.random();
    let eta = (cfg.eta_min_frac + (1.0 - cfg.eta_min_frac) * (1.0 - u)) / c;
    QuadraticSaddle::new(h, partition, eta, gamma_c)
}

fn random_start(d: usize, radius: f64, rng: &mut impl Rng) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    v.normalize() * radius
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub dim: usize,
    pub eta: f64,
    pub gamma_c: f64,
    pub c: f64,
    pub l_max: f64,
    pub lambda_max: f64,
    pub rhs: f64,
    pub margin: f64,
    /// Fraction of random starts that escaped.
    pub escaped: f64,
    pub saddle: bool,
    pub complex: bool,
    pub growth_ratio: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub saddles: usize,
    pub passed: usize,
    pub min_margin: f64,
    /// Escaped starts over all starts on strict-saddle instances.
    pub escape_rate: f64,
    /// Largest `|growth / radius − 1|` over strict-saddle instances.
    pub worst_growth_error: f64,
    pub complex_instances: usize,
    pub controls_contracting: usize,
}

pub const MARGIN_TOLERANCE: f64 = 1e-10;

/// Runs the random sweep: strict-saddle instances followed by the
/// positive-definite controls, each from its own derived seed.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.instances + cfg.controls);
    let mut controls_contracting = 0;
    let (mut escaped_total, mut starts_total) = (0usize, 0usize);
    for k in 0..cfg.instances + cfg.controls {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64));
        let inst = if k < cfg.instances {
            random_saddle(cfg, &mut rng)?
        } else {
            random_control(cfg, &mut rng)?
        };
        let report = check_conclusion1(&inst)?;
        let spec = inst.spectrum()?;
        let saddle = inst.is_strict_saddle();
        let mut escaped = 0;
        for _ in 0..cfg.starts {
            let v0 = random_start(inst.dim(), cfg.start_radius, &mut rng);
            if escapes(&inst, &v0, cfg.horizon, cfg.escape_radius).0 {
                escaped += 1;
            }
            if !saddle {
                let trace = agd_simulate(&inst, &v0, 200);
                if trace.distances.windows(2).all(|w| w[1] <= w[0]) {
                    controls_contracting += 1;
                }
            }
        }
        if saddle {
            escaped_total += escaped;
            starts_total += cfg.starts;
        }
        let v0 = random_start(inst.dim(), 1.0, &mut rng);
        let growth = growth_ratio(&inst, &v0, 5_000, 500);
        rows.push(SweepRow {
            dim: inst.dim(),
            eta: inst.eta,
            gamma_c: inst.gamma_c,
            c: inst.c,
            l_max: inst.l_max,
            lambda_max: report.lambda_max,
            rhs: report.rhs,
            margin: report.margin,
            escaped: if cfg.starts == 0 {
                0.0
            } else {
                escaped as f64 / cfg.starts as f64
            },
            saddle,
            complex: report.complex,
            growth_ratio: growth,
            radius: spec.radius,
        });
    }
    let saddle_rows = || rows.iter().filter(|r| r.saddle);
    let summary = SweepSummary {
        saddles: saddle_rows().count(),
        passed: saddle_rows().filter(|r| r.margin >= -MARGIN_TOLERANCE).count(),
        min_margin: saddle_rows().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        escape_rate: if starts_total == 0 {
            0.0
        } else {
            escaped_total as f64 / starts_total as f64
        },
        worst_growth_error: saddle_rows()
            .map(|r| (r.growth_ratio / r.radius - 1.0).abs())
            .fold(0.0, f64::max),
        complex_instances: saddle_rows().filter(|r| r.complex).count(),
        controls_contracting,
        rows,
    };
    Ok(summary)
}

impl SweepSummary {
    pub const HEADER: &'static str = "dim,eta,gamma_c,C,Lmax,lambda_max,rhs_bound,margin,escaped";

    /// Strict-saddle rows only; controls are excluded from the statistics.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in self.rows.iter().filter(|r| r.saddle) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.dim, r.eta, r.gamma_c, r.c, r.l_max, r.lambda_max, r.rhs, r.margin, r.escaped
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_two_by_two() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let p = Partition::new(vec![0], vec![1], 2).unwrap();
        let (hu, hl) = split_hessian(&h, &p).unwrap();
        assert_eq!(hl, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]));
        assert_eq!(hu, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]));
        assert_eq!(&hu + &hl, h);
    }

    #[test]
    fn diagonal_matrix_has_no_lower_block() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0, 3.0]));
        let p = Partition::new(vec![2], vec![0, 1], 3).unwrap();
        let (hu, hl) = split_hessian(&h, &p).unwrap();
        assert_eq!(hl, DMatrix::zeros(3, 3));
        assert_eq!(hu, h);
        let (m, _) = build_m_g(&hu, &hl, 0.3);
        assert_eq!(m, DMatrix::identity(3, 3));
    }

    #[test]
    fn invalid_partitions_are_rejected() {
        assert!(Partition::new(vec![0, 1], vec![1], 2).is_err());
        assert!(Partition::new(vec![0], vec![2], 3).is_err());
        assert!(Partition::new(vec![], vec![0, 1], 2).is_err());
        assert!(Partition::new(vec![0], vec![5], 2).is_err());
    }

    #[test]
    fn zero_step_gives_identities() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0]);
        let p = Partition::new(vec![0], vec![1], 2).unwrap();
        let (hu, hl) = split_hessian(&h, &p).unwrap();
        let (m, g) = build_m_g(&hu, &hl, 0.0);
        assert_eq!(m, DMatrix::identity(2, 2));
        assert_eq!(g, DMatrix::identity(2, 2));
    }

    #[test]
    fn eigenvalues_of_known_matrices() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5]);
        let mut e: Vec<f64> = eigenvalues(a).unwrap().iter().map(|x| x.0).collect();
        e.sort_by(f64::total_cmp);
        assert_eq!(e, vec![-1.0, 0.5, 2.0]);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = eigenvalues(rot).unwrap();
        assert!(e.iter().all(|(r, i)| r.abs() < 1e-15 && (i.abs() - 1.0).abs() < 1e-15));
        let comp = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 0.0, -24.0, 1.0, 0.0, 0.0, 50.0, 0.0, 1.0, 0.0, -35.0, 0.0, 0.0, 1.0, 10.0,
            ],
        );
        let mut e: Vec<f64> = eigenvalues(comp).unwrap().iter().map(|x| x.0).collect();
        e.sort_by(f64::total_cmp);
        for (a, b) in e.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-9, "{e:?}");
        }
    }

    #[test]
    fn decoupled_saddle_eigenvalue() {
        let (gamma_c, mu, eta) = (0.5, 1.5, 0.4);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-gamma_c, mu]));
        let inst = QuadraticSaddle::new(h, Partition::new(vec![0], vec![1], 2).unwrap(), eta, gamma_c).unwrap();
        let r = check_conclusion1(&inst).unwrap();
        assert!((r.lambda_max - (1.0 + eta * gamma_c)).abs() < 1e-15);
        assert!(r.margin > 0.0 && !r.complex);
    }

    #[test]
    fn stationary_point_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_saddle(&SweepConfig::default(), &mut rng).unwrap();
        let t = agd_simulate(&inst, &DVector::zeros(inst.dim()), 50);
        assert!(t.distances.iter().all(|&d| d == 0.0));
        assert_eq!(t.order, [1, 2]);
    }

    #[test]
    fn agd_step_is_the_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_saddle(&SweepConfig::default(), &mut rng).unwrap();
        let (m, g) = inst.matrices().unwrap();
        let a = m.lu().solve(&g).unwrap();
        let v0 = random_start(inst.dim(), 1.0, &mut rng);
        let mut v = v0.clone();
        agd_step(&inst.h, &inst.partition, inst.eta, &mut v);
        assert!((v - &a * v0).norm() < 1e-13);
    }
}
