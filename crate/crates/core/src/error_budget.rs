//! First-order worst-case error budget of the drill-to-phantom pose chain.
//!
//! The chain is `F_d_p = F_db_d⁻¹ · F_o_db⁻¹ · F_o_pb · F_pb_p`, each link
//! perturbed on the right as `F* = F · ΔF`. The relative error
//! `F_d_p⁻¹ · F_d_p*` is expressed in the phantom frame. To first order every
//! component's twist is carried to that frame by the adjoint of a partial
//! chain `M_i`:
//!
//! | link   | sign | `M_i`                          |
//! |--------|------|--------------------------------|
//! | pb_p   | +    | `I`                            |
//! | o_pb   | +    | `F_pb_p⁻¹`                     |
//! | o_db   | −    | `F_pb_p⁻¹·F_o_pb⁻¹·F_o_db`     |
//! | db_d   | −    | `F_d_p⁻¹`                      |
//!
//! so `α_d_p ≈ Σ s_i R_Mi α_i` and `ε_d_p ≈ Σ s_i (R_Mi ε_i + t_Mi × R_Mi α_i)`.
//! The decomposition is exact as a product of conjugated perturbations, which
//! is why the triangle-inequality bounds hold for finite errors too.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_exp, rotation_log, RigidTransform};
use crate::synth;

pub const COMPONENTS: [&str; 4] = ["pb_p", "o_pb", "o_db", "db_d"];

const SIGNS: [f64; 4] = [1.0, 1.0, -1.0, -1.0];

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("DegenerateMarkers: {0}")]
    DegenerateMarkers(String),
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

impl BudgetError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DegenerateMarkers(_) => "DegenerateMarkers",
            Self::InvalidInput(_) => "InvalidInput",
        }
    }
}

/// Nominal chain links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalChain {
    pub f_pb_p: RigidTransform,
    pub f_o_pb: RigidTransform,
    pub f_o_db: RigidTransform,
    pub f_db_d: RigidTransform,
}

impl NominalChain {
    pub fn identity() -> Self {
        let i = RigidTransform::identity();
        Self { f_pb_p: i, f_o_pb: i, f_o_db: i, f_db_d: i }
    }

    /// Phantom in the drill-tip frame.
    pub fn f_d_p(&self) -> RigidTransform {
        self.f_db_d.inverse().compose(&self.f_o_db.inverse()).compose(&self.f_o_pb).compose(&self.f_pb_p)
    }

    /// Bench-scale geometry: tracker ~1.2 m away, phantom ~200 mm from its
    /// marker base, a ~230 mm drill with its tip ~80 mm from the phantom origin.
    pub fn bench() -> Self {
        let f_o_pb =
            RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), 0.3, Vector3::new(80.0, -40.0, 1150.0));
        let f_pb_p = RigidTransform::from_axis_angle(Vector3::z(), 0.5, Vector3::new(0.0, 150.0, -130.0));
        let f_p_d = RigidTransform::from_axis_angle(Vector3::new(1.0, 0.2, 0.0), 2.4, Vector3::new(20.0, -30.0, 70.0));
        let f_db_d = RigidTransform::from_axis_angle(Vector3::y(), 0.2, Vector3::new(0.0, 0.0, 230.0));
        let f_o_db = f_o_pb.compose(&f_pb_p).compose(&f_p_d).compose(&f_db_d.inverse());
        Self { f_pb_p, f_o_pb, f_o_db, f_db_d }
    }

    fn links(&self) -> [&RigidTransform; 4] {
        [&self.f_pb_p, &self.f_o_pb, &self.f_o_db, &self.f_db_d]
    }

    /// Partial chains `M_i` in the table above.
    pub fn partials(&self) -> [RigidTransform; 4] {
        let pb_p_inv = self.f_pb_p.inverse();
        [
            RigidTransform::identity(),
            pb_p_inv,
            pb_p_inv.compose(&self.f_o_pb.inverse()).compose(&self.f_o_db),
            self.f_d_p().inverse(),
        ]
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        Self {
            f_pb_p: synth::random_transform(rng, max_translation),
            f_o_pb: synth::random_transform(rng, max_translation),
            f_o_db: synth::random_transform(rng, max_translation),
            f_db_d: synth::random_transform(rng, max_translation),
        }
    }
}

/// Worst-case per-link magnitudes plus the nominal chain. Component order is
/// [`COMPONENTS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainErrorSpec {
    pub alpha_deg: [f64; 4],
    pub eps_mm: [f64; 4],
    pub chain: NominalChain,
}

impl ChainErrorSpec {
    pub fn new(alpha_deg: [f64; 4], eps_mm: [f64; 4], chain: NominalChain) -> Result<Self, BudgetError> {
        if alpha_deg.iter().chain(&eps_mm).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(BudgetError::InvalidInput(format!(
                "magnitudes must be finite and ≥ 0: {alpha_deg:?} {eps_mm:?}"
            )));
        }
        Ok(Self { alpha_deg, eps_mm, chain })
    }

    /// Default bench budget: 1° ICP registration, 0.3°/0.4° marker-body
    /// tracking, 1° drill axis; 1 mm registration, 0.08 mm tracking and
    /// 0.5 mm tip calibration.
    pub fn bench() -> Self {
        Self { alpha_deg: [1.0, 0.3, 0.4, 1.0], eps_mm: [1.0, 0.08, 0.08, 0.5], chain: NominalChain::bench() }
    }

    fn alpha_rad(&self) -> [f64; 4] {
        self.alpha_deg.map(|a| a * DEG)
    }
}

/// Rotational weights `W_i = s_i R_Mi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationWeights {
    pub w: [Matrix3<f64>; 4],
}

impl PropagationWeights {
    /// First-order `α_d_p` for per-link rotation errors (rad).
    pub fn propagate(&self, alpha: &[Vector3<f64>; 4]) -> Vector3<f64> {
        self.w.iter().zip(alpha).map(|(w, a)| w * a).sum()
    }
}

pub fn rotation_weights(spec: &ChainErrorSpec) -> PropagationWeights {
    rotation_weights_for(&spec.chain)
}

pub fn rotation_weights_for(chain: &NominalChain) -> PropagationWeights {
    let m = chain.partials();
    PropagationWeights { w: std::array::from_fn(|i| *m[i].rotation() * SIGNS[i]) }
}

/// Plain sum of the four magnitudes (deg): the weights preserve norms, so
/// the triangle inequality bound does not depend on the chain.
pub fn worst_case_rotation_bound(magnitudes_deg: [f64; 4]) -> f64 {
    magnitudes_deg.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TranslationTerm {
    pub sign: f64,
    pub rotation: Matrix3<f64>,
    /// Translation of `M_i` (mm): the lever arm turning rotation error into
    /// translation error.
    pub lever_mm: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslationPropagation {
    pub terms: [TranslationTerm; 4],
    pub worst_case_mm: f64,
}

impl TranslationPropagation {
    /// First-order `ε_d_p` (mm) for per-link errors (rad, mm).
    pub fn evaluate(&self, alpha: &[Vector3<f64>; 4], eps: &[Vector3<f64>; 4]) -> Vector3<f64> {
        self.terms
            .iter()
            .zip(alpha.iter().zip(eps))
            .map(|(t, (a, e))| (t.rotation * e + t.lever_mm.cross(&(t.rotation * a))) * t.sign)
            .sum()
    }
}

fn translation_terms(chain: &NominalChain) -> [TranslationTerm; 4] {
    let m = chain.partials();
    std::array::from_fn(|i| TranslationTerm {
        sign: SIGNS[i],
        rotation: *m[i].rotation(),
        lever_mm: *m[i].translation(),
    })
}

/// Worst-case translation bound `Σ ‖ε_i‖ + ‖t_Mi‖·‖α_i‖` for a chain.
pub fn translation_bound(alpha_deg: &[f64; 4], eps_mm: &[f64; 4], chain: &NominalChain) -> f64 {
    translation_terms(chain).iter().enumerate().map(|(i, t)| eps_mm[i] + t.lever_mm.norm() * alpha_deg[i] * DEG).sum()
}

pub fn translation_propagation(spec: &ChainErrorSpec) -> TranslationPropagation {
    TranslationPropagation {
        terms: translation_terms(&spec.chain),
        worst_case_mm: translation_bound(&spec.alpha_deg, &spec.eps_mm, &spec.chain),
    }
}

/// Exact relative error `F_d_p⁻¹ · F_d_p*` for right-multiplied link errors
/// `ΔF_i = [exp(α_i), ε_i]`.
pub fn composed_error(chain: &NominalChain, alpha: &[Vector3<f64>; 4], eps: &[Vector3<f64>; 4]) -> RigidTransform {
    let links = chain.links();
    let p: [RigidTransform; 4] = std::array::from_fn(|i| {
        let delta = RigidTransform::new(rotation_exp(&alpha[i]), eps[i]).expect("exponential is a rotation");
        links[i].compose(&delta)
    });
    let perturbed = NominalChain { f_pb_p: p[0], f_o_pb: p[1], f_o_db: p[2], f_db_d: p[3] };
    chain.f_d_p().inverse().compose(&perturbed.f_d_p())
}

/// Worst-case rigid-body rotation (deg) when every marker moves at most
/// `marker_rms` mm.
///
/// A small rigid motion is a screw about some axis line; a rotation δθ moves
/// each marker by at least δθ times its distance to that line. The bound is
/// therefore `marker_rms / r` with `r` the radius of the thinnest cylinder
/// enclosing all markers.
pub fn marker_error_to_rotation_bound(marker_rms: f64, markers: &[Vector3<f64>]) -> Result<f64, BudgetError> {
    if !(marker_rms.is_finite() && marker_rms >= 0.0) {
        return Err(BudgetError::InvalidInput(format!("marker error must be ≥ 0, got {marker_rms}")));
    }
    if markers.len() < 3 {
        return Err(BudgetError::DegenerateMarkers(format!("{} markers, need at least 3", markers.len())));
    }
    let r = min_enclosing_cylinder_radius(markers);
    let extent = markers.iter().map(|m| (m - markers[0]).norm()).fold(0.0, f64::max);
    if !(r > 1e-9 * extent.max(1e-12)) {
        return Err(BudgetError::DegenerateMarkers("markers are collinear".into()));
    }
    Ok((marker_rms / r).to_degrees())
}

fn min_enclosing_cylinder_radius(markers: &[Vector3<f64>]) -> f64 {
    let radius_along = |u: &Vector3<f64>| -> f64 {
        let u = u.normalize();
        let a = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = u.cross(&a).normalize();
        let e2 = u.cross(&e1);
        let pts: Vec<(f64, f64)> = markers.iter().map(|m| (m.dot(&e1), m.dot(&e2))).collect();
        min_enclosing_circle(&pts)
    };

    let mut candidates: Vec<Vector3<f64>> = Vec::new();
    for (i, a) in markers.iter().enumerate() {
        for b in &markers[i + 1..] {
            if (b - a).norm() > 0.0 {
                candidates.push(b - a);
            }
        }
    }
    let n = 600;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for k in 0..n {
        let z = 1.0 - (k as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = k as f64 * golden;
        candidates.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
    }
    let mut scored: Vec<(f64, Vector3<f64>)> = candidates.iter().map(|u| (radius_along(u), u.normalize())).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Local pattern search from the best few starts.
    let mut best = scored[0].0;
    for &(r0, u0) in scored.iter().take(5) {
        let (mut r, mut u) = (r0, u0);
        let mut step = 0.05;
        while step > 1e-10 {
            let a = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let e1 = u.cross(&a).normalize();
            let e2 = u.cross(&e1);
            let mut improved = false;
            for d in [e1, -e1, e2, -e2] {
                let v = (u + d * step).normalize();
                let rv = radius_along(&v);
                if rv < r {
                    (r, u) = (rv, v);
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.min(r);
    }
    best
}

/// Radius of the smallest circle containing all points (incremental
/// construction; inputs are a handful of markers).
fn min_enclosing_circle(pts: &[(f64, f64)]) -> f64 {
    type Circle = ((f64, f64), f64);
    let contains = |c: &Circle, p: (f64, f64)| {
        ((p.0 - c.0 .0).powi(2) + (p.1 - c.0 .1).powi(2)).sqrt() <= c.1 * (1.0 + 1e-12) + 1e-12
    };
    let two = |a: (f64, f64), b: (f64, f64)| -> Circle {
        let c = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        (c, ((a.0 - c.0).powi(2) + (a.1 - c.1).powi(2)).sqrt())
    };
    let three = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| -> Circle {
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        if d.abs() < 1e-300 {
            // Collinear: the widest pair.
            let cands = [two(a, b), two(a, c), two(b, c)];
            return cands.into_iter().fold(((0.0, 0.0), -1.0), |m, x| if x.1 > m.1 { x } else { m });
        }
        let (a2, b2, c2) = (a.0 * a.0 + a.1 * a.1, b.0 * b.0 + b.1 * b.1, c.0 * c.0 + c.1 * c.1);
        let ux = (a2 * (b.1 - c.1) + b2 * (c.1 - a.1) + c2 * (a.1 - b.1)) / d;
        let uy = (a2 * (c.0 - b.0) + b2 * (a.0 - c.0) + c2 * (b.0 - a.0)) / d;
        ((ux, uy), ((a.0 - ux).powi(2) + (a.1 - uy).powi(2)).sqrt())
    };
    let mut c: Circle = (pts[0], 0.0);
    for i in 1..pts.len() {
        if contains(&c, pts[i]) {
            continue;
        }
        c = (pts[i], 0.0);
        for j in 0..i {
            if contains(&c, pts[j]) {
                continue;
            }
            c = two(pts[i], pts[j]);
            for k in 0..j {
                if !contains(&c, pts[k]) {
                    c = three(pts[i], pts[j], pts[k]);
                }
            }
        }
    }
    c.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeSampling {
    /// Every draw uses exactly the cap magnitude.
    AtCaps,
    /// Uniform magnitude in `[0, cap]`.
    WithinCaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloOptions {
    pub draws: usize,
    pub seed: u64,
    pub sampling: MagnitudeSampling,
    /// Draw a fresh random nominal chain per sample (translations up to
    /// `random_chain_extent_mm`); otherwise use the nominal chain.
    pub random_chains: bool,
    pub random_chain_extent_mm: f64,
}

impl MonteCarloOptions {
    pub fn new(draws: usize, seed: u64) -> Self {
        Self { draws, seed, sampling: MagnitudeSampling::AtCaps, random_chains: false, random_chain_extent_mm: 300.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Quantiles {
    /// Nearest-rank quantiles.
    fn of(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self { p50: 0.0, p95: 0.0, p99: 0.0, max: 0.0 };
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self { p50: q(0.5), p95: q(0.95), p99: q(0.99), max: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub draws: usize,
    pub seed: u64,
    pub sampling: MagnitudeSampling,
    pub random_chains: bool,
    pub rotation_error_deg: Quantiles,
    pub rotation_violations: usize,
    pub translation_error_mm: Quantiles,
    pub translation_violations: usize,
    /// Largest `propagated / bound` ratio seen for translation.
    pub translation_max_bound_ratio: f64,
    /// Largest gap between first-order and exact rotation error (rad).
    pub max_first_order_gap_rad: f64,
}

struct Draw {
    rot_deg: f64,
    trans_mm: f64,
    trans_bound: f64,
    gap: f64,
}

const CHUNK: usize = 1024;

fn draw_chunk(spec: &ChainErrorSpec, opts: &MonteCarloOptions, chunk: usize) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(chunk as u64);
    let start = chunk * CHUNK;
    let count = CHUNK.min(opts.draws - start);
    let alpha_cap = spec.alpha_rad();
    let fixed_bound = translation_bound(&spec.alpha_deg, &spec.eps_mm, &spec.chain);
    (0..count)
        .map(|_| {
            let chain = if opts.random_chains {
                NominalChain::random(&mut rng, opts.random_chain_extent_mm)
            } else {
                spec.chain
            };
            let scale = |rng: &mut ChaCha8Rng| match opts.sampling {
                MagnitudeSampling::AtCaps => 1.0,
                MagnitudeSampling::WithinCaps => rng.gen_range(0.0..=1.0),
            };
            let alpha: [Vector3<f64>; 4] =
                std::array::from_fn(|i| synth::random_unit(&mut rng) * alpha_cap[i] * scale(&mut rng));
            let eps: [Vector3<f64>; 4] =
                std::array::from_fn(|i| synth::random_unit(&mut rng) * spec.eps_mm[i] * scale(&mut rng));
            let err = composed_error(&chain, &alpha, &eps);
            let exact = rotation_log(err.rotation());
            let predicted = rotation_weights_for(&chain).propagate(&alpha);
            Draw {
                rot_deg: exact.norm().to_degrees(),
                trans_mm: err.translation().norm(),
                trans_bound: if opts.random_chains {
                    translation_bound(&spec.alpha_deg, &spec.eps_mm, &chain)
                } else {
                    fixed_bound
                },
                gap: (exact - predicted).norm(),
            }
        })
        .collect()
}

/// Seeded Monte-Carlo validation of the rotation and translation bounds.
///
/// Draws are split into fixed chunks, each with its own stream of the seeded
/// generator, so the report does not depend on the number of worker threads.
pub fn monte_carlo(spec: &ChainErrorSpec, opts: &MonteCarloOptions) -> MonteCarloReport {
    let chunks: Vec<usize> = (0..opts.draws.div_ceil(CHUNK)).collect();
    #[cfg(feature = "parallel")]
    let draws: Vec<Draw> = {
        use rayon::prelude::*;
        chunks.par_iter().flat_map_iter(|&c| draw_chunk(spec, opts, c)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let draws: Vec<Draw> = chunks.iter().flat_map(|&c| draw_chunk(spec, opts, c)).collect();

    let rot_bound = worst_case_rotation_bound(spec.alpha_deg);
    let rel = 1.0 + 1e-12;
    MonteCarloReport {
        draws: opts.draws,
        seed: opts.seed,
        sampling: opts.sampling,
        random_chains: opts.random_chains,
        rotation_violations: draws.iter().filter(|d| d.rot_deg > rot_bound * rel).count(),
        translation_violations: draws.iter().filter(|d| d.trans_mm > d.trans_bound * rel).count(),
        translation_max_bound_ratio: draws
            .iter()
            .map(|d| if d.trans_bound > 0.0 { d.trans_mm / d.trans_bound } else { 0.0 })
            .fold(0.0, f64::max),
        max_first_order_gap_rad: draws.iter().map(|d| d.gap).fold(0.0, f64::max),
        rotation_error_deg: Quantiles::of(draws.iter().map(|d| d.rot_deg).collect()),
        translation_error_mm: Quantiles::of(draws.iter().map(|d| d.trans_mm).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub name: &'static str,
    pub alpha_deg: f64,
    pub eps_mm: f64,
    /// Rotational weight, row-major.
    pub rotation_weight: [[f64; 3]; 3],
    pub sign: f64,
    pub lever_arm_mm: f64,
    /// Contribution to the translation bound (mm).
    pub translation_contribution_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub components: Vec<ComponentReport>,
    pub rotation_bound_deg: f64,
    pub translation_bound_mm: f64,
    pub monte_carlo: Option<MonteCarloReport>,
}

impl BudgetReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn budget_report(spec: &ChainErrorSpec, mc: Option<&MonteCarloOptions>) -> BudgetReport {
    let weights = rotation_weights(spec);
    let trans = translation_propagation(spec);
    let components = (0..4)
        .map(|i| {
            let w = weights.w[i];
            let lever = trans.terms[i].lever_mm.norm();
            ComponentReport {
                name: COMPONENTS[i],
                alpha_deg: spec.alpha_deg[i],
                eps_mm: spec.eps_mm[i],
                rotation_weight: std::array::from_fn(|r| std::array::from_fn(|c| w[(r, c)])),
                sign: SIGNS[i],
                lever_arm_mm: lever,
                translation_contribution_mm: spec.eps_mm[i] + lever * spec.alpha_deg[i] * DEG,
            }
        })
        .collect();
    BudgetReport {
        components,
        rotation_bound_deg: worst_case_rotation_bound(spec.alpha_deg),
        translation_bound_mm: trans.worst_case_mm,
        monte_carlo: mc.map(|o| monte_carlo(spec, o)),
    }
}
