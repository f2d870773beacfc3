//! Directional analysis of the reduced loss along the homotopies
//! `s -> (1 - s) mu + s (R # mu°)`.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::activation::Activation;
use crate::ensemble::{mix, rotate_pushforward, Ensemble, Rotation};
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::objective::{CovPack, Problem};

fn require_square(pack: &CovPack) -> Result<usize> {
    if pack.k() != pack.k_teacher() {
        return Err(Error::DimensionMismatch {
            context: "landscape probes need matching teacher and model dimension",
            expected: pack.k_teacher(),
            got: pack.k(),
        });
    }
    Ok(pack.k())
}

fn require_rotation(rotation: &Rotation, k: usize) -> Result<()> {
    if rotation.matrix().shape() != (k, k) {
        return Err(Error::DimensionMismatch {
            context: "rotation size",
            expected: k,
            got: rotation.matrix().nrows(),
        });
    }
    Ok(())
}

/// `d/ds L` at `s = 0`: `-2 tr(R L_mat B)`.
pub fn first_order_slope(pack: &CovPack, rotation: &Rotation) -> Result<f64> {
    let k = require_square(pack)?;
    require_rotation(rotation, k)?;
    Ok(-2.0 * linalg::trace_of_product(rotation.matrix(), &(&pack.l_mat * &pack.b)))
}

/// Rotation of steepest first-order descent and its slope `-2 ||L_mat B||_*`.
///
/// With `L_mat B = U D V^T` the maximizer of `tr(R L_mat B)` over the unit
/// spectral ball is `R = V U^T`. Ties among singular values are broken by the
/// SVD's own basis choice.
pub fn steepest_rotation(pack: &CovPack) -> Result<(Rotation, f64)> {
    require_square(pack)?;
    let lb = &pack.l_mat * &pack.b;
    let (u, s, v) = linalg::svd(&lb);
    let r = &v * u.transpose();
    let slope = -2.0 * s.iter().sum::<f64>();
    Ok((Rotation::new(r)?, slope))
}

/// `R = V U^T` from the SVD `B = U D V^T`, which makes `B R` symmetric PSD.
pub fn symmetrizing_rotation(pack: &CovPack) -> Result<Rotation> {
    require_square(pack)?;
    let (u, _, v) = linalg::svd(&pack.b);
    Rotation::new(&v * u.transpose())
}

/// `d^2/ds^2 L` at `s = 0`:
/// `-4 tr(L^2 R^T S^{-1} R) + 2 tr(L (2 B R + R^T B^T - 2 I) B R)`.
pub fn second_order_curvature(pack: &CovPack, rotation: &Rotation) -> Result<f64> {
    let k = require_square(pack)?;
    require_rotation(rotation, k)?;
    let r = rotation.matrix();
    let l = &pack.l_mat;
    let br = &pack.b * r;
    let first = -4.0 * linalg::trace_of_product(&(l * l), &(r.transpose() * &pack.w_opt * r));
    let inner = &br * 2.0 + br.transpose() - DMatrix::identity(k, k) * 2.0;
    let second = 2.0 * linalg::trace_of_product(&(l * inner), &br);
    Ok(first + second)
}

/// Reduced loss along the homotopy at each `s` of the grid.
pub fn homotopy_scan(problem: &Problem, mu: &Ensemble, rotation: &Rotation, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let target = rotate_pushforward(problem.teacher(), rotation)?;
    grid.iter()
        .map(|&s| Ok((s, problem.reduced_loss(&mix(mu, &target, s)?)?.loss)))
        .collect()
}

/// Position of a loss value relative to the accelerated-convergence band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Below,
    Accel,
    Decel,
    Above,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Below => "below_band",
            Band::Accel => "accel_band",
            Band::Decel => "decel_band",
            Band::Above => "above_band",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandReport {
    pub band: Band,
    pub r_lo: f64,
    /// Lower and upper ends of the interval on which a slope of at most
    /// `-delta` is guaranteed.
    pub accel_lo: f64,
    pub accel_hi: f64,
    /// `delta > r_lo^2 / (4 R1^2)`: the interval is empty.
    pub vacuous: bool,
    pub guarantee: bool,
}

pub fn band_check(loss: f64, r_lo: f64, delta: f64, act: Activation) -> BandReport {
    let r1 = act.r1();
    let disc = r_lo * r_lo - 4.0 * r1 * r1 * delta;
    let vacuous = disc < 0.0;
    let root = if vacuous { 0.0 } else { math::sqrt(disc) };
    let accel_lo = (r_lo - root) / 4.0;
    let accel_hi = (r_lo + root) / 4.0;
    let band = if loss <= 0.0 || loss < accel_lo {
        Band::Below
    } else if loss <= accel_hi && !vacuous {
        Band::Accel
    } else if loss <= r_lo / 2.0 {
        Band::Decel
    } else {
        Band::Above
    };
    BandReport {
        band,
        r_lo,
        accel_lo,
        accel_hi,
        vacuous,
        guarantee: band == Band::Accel,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub loss: f64,
    pub slope: f64,
    pub curvature: f64,
    pub rotation: Rotation,
    pub band: BandReport,
    /// `||L_mat B||_*`.
    pub nuclear_norm: f64,
    /// Slope and curvature along the symmetrizing rotation.
    pub sym_slope: f64,
    pub sym_curvature: f64,
}

/// Runs every probe at `mu`, using the steepest rotation for the headline
/// slope and curvature.
pub fn probe(problem: &Problem, mu: &Ensemble, delta: f64) -> Result<ProbeReport> {
    let pack = problem.reduced_loss(mu)?;
    let (rotation, slope) = steepest_rotation(&pack)?;
    let curvature = second_order_curvature(&pack, &rotation)?;
    let sym = symmetrizing_rotation(&pack)?;
    Ok(ProbeReport {
        loss: pack.loss,
        slope,
        curvature,
        band: band_check(pack.loss, pack.r_lo, delta, problem.act()),
        nuclear_norm: linalg::nuclear_norm(&(&pack.l_mat * &pack.b)),
        sym_slope: first_order_slope(&pack, &sym)?,
        sym_curvature: second_order_curvature(&pack, &sym)?,
        rotation,
    })
}
