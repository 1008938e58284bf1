//! Executable checks of the 2:4 error bounds.
//!
//! For `ŵ = S(w)` with angle `θ` between `w` and `ŵ`:
//!
//! * `‖w‖² sin²θ ≤ ‖w − ŵ‖² ≤ 2‖w‖²(1 − cos θ)` (any N:M, since pruning
//!   never increases the norm),
//! * `cos θ ≥ 1/√2` for 2:4, because every 2:4 block keeps at least half of
//!   its energy,
//! * `U − L = ‖w‖²(1 − cos θ)²`, so the gap closes like `θ⁴`.
//!
//! Only pure sparsification is asserted. Composing quantization after
//! pruning can push `‖ŵ‖` above `‖w‖`, so that case is measured and
//! reported instead.

use std::f64::consts::FRAC_1_SQRT_2;

use thiserror::Error;

use crate::exec::Execution;
use crate::quantizer::{quantize, QuantSpec};
use crate::sparsifier::{sparsify, SparsityError, SparsitySpec};
use crate::tensor::{Matrix, Rng, TensorError};

/// Relative slack (scaled by `‖w‖²`) for comparing quantities that are
/// equal in exact arithmetic.
pub const BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("bound check needs a nonzero vector")]
    ZeroVector,
    #[error("theta {0} outside [0, pi/2]")]
    Theta(f64),
    #[error("bound violated: {0}")]
    Violation(String),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub theta: f64,
    pub cos_theta: f64,
    pub norm_sq: f64,
    /// `E(θ) = ‖w − ŵ‖²`.
    pub error_sq: f64,
    /// `L(θ) = ‖w‖² sin²θ`.
    pub lower: f64,
    /// `U(θ) = 2‖w‖²(1 − cos θ)`.
    pub upper: f64,
}

impl BoundCheck {
    fn from_pair(w: &[f64], what: &[f64]) -> Result<Self, BoundsError> {
        let (mut dot, mut nw, mut nh, mut err) = (0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in w.iter().zip(what) {
            dot += a * b;
            nw += a * a;
            nh += b * b;
            err += (a - b) * (a - b);
        }
        if nw == 0.0 {
            return Err(BoundsError::ZeroVector);
        }
        let cos = if nh == 0.0 {
            0.0
        } else {
            (dot / (nw * nh).sqrt()).clamp(-1.0, 1.0)
        };
        Ok(Self {
            theta: cos.acos(),
            cos_theta: cos,
            norm_sq: nw,
            error_sq: err,
            lower: nw * one_minus_sq(cos),
            upper: 2.0 * nw * (1.0 - cos),
        })
    }

    pub fn lower_holds(&self) -> bool {
        self.lower <= self.error_sq + BOUND_TOL * self.norm_sq
    }

    pub fn upper_holds(&self) -> bool {
        self.error_sq <= self.upper + BOUND_TOL * self.norm_sq
    }

    pub fn angle_holds(&self) -> bool {
        self.cos_theta >= FRAC_1_SQRT_2 - BOUND_TOL
    }

    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }

    /// `theta,error_sq,lower,upper,gap`, normalized by `‖w‖²`.
    pub fn csv_row(&self) -> String {
        let n = self.norm_sq;
        format!(
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.theta,
            self.error_sq / n,
            self.lower / n,
            self.upper / n,
            self.gap() / n
        )
    }
}

pub const BOUNDS_CSV_HEADER: &str = "theta,error_sq,lower,upper,gap";

fn is_two_four(spec: &SparsitySpec) -> bool {
    spec.n() == 2 && spec.m() == 4
}

fn sparsify_vector(w: &[f64], spec: &SparsitySpec) -> Result<Vec<f64>, BoundsError> {
    let col = Matrix::column_vector(w)?;
    let spec = spec.with_axis(crate::tensor::BlockAxis::InputDim);
    Ok(sparsify(&col, &spec)?.values.into_data())
}

/// Sparsifies `w`, computes θ and the bound quantities, and fails if (A) or,
/// for 2:4, the 45° constraint does not hold.
pub fn check_bounds(w: &[f64], spec: &SparsitySpec) -> Result<BoundCheck, BoundsError> {
    let what = sparsify_vector(w, spec)?;
    let check = BoundCheck::from_pair(w, &what)?;
    if !check.lower_holds() {
        return Err(BoundsError::Violation(format!(
            "lower bound {} > error {}",
            check.lower, check.error_sq
        )));
    }
    if !check.upper_holds() {
        return Err(BoundsError::Violation(format!(
            "error {} > upper bound {}",
            check.error_sq, check.upper
        )));
    }
    if is_two_four(spec) && !check.angle_holds() {
        return Err(BoundsError::Violation(format!(
            "cos theta {} < 1/sqrt(2)",
            check.cos_theta
        )));
    }
    Ok(check)
}

/// Sparsify-then-quantize measurement; bounds are reported, not enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposedCheck {
    pub check: BoundCheck,
    pub lower_holds: bool,
    pub upper_holds: bool,
    pub compressed_norm_exceeds: bool,
}

pub fn measure_composed(w: &[f64], sspec: &SparsitySpec, qspec: &QuantSpec) -> Result<ComposedCheck, BoundsError> {
    let sparse = sparsify_vector(w, sspec)?;
    let q = quantize(&Matrix::column_vector(&sparse)?, qspec).values;
    let check = BoundCheck::from_pair(w, q.data())?;
    let nw: f64 = w.iter().map(|v| v * v).sum();
    Ok(ComposedCheck {
        check,
        lower_holds: check.lower_holds(),
        upper_holds: check.upper_holds(),
        compressed_norm_exceeds: q.frobenius_sq() > nw,
    })
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double value `hi + lo`.
#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        Self { hi, lo }
    }

    fn sub(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, -o.hi);
        Dd::new(s, e + self.lo - o.lo)
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `1 − c²` without cancellation in the final subtraction.
fn one_minus_sq(c: f64) -> f64 {
    let (p, e) = two_prod(c, c);
    Dd::new(1.0, 0.0).sub(Dd::new(p, e)).value()
}

/// `U − L` for a vector of squared norm `norm_sq` at angle `theta`,
/// checked against `norm_sq · (1 − cos θ)²`.
///
/// Both bounds are formed in double-double arithmetic from the same
/// `c = cos θ`, so their difference keeps full relative precision even as
/// `θ → 0`.
pub fn gap_identity(norm_sq: f64, theta: f64) -> Result<f64, BoundsError> {
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&theta) {
        return Err(BoundsError::Theta(theta));
    }
    let c = theta.cos();
    let (omc, omc_err) = two_sum(1.0, -c);
    let upper = Dd::new(2.0 * omc, 2.0 * omc_err);
    let (p, e) = two_prod(c, c);
    let lower = Dd::new(1.0, 0.0).sub(Dd::new(p, e));
    let gap = norm_sq * upper.sub(lower).value();

    let closed = norm_sq * (1.0 - c) * (1.0 - c);
    let scale = gap.abs().max(closed.abs());
    if scale > 0.0 && (gap - closed).abs() > 1e-12 * scale {
        return Err(BoundsError::Violation(format!(
            "U-L = {gap} but |w|^2 (1-cos)^2 = {closed}"
        )));
    }
    Ok(gap)
}

/// Distance in units in the last place between two finite doubles of the
/// same sign.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// Least-squares slope of `log(gap)` against `log(θ)` over a log-spaced grid.
pub fn fit_gap_slope(theta_lo: f64, theta_hi: f64, points: usize) -> Result<f64, BoundsError> {
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for i in 0..points {
        let t = (theta_lo.ln() + (theta_hi.ln() - theta_lo.ln()) * i as f64 / (points - 1) as f64).exp();
        xs.push(t.ln());
        ys.push(gap_identity(1.0, t)?.ln());
    }
    Ok(least_squares_slope(&xs, &ys))
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRatio {
    pub ratio: f64,
    pub degenerate: bool,
}

/// `‖S(w)‖² / ‖w‖²`; at least 1/2 for 2:4.
pub fn energy_ratio(w: &[f64], spec: &SparsitySpec) -> Result<EnergyRatio, BoundsError> {
    let nw: f64 = w.iter().map(|v| v * v).sum();
    if nw == 0.0 {
        return Ok(EnergyRatio {
            ratio: 1.0,
            degenerate: true,
        });
    }
    let what = sparsify_vector(w, spec)?;
    let ratio = what.iter().map(|v| v * v).sum::<f64>() / nw;
    if is_two_four(spec) && ratio < 0.5 - BOUND_TOL {
        return Err(BoundsError::Violation(format!("2:4 energy ratio {ratio} < 1/2")));
    }
    Ok(EnergyRatio {
        ratio,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorDist {
    Gaussian,
    Uniform,
    /// Standard Cauchy via the ratio of two Gaussians.
    HeavyTailed,
}

impl VectorDist {
    pub const ALL: [VectorDist; 3] = [VectorDist::Gaussian, VectorDist::Uniform, VectorDist::HeavyTailed];

    pub fn sample(self, rng: &mut Rng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = match self {
                VectorDist::Gaussian => rng.gaussian(),
                VectorDist::Uniform => rng.uniform_range(-1.0, 1.0),
                VectorDist::HeavyTailed => {
                    let num = rng.gaussian();
                    let den = rng.gaussian();
                    if den == 0.0 {
                        num
                    } else {
                        num / den
                    }
                }
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub checks: Vec<BoundCheck>,
    pub violations: Vec<String>,
    pub min_cos: f64,
    pub min_energy_ratio: f64,
    pub degenerate: usize,
}

impl CampaignSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BOUNDS_CSV_HEADER);
        out.push('\n');
        for c in &self.checks {
            out.push_str(&c.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Runs `count` seeded vectors of length `len` through [`check_bounds`] and
/// [`energy_ratio`]. Vector `i` draws from `rng.fork(i)`, so the outcome does
/// not depend on how the work is scheduled.
pub fn campaign(
    seed: u64,
    count: usize,
    len: usize,
    dist: VectorDist,
    spec: &SparsitySpec,
    exec: Execution,
) -> CampaignSummary {
    let root = Rng::new(seed);
    let results = exec.map_range(count, |i| {
        let mut rng = root.fork(i as u64);
        let mut w = vec![0.0; len];
        dist.sample(&mut rng, &mut w);
        let check = check_bounds(&w, spec);
        let energy = energy_ratio(&w, spec);
        (i, check, energy)
    });
    let mut summary = CampaignSummary {
        checks: Vec::with_capacity(count),
        violations: Vec::new(),
        min_cos: f64::INFINITY,
        min_energy_ratio: f64::INFINITY,
        degenerate: 0,
    };
    for (i, check, energy) in results {
        match check {
            Ok(c) => {
                summary.min_cos = summary.min_cos.min(c.cos_theta);
                summary.checks.push(c);
            }
            Err(BoundsError::ZeroVector) => summary.degenerate += 1,
            Err(e) => summary.violations.push(format!("vector {i}: {e}")),
        }
        match energy {
            Ok(e) if e.degenerate => {}
            Ok(e) => summary.min_energy_ratio = summary.min_energy_ratio.min(e.ratio),
            Err(e) => summary.violations.push(format!("vector {i}: {e}")),
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::QuantSpec;

    #[test]
    fn fixed_point_has_zero_error() {
        let c = check_bounds(&[0.0, 3.0, 0.0, -1.0], &SparsitySpec::two_four()).unwrap();
        assert_eq!(c.theta, 0.0);
        assert_eq!((c.error_sq, c.lower, c.upper), (0.0, 0.0, 0.0));
    }

    #[test]
    fn worst_case_block() {
        let c = check_bounds(&[1.0; 4], &SparsitySpec::two_four()).unwrap();
        assert!((c.cos_theta - FRAC_1_SQRT_2).abs() <= 1e-12);
        assert_eq!(c.error_sq, 2.0);
        assert!((c.lower - 2.0).abs() < 1e-12);
        assert!((c.upper - 8.0 * (1.0 - FRAC_1_SQRT_2)).abs() < 1e-12);

        let c = check_bounds(&[-2.5, 2.5, 2.5, -2.5], &SparsitySpec::two_four()).unwrap();
        assert!((c.cos_theta - FRAC_1_SQRT_2).abs() <= 1e-12);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_identity(3.0, 0.0).unwrap(), 0.0);
        let g = gap_identity(1.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        assert!(gap_identity(1.0, 2.0).is_err());
    }

    #[test]
    fn gap_slope_is_quartic() {
        let slope = fit_gap_slope(1e-3, 1e-1, 200).unwrap();
        assert!((slope - 4.0).abs() <= 0.05, "slope {slope}");
    }

    #[test]
    fn ulp_distance_basics() {
        assert_eq!(ulp_distance(1.0, 1.0), 0);
        assert_eq!(ulp_distance(1.0, f64::from_bits(1.0f64.to_bits() + 3)), 3);
    }

    #[test]
    fn energy_examples() {
        let s = SparsitySpec::two_four().with_padding(true);
        assert_eq!(energy_ratio(&[1.0; 4], &s).unwrap().ratio, 0.5);
        assert_eq!(energy_ratio(&[1.0, 0.0, 0.0, 0.0], &s).unwrap().ratio, 1.0);
        assert_eq!(energy_ratio(&[1.0, 0.0, 0.0, 0.0, 2.0], &s).unwrap().ratio, 1.0);
        let z = energy_ratio(&[0.0; 4], &s).unwrap();
        assert!(z.degenerate && z.ratio == 1.0);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert_eq!(
            check_bounds(&[0.0; 8], &SparsitySpec::two_four()),
            Err(BoundsError::ZeroVector)
        );
    }

    #[test]
    fn small_campaign_is_schedule_independent() {
        let spec = SparsitySpec::two_four();
        for dist in VectorDist::ALL {
            let a = campaign(1, 500, 16, dist, &spec, Execution::Sequential);
            let b = campaign(1, 500, 16, dist, &spec, Execution::Parallel);
            assert_eq!(a, b);
            assert!(a.violations.is_empty(), "{:?}", a.violations);
            assert!(a.min_energy_ratio >= 0.5);
        }
    }

    #[test]
    fn composed_pipeline_is_reported_not_asserted() {
        // Rounding 0.9 up to 1.0 grows the kept entries past the originals.
        let w = [0.9, 0.9, 0.1, 0.0];
        let q = QuantSpec::weight(4, 1.0).unwrap();
        let c = measure_composed(&w, &SparsitySpec::two_four(), &q).unwrap();
        assert!(c.compressed_norm_exceeds);
        assert!(c.check.error_sq > 0.0);
    }
}
