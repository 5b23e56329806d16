//! Time evolution of the nonlocal stage, the original block and the Markov
//! chain, plus the stability and decay checks on those trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::kernels::{build_kernel_matrix, normalize_rows, AffinityKernelSpec, FeatureField, KernelMatrix};
use crate::matrix::Matrix;
use crate::nonlocal_ops::{apply_diffusion, markov_matrix};
use crate::scalar::Scalar;
use crate::spectrum::{eig_symmetric, SymmetricEigen};

/// States whose max-abs entry exceeds this are treated as blown up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;
/// Distances below this are excluded from decay-rate fits.
pub const DECAY_FIT_FLOOR: f64 = 1e-12;
pub const MEAN_PRESERVATION_TOL: f64 = 1e-10;
pub const VARIANCE_SLACK: f64 = 1e-12;
pub const STABILITY_SLACK: f64 = 1e-12;
pub const DISCONNECTED_GAP_TOL: f64 = 1e-10;

/// Weight of one sub-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight<T> {
    /// Multiplies every channel.
    Scalar(T),
    /// `d x d`, left-multiplies the per-position channel vector.
    Matrix(Matrix<T>),
}

impl<T: Scalar> Weight<T> {
    fn check(&self, channels: usize) -> Result<()> {
        match self {
            Weight::Scalar(_) => Ok(()),
            Weight::Matrix(w) if w.rows() == channels && w.cols() == channels => Ok(()),
            Weight::Matrix(w) => Err(LabError::DimensionMismatch(format!(
                "{}x{} weight for a field with {channels} channels",
                w.rows(),
                w.cols()
            ))),
        }
    }

    /// `base + W · update` position-wise.
    fn apply_update(&self, base: &FeatureField<T>, update: &Matrix<T>) -> Result<FeatureField<T>> {
        self.check(base.num_channels())?;
        let mut out = base.values().clone();
        match self {
            Weight::Scalar(w) => out.axpy(*w, update)?,
            Weight::Matrix(w) => out.axpy(T::one(), &update.matmul_t(w)?)?,
        }
        FeatureField::new(out)
    }
}

/// Per-sub-step weights `W^n`; a single entry is shared by every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWeights<T> {
    pub per_step: Vec<Weight<T>>,
}

impl<T: Scalar> StageWeights<T> {
    pub fn shared(w: Weight<T>) -> Self {
        Self { per_step: vec![w] }
    }

    pub fn scalar(w: T) -> Self {
        Self::shared(Weight::Scalar(w))
    }

    pub fn at(&self, step: usize) -> Result<&Weight<T>> {
        match self.per_step.len() {
            0 => Err(LabError::Precondition("stage needs at least one weight".into())),
            1 => Ok(&self.per_step[0]),
            n if step < n => Ok(&self.per_step[step]),
            n => Err(LabError::Precondition(format!(
                "{n} weights cannot drive step {step}; give one shared weight or at least as many as steps"
            ))),
        }
    }
}

/// `Z_i + W (L Z)_i` with the kernel held fixed.
pub fn step_proposed<T: Scalar>(z: &FeatureField<T>, k: &KernelMatrix<T>, w: &Weight<T>) -> Result<FeatureField<T>> {
    let diffused = apply_diffusion(k, z)?;
    w.apply_update(z, diffused.values())
}

/// `Z_i + W (1 / C_i(Z)) Σ_j ω(Z_i, Z_j) Z_j`, kernel re-evaluated on `Z`.
pub fn step_original<T: Scalar>(
    z: &FeatureField<T>,
    spec: &AffinityKernelSpec<T>,
    w: &Weight<T>,
) -> Result<FeatureField<T>> {
    let k = normalize_rows(&build_kernel_matrix(z, spec)?)?;
    let averaged = k.entries().matmul(z.values())?;
    w.apply_update(z, &averaged)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stepper<T> {
    Proposed {
        kernel: KernelMatrix<T>,
        weights: StageWeights<T>,
    },
    Original {
        spec: AffinityKernelSpec<T>,
        weights: StageWeights<T>,
    },
    Markov {
        kernel: KernelMatrix<T>,
    },
}

impl<T: Scalar> Stepper<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Stepper::Proposed { .. } => "proposed",
            Stepper::Original { .. } => "original",
            Stepper::Markov { .. } => "markov",
        }
    }

    pub fn step(&self, z: &FeatureField<T>, n: usize) -> Result<FeatureField<T>> {
        match self {
            Stepper::Proposed { kernel, weights } => step_proposed(z, kernel, weights.at(n)?),
            Stepper::Original { spec, weights } => step_original(z, spec, weights.at(n)?),
            Stepper::Markov { kernel } => markov_matrix(kernel)?.apply(z),
        }
    }

    /// The fixed kernel, when the stepper has one.
    pub fn kernel(&self) -> Option<&KernelMatrix<T>> {
        match self {
            Stepper::Proposed { kernel, .. } | Stepper::Markov { kernel } => Some(kernel),
            Stepper::Original { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats<T> {
    pub mean: Vec<T>,
    /// `(1/M) Σ_i |Z_i - mean|²`, channels summed.
    pub variance: T,
    /// Frobenius norm of the state.
    pub l2_norm: T,
    /// `sqrt(Σ_i |Z_i - mean|²)`.
    pub dist_to_mean: T,
    pub max_abs: T,
}

impl<T: Scalar> StepStats<T> {
    pub fn of(z: &FeatureField<T>) -> Self {
        let mean = z.mean();
        let mut ss = T::zero();
        for i in 0..z.num_positions() {
            for (&x, &m) in z.position(i).iter().zip(&mean) {
                ss += (x - m) * (x - m);
            }
        }
        Self {
            variance: ss / T::from_usize_lossy(z.num_positions()),
            l2_norm: z.values().frobenius_norm(),
            dist_to_mean: ss.sqrt(),
            max_abs: z.max_abs(),
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord<T> {
    pub steps: usize,
    /// `steps + 1` entries; index 0 is the initial state.
    pub per_step_stats: Vec<StepStats<T>>,
    pub states: Option<Vec<FeatureField<T>>>,
}

impl<T: Scalar> TrajectoryRecord<T> {
    fn start(z0: &FeatureField<T>, record_states: bool) -> Self {
        Self {
            steps: 0,
            per_step_stats: vec![StepStats::of(z0)],
            states: record_states.then(|| vec![z0.clone()]),
        }
    }

    fn push(&mut self, z: &FeatureField<T>) {
        self.steps += 1;
        self.per_step_stats.push(StepStats::of(z));
        if let Some(states) = self.states.as_mut() {
            states.push(z.clone());
        }
    }

    pub fn final_stats(&self) -> &StepStats<T> {
        self.per_step_stats.last().expect("trajectory has its initial state")
    }

    pub fn variances(&self) -> Vec<T> {
        self.per_step_stats.iter().map(|s| s.variance).collect()
    }

    /// CSV with header `step,mean_0..mean_{d-1},variance,l2,dist_to_mean`.
    pub fn to_csv(&self) -> String {
        let d = self.per_step_stats[0].mean.len();
        let mut s = String::from("step");
        for c in 0..d {
            s.push_str(&format!(",mean_{c}"));
        }
        s.push_str(",variance,l2,dist_to_mean\n");
        for (n, st) in self.per_step_stats.iter().enumerate() {
            s.push_str(&n.to_string());
            for m in &st.mean {
                s.push_str(&format!(",{m}"));
            }
            s.push_str(&format!(",{},{},{}\n", st.variance, st.l2_norm, st.dist_to_mean));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution<T> {
    pub record: TrajectoryRecord<T>,
    /// Step index and size of the first blown-up state, if any.
    pub blow_up: Option<(usize, T)>,
    pub last_state: FeatureField<T>,
}

fn blown_up<T: Scalar>(z: &FeatureField<T>) -> Option<T> {
    let m = z.values().as_slice().iter().fold(T::zero(), |m, &x| {
        if x.is_finite() {
            m.max(x.abs())
        } else {
            T::infinity()
        }
    });
    (m > T::c(BLOW_UP_THRESHOLD)).then_some(m)
}

/// Runs up to `n` steps, stopping early (without error) at the first
/// blown-up state. The blown-up state itself is not recorded.
pub fn evolve_partial<T: Scalar>(
    z0: &FeatureField<T>,
    stepper: &Stepper<T>,
    n: usize,
    record_states: bool,
) -> Result<Evolution<T>> {
    let mut record = TrajectoryRecord::start(z0, record_states);
    let mut z = z0.clone();
    for step in 0..n {
        let next = match stepper.step(&z, step) {
            Ok(next) => next,
            // Non-finite intermediate values count as blow-up.
            Err(LabError::NonFinite(_)) | Err(LabError::NonFiniteAffinity { .. }) => {
                return Ok(Evolution {
                    record,
                    blow_up: Some((step + 1, T::infinity())),
                    last_state: z,
                })
            }
            Err(e) => return Err(e),
        };
        if let Some(size) = blown_up(&next) {
            return Ok(Evolution {
                record,
                blow_up: Some((step + 1, size)),
                last_state: z,
            });
        }
        record.push(&next);
        z = next;
    }
    Ok(Evolution {
        record,
        blow_up: None,
        last_state: z,
    })
}

/// Runs `n` steps; a blown-up state aborts with its step index.
pub fn evolve<T: Scalar>(
    z0: &FeatureField<T>,
    stepper: &Stepper<T>,
    n: usize,
    record_states: bool,
) -> Result<TrajectoryRecord<T>> {
    let ev = evolve_partial(z0, stepper, n, record_states)?;
    match ev.blow_up {
        Some((step, size)) => Err(LabError::BlowUp {
            step,
            max_abs: size.to_f64_lossy(),
        }),
        None => Ok(ev.record),
    }
}

fn require_symmetric_stochastic<T: Scalar>(k: &KernelMatrix<T>, what: &str) -> Result<()> {
    let f = k.flags();
    if !f.symmetric {
        return Err(LabError::Precondition(format!("{what} needs a symmetric kernel")));
    }
    if !(f.doubly_stochastic && f.nonnegative) {
        return Err(LabError::Precondition(format!(
            "{what} needs a nonnegative doubly stochastic kernel"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict<T> {
    pub spectral_radius: T,
    pub stable: bool,
    /// Largest nonnegative scalar weight with spectral radius <= 1.
    pub critical_weight: T,
}

/// Spectral stability of `Z <- Z + w (K - I) Z`: the radius is
/// `max_μ |1 + w(μ - 1)|` over the eigenvalues `μ` of `K`.
pub fn cfl_verdict<T: Scalar>(k: &KernelMatrix<T>, w: T) -> Result<StabilityVerdict<T>> {
    if !k.flags().symmetric {
        return Err(LabError::Precondition(
            "the spectral stability criterion needs a symmetric kernel".into(),
        ));
    }
    if !k.is_normalized() {
        return Err(LabError::Precondition("stability verdict needs a stochastic kernel".into()));
    }
    let eig = eig_symmetric(k.entries(), T::eig_tol())?;
    Ok(verdict_from_spectrum(&eig.eigenvalues, w))
}

pub fn verdict_from_spectrum<T: Scalar>(eigenvalues: &[T], w: T) -> StabilityVerdict<T> {
    let radius = eigenvalues
        .iter()
        .fold(T::zero(), |r, &mu| r.max((T::one() + w * (mu - T::one())).abs()));
    let mu_min = eigenvalues.iter().copied().fold(T::infinity(), T::min);
    let critical_weight = if mu_min < T::one() {
        T::c(2.0) / (T::one() - mu_min)
    } else {
        T::infinity()
    };
    StabilityVerdict {
        spectral_radius: radius,
        stable: radius <= T::one() + T::c(STABILITY_SLACK),
        critical_weight,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRecord<T> {
    pub trajectory: TrajectoryRecord<T>,
    /// `|Z^{n+1}| / |Z^n|` per step (1 for a zero state).
    pub growth_factors: Vec<T>,
}

impl<T: Scalar> ReverseRecord<T> {
    pub fn max_growth(&self) -> T {
        self.growth_factors.iter().copied().fold(T::zero(), T::max)
    }
}

/// Anti-diffusion: the proposed step with weight `-w`.
pub fn reverse_evolve<T: Scalar>(z0: &FeatureField<T>, k: &KernelMatrix<T>, w: T, n: usize) -> Result<ReverseRecord<T>> {
    if w < T::zero() {
        return Err(LabError::Precondition("reverse evolution takes a nonnegative weight".into()));
    }
    let stepper = Stepper::Proposed {
        kernel: k.clone(),
        weights: StageWeights::scalar(-w),
    };
    let trajectory = evolve(z0, &stepper, n, false)?;
    let growth_factors = trajectory
        .per_step_stats
        .windows(2)
        .map(|p| {
            if p[0].l2_norm == T::zero() {
                T::one()
            } else {
                p[1].l2_norm / p[0].l2_norm
            }
        })
        .collect();
    Ok(ReverseRecord {
        trajectory,
        growth_factors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    AssumptionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub verdict: Verdict,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl TheoryCheck {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

fn kernel_assumption<T: Scalar>(kernel: &KernelMatrix<T>) -> Option<String> {
    let f = kernel.flags();
    if !f.symmetric {
        Some("kernel is not symmetric".into())
    } else if !f.doubly_stochastic {
        Some("kernel is not doubly stochastic".into())
    } else {
        None
    }
}

/// Largest drift of the per-channel mean away from its initial value.
pub fn verify_mean_preservation<T: Scalar>(traj: &TrajectoryRecord<T>, kernel: &KernelMatrix<T>) -> TheoryCheck {
    let m0 = &traj.per_step_stats[0].mean;
    let drift = traj
        .per_step_stats
        .iter()
        .flat_map(|s| s.mean.iter().zip(m0).map(|(&a, &b)| (a - b).abs().to_f64_lossy()))
        .fold(0.0, f64::max);
    let (verdict, detail) = match kernel_assumption(kernel) {
        Some(why) => (Verdict::AssumptionViolated, format!("assumption violated: {why}")),
        None if drift <= MEAN_PRESERVATION_TOL => (Verdict::Pass, "mean preserved".into()),
        None => (Verdict::Fail, "mean drifted".into()),
    };
    TheoryCheck {
        name: "mean_preservation".into(),
        verdict,
        measured: drift,
        threshold: MEAN_PRESERVATION_TOL,
        detail,
    }
}

/// Monotone decrease of the variance, up to a fixed slack.
pub fn verify_variance_decay<T: Scalar>(traj: &TrajectoryRecord<T>, kernel: &KernelMatrix<T>) -> TheoryCheck {
    let worst = traj
        .per_step_stats
        .windows(2)
        .map(|p| (p[1].variance - p[0].variance).to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let (verdict, detail) = match kernel_assumption(kernel) {
        Some(why) => (Verdict::AssumptionViolated, format!("assumption violated: {why}")),
        None if traj.steps == 0 || worst <= VARIANCE_SLACK => (Verdict::Pass, "variance non-increasing".into()),
        None => (Verdict::Fail, "variance increased".into()),
    };
    TheoryCheck {
        name: "variance_decay".into(),
        verdict,
        measured: if worst.is_finite() { worst } else { 0.0 },
        threshold: VARIANCE_SLACK,
        detail,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub lambda_hat: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares slope of `ln(dist_to_mean)` against the step index, over
/// steps whose distance exceeds the fit floor.
pub fn estimate_decay_rate<T: Scalar>(traj: &TrajectoryRecord<T>) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = traj
        .per_step_stats
        .iter()
        .enumerate()
        .filter_map(|(n, s)| {
            let d = s.dist_to_mean.to_f64_lossy();
            (d > DECAY_FIT_FLOOR).then(|| (n as f64, d.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return Err(LabError::InsufficientData(format!(
            "{} points above the fit floor, need at least 3",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm) * (p.0 - xm)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - ym) * (p.1 - ym)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let r = p.1 - (ym + slope * (p.0 - xm));
            r * r
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayFit {
        lambda_hat: -slope,
        r_squared,
        points: pts.len(),
    })
}

/// Predicted decay rate of the slowest mean-zero mode under scalar weight `w`:
/// `-ln|1 - w (1 - λ₂)|`.
pub fn predicted_decay_rate(lambda2: f64, w: f64) -> f64 {
    -(1.0 - w * (1.0 - lambda2)).abs().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoincareConstant<T> {
    /// `1 - λ₂(K)`, or zero when degenerate.
    pub constant: T,
    pub lambda2: T,
    pub degenerate: bool,
    pub eigen: SymmetricEigen<T>,
}

/// Discrete nonlocal Poincaré constant `1 - λ₂(K)`.
pub fn poincare_constant<T: Scalar>(k: &KernelMatrix<T>) -> Result<PoincareConstant<T>> {
    require_symmetric_stochastic(k, "the Poincaré constant")?;
    let eigen = eig_symmetric(k.entries(), T::eig_tol())?;
    let lambda2 = eigen.eigenvalues.get(1).copied().unwrap_or(T::one());
    let gap = T::one() - lambda2;
    let degenerate = gap <= T::c(DISCONNECTED_GAP_TOL);
    Ok(PoincareConstant {
        constant: if degenerate { T::zero() } else { gap },
        lambda2,
        degenerate,
        eigen,
    })
}

/// Both sides of `Σ_ij K_ij |Z_j - Z_i|² >= 2 m |Z|²` for a mean-zero `Z`.
pub fn poincare_sides<T: Scalar>(k: &KernelMatrix<T>, z: &FeatureField<T>, m: T) -> Result<(T, T)> {
    let lhs = crate::nonlocal_ops::dirichlet_energy(k, z)? * T::c(2.0);
    let norm2 = z.values().as_slice().iter().map(|&x| x * x).sum::<T>();
    Ok((lhs, T::c(2.0) * m * norm2))
}

/// Exact one-step variance decrease of the Markov step `Z <- K Z` for
/// symmetric doubly stochastic `K`:
/// `var(Z) - var(KZ) = (1/M) Zc^T (I - K²) Zc = E(K², Zc) / M`, with `Zc` the
/// centered field and `E` the kernel's Dirichlet energy.
pub fn markov_variance_drop<T: Scalar>(k: &KernelMatrix<T>, z: &FeatureField<T>) -> Result<T> {
    let m = z.num_positions();
    let mean = z.mean();
    let centered = FeatureField::new(Matrix::from_fn(m, z.num_channels(), |i, c| z.position(i)[c] - mean[c]))?;
    let k2 = KernelMatrix::from_entries(k.entries().matmul(k.entries())?)?;
    Ok(crate::nonlocal_ops::dirichlet_energy(&k2, &centered)? / T::from_usize_lossy(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyOutcome {
    Converged,
    NotConverged,
    BlowUp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateReport<T> {
    pub passed: bool,
    pub outcome: SteadyOutcome,
    pub final_max_abs: T,
    /// `|Z^n|_inf` for every computed step.
    pub decay_curve: Vec<T>,
    pub blow_up_step: Option<usize>,
    pub trajectory: TrajectoryRecord<T>,
}

/// Evolves the original block and checks that it damps to `Z ≡ 0`.
pub fn steady_state_check_original<T: Scalar>(
    spec: &AffinityKernelSpec<T>,
    w: T,
    z0: &FeatureField<T>,
    n: usize,
    tol: T,
) -> Result<SteadyStateReport<T>> {
    let strictly_positive = match spec {
        AffinityKernelSpec::Gaussian | AffinityKernelSpec::Rbf { .. } => true,
        AffinityKernelSpec::Embedded { inner, .. } => {
            matches!(**inner, AffinityKernelSpec::Gaussian | AffinityKernelSpec::Rbf { .. })
        }
        _ => false,
    };
    if !strictly_positive {
        return Err(LabError::Precondition(format!(
            "steady-state check needs a strictly positive kernel, got {}",
            spec.name()
        )));
    }
    let stepper = Stepper::Original {
        spec: spec.clone(),
        weights: StageWeights::scalar(w),
    };
    let ev = evolve_partial(z0, &stepper, n, false)?;
    let decay_curve: Vec<T> = ev.record.per_step_stats.iter().map(|s| s.max_abs).collect();
    let final_max_abs = *decay_curve.last().expect("initial state recorded");
    let (outcome, passed) = match ev.blow_up {
        Some(_) => (SteadyOutcome::BlowUp, false),
        None if final_max_abs <= tol => (SteadyOutcome::Converged, true),
        None => (SteadyOutcome::NotConverged, false),
    };
    Ok(SteadyStateReport {
        passed,
        outcome,
        final_max_abs,
        decay_curve,
        blow_up_step: ev.blow_up.map(|b| b.0),
        trajectory: ev.record,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn two_state() -> KernelMatrix<f64> {
        KernelMatrix::<f64>::from_f64_rows(&[&[0.9, 0.1], &[0.1, 0.9]]).unwrap()
    }

    #[test]
    fn two_state_markov_variance_drop() {
        let z = FeatureField::<f64>::scalar_field(&[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(markov_variance_drop(&two_state(), &z).unwrap(), 0.36, epsilon = 1e-14);
    }

    fn exchange() -> KernelMatrix<f64> {
        KernelMatrix::<f64>::from_f64_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap()
    }

    fn pm1() -> FeatureField<f64> {
        FeatureField::<f64>::scalar_field(&[1.0, -1.0]).unwrap()
    }

    fn scalar_values(z: &FeatureField<f64>) -> Vec<f64> {
        z.values().as_slice().to_vec()
    }

    #[test]
    fn step_proposed_examples() {
        let half = KernelMatrix::<f64>::from_f64_rows(&[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        let z = pm1();
        assert_eq!(step_proposed(&z, &half, &Weight::Scalar(0.0)).unwrap(), z);
        let out = step_proposed(&z, &half, &Weight::Scalar(0.5)).unwrap();
        assert_eq!(scalar_values(&out), vec![0.5, -0.5]);
        let c = FeatureField::<f64>::constant(2, &[3.0, 1.0]).unwrap();
        let w = Weight::Matrix(Matrix::from_f64_rows(&[&[1.0, 2.0], &[-1.0, 0.5]]).unwrap());
        assert_eq!(step_proposed(&c, &half, &w).unwrap(), c);
    }

    #[test]
    fn matrix_weight_left_multiplies_channels() {
        let half = KernelMatrix::<f64>::from_f64_rows(&[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        let z = FeatureField::<f64>::from_f64_rows(&[&[1.0, 0.0], &[-1.0, 2.0]]).unwrap();
        let w = Matrix::from_f64_rows(&[&[0.0, 1.0], &[2.0, 0.0]]).unwrap();
        let out = step_proposed(&z, &half, &Weight::Matrix(w)).unwrap();
        // diffused: row0 = (-1, 1), row1 = (1, -1); W row0 = (1, -2), W row1 = (-1, 2)
        assert_eq!(out.values().to_rows(), vec![vec![2.0, -2.0], vec![-2.0, 4.0]]);
        let bad = Weight::Matrix(Matrix::<f64>::identity(3));
        assert!(matches!(step_proposed(&z, &half, &bad), Err(LabError::DimensionMismatch(_))));
    }

    #[test]
    fn step_original_examples() {
        let z = FeatureField::<f64>::scalar_field(&[1.0, -3.0, 2.0]).unwrap();
        let g = AffinityKernelSpec::Gaussian;
        assert_eq!(step_original(&z, &g, &Weight::Scalar(0.0)).unwrap(), z);
        let out = step_original(&z, &AffinityKernelSpec::DiracDelta, &Weight::Scalar(-1.0)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        let mut z = FeatureField::<f64>::scalar_field(&[2.0]).unwrap();
        for expect in [1.0, 0.5, 0.25] {
            z = step_original(&z, &g, &Weight::Scalar(-0.5)).unwrap();
            assert_eq!(scalar_values(&z), vec![expect]);
        }
    }

    #[test]
    fn evolve_examples() {
        let rec = evolve(&pm1(), &Stepper::Markov { kernel: two_state() }, 0, false).unwrap();
        assert_eq!(rec.steps, 0);
        assert_eq!(rec.per_step_stats.len(), 1);

        let rec = evolve(&pm1(), &Stepper::Markov { kernel: two_state() }, 3, true).unwrap();
        let states = rec.states.unwrap();
        for (n, expect) in [0.8, 0.64, 0.512].iter().enumerate() {
            let v = scalar_values(&states[n + 1]);
            assert_abs_diff_eq!(v[0], *expect, epsilon = 1e-15);
            assert_abs_diff_eq!(v[1], -*expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn unstable_weight_blows_up() {
        let stepper = Stepper::Proposed {
            kernel: exchange(),
            weights: StageWeights::scalar(1.5),
        };
        let ev = evolve_partial(&pm1(), &stepper, 100, false).unwrap();
        let (step, _) = ev.blow_up.expect("blow-up");
        assert!(step < 50);
        for p in ev.record.per_step_stats.windows(2) {
            assert_abs_diff_eq!(p[1].l2_norm / p[0].l2_norm, 2.0, epsilon = 1e-12);
        }
        assert!(matches!(evolve(&pm1(), &stepper, 100, false), Err(LabError::BlowUp { .. })));
    }

    #[test]
    fn weights_list_length() {
        let stepper = Stepper::Proposed {
            kernel: two_state(),
            weights: StageWeights {
                per_step: vec![Weight::Scalar(0.1), Weight::Scalar(0.2)],
            },
        };
        assert!(evolve(&pm1(), &stepper, 2, false).is_ok());
        assert!(matches!(evolve(&pm1(), &stepper, 3, false), Err(LabError::Precondition(_))));
    }

    #[test]
    fn cfl_examples() {
        let v = cfl_verdict(&two_state(), 0.0).unwrap();
        assert_eq!(v.spectral_radius, 1.0);
        assert!(v.stable);
        let v = cfl_verdict(&exchange(), 1.0).unwrap();
        assert_abs_diff_eq!(v.spectral_radius, 1.0, epsilon = 1e-12);
        assert!(v.stable);
        assert_abs_diff_eq!(v.critical_weight, 1.0, epsilon = 1e-12);
        let v = cfl_verdict(&exchange(), 1.5).unwrap();
        assert_abs_diff_eq!(v.spectral_radius, 2.0, epsilon = 1e-12);
        assert!(!v.stable);
        let asym = KernelMatrix::<f64>::from_f64_rows(&[&[0.5, 0.5], &[0.2, 0.8]]).unwrap();
        assert!(cfl_verdict(&asym, 0.1).is_err());
        let id = KernelMatrix::from_entries(Matrix::<f64>::identity(2)).unwrap();
        assert!(cfl_verdict(&id, 5.0).unwrap().critical_weight.is_infinite());
    }

    #[test]
    fn reverse_examples() {
        let rec = reverse_evolve(&pm1(), &two_state(), 0.0, 3).unwrap();
        assert!(rec.trajectory.per_step_stats.iter().all(|s| s.l2_norm == 2f64.sqrt()));
        let rec = reverse_evolve(&pm1(), &two_state(), 1.0, 2).unwrap();
        for g in &rec.growth_factors {
            assert_abs_diff_eq!(*g, 1.2, epsilon = 1e-14);
        }
        assert!(rec.max_growth() <= 3.0);
        assert!(reverse_evolve(&pm1(), &two_state(), -1.0, 2).is_err());
    }

    #[test]
    fn forward_then_reverse_does_not_return() {
        let k = KernelMatrix::<f64>::from_f64_rows(&[&[0.6, 0.3, 0.1], &[0.3, 0.4, 0.3], &[0.1, 0.3, 0.6]]).unwrap();
        let z0 = FeatureField::<f64>::scalar_field(&[1.0, 0.0, -2.0]).unwrap();
        let w = 0.1;
        let fwd = step_proposed(&z0, &k, &Weight::Scalar(w)).unwrap();
        let back = step_proposed(&fwd, &k, &Weight::Scalar(-w)).unwrap();
        // (I - wL)(I + wL) Z0 - Z0 = -w² L² Z0
        let l = crate::nonlocal_ops::diffusion_matrix(&k).unwrap();
        let l2z = l.entries().matmul(&l.entries().matmul(z0.values()).unwrap()).unwrap();
        let err = back.values().sub(z0.values()).unwrap();
        assert!(err.max_abs() > 1e-4);
        let expect = l2z.scale(-w * w);
        assert!(err.max_abs_diff(&expect).unwrap() <= 1e-15);
    }

    #[test]
    fn mean_and_variance_checks() {
        let c = FeatureField::<f64>::constant(3, &[2.0]).unwrap();
        let k = KernelMatrix::<f64>::from_f64_rows(&[&[0.6, 0.3, 0.1], &[0.3, 0.4, 0.3], &[0.1, 0.3, 0.6]]).unwrap();
        let stepper = Stepper::Proposed {
            kernel: k.clone(),
            weights: StageWeights::scalar(0.7),
        };
        let rec = evolve(&c, &stepper, 10, false).unwrap();
        let m = verify_mean_preservation(&rec, &k);
        assert_eq!(m.verdict, Verdict::Pass);
        assert_eq!(m.measured, 0.0);
        assert!(rec.variances().iter().all(|&v| v == 0.0));

        let rec = evolve(&pm1(), &Stepper::Markov { kernel: two_state() }, 5, false).unwrap();
        for p in rec.per_step_stats.windows(2) {
            assert_abs_diff_eq!(p[1].variance / p[0].variance, 0.64, epsilon = 1e-12);
        }
        assert!(verify_variance_decay(&rec, &two_state()).passed());

        let row = KernelMatrix::<f64>::from_f64_rows(&[&[0.5, 0.5], &[0.2, 0.8]]).unwrap();
        let rec = evolve(&pm1(), &Stepper::Markov { kernel: row.clone() }, 5, false).unwrap();
        assert_eq!(verify_mean_preservation(&rec, &row).verdict, Verdict::AssumptionViolated);

        let stepper = Stepper::Proposed {
            kernel: exchange(),
            weights: StageWeights::scalar(1.5),
        };
        let rec = evolve(&pm1(), &stepper, 5, false).unwrap();
        assert_eq!(verify_variance_decay(&rec, &exchange()).verdict, Verdict::Fail);
    }

    #[test]
    fn decay_rate_examples() {
        let rec = evolve(&pm1(), &Stepper::Markov { kernel: two_state() }, 60, false).unwrap();
        let fit = estimate_decay_rate(&rec).unwrap();
        assert_abs_diff_eq!(fit.lambda_hat, -(0.8f64).ln(), epsilon = 1e-9);
        assert!(fit.r_squared >= 0.9999);
        let c = FeatureField::<f64>::constant(2, &[1.0]).unwrap();
        let rec = evolve(&c, &Stepper::Markov { kernel: two_state() }, 10, false).unwrap();
        assert!(matches!(estimate_decay_rate(&rec), Err(LabError::InsufficientData(_))));
    }

    #[test]
    fn poincare_examples() {
        let p = poincare_constant(&two_state()).unwrap();
        assert_abs_diff_eq!(p.constant, 0.2, epsilon = 1e-12);
        let uniform = KernelMatrix::<f64>::from_entries(Matrix::from_fn(4, 4, |_, _| 0.25)).unwrap();
        let p = poincare_constant(&uniform).unwrap();
        assert_abs_diff_eq!(p.constant, 1.0, epsilon = 1e-12);
        let id = KernelMatrix::from_entries(Matrix::<f64>::identity(3)).unwrap();
        let p = poincare_constant(&id).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.constant, 0.0);
        let row = KernelMatrix::<f64>::from_f64_rows(&[&[0.5, 0.5], &[0.2, 0.8]]).unwrap();
        assert!(poincare_constant(&row).is_err());
    }

    #[test]
    fn steady_state_examples() {
        let spec = AffinityKernelSpec::Gaussian;
        let zero = FeatureField::<f64>::scalar_field(&[0.0, 0.0]).unwrap();
        let r = steady_state_check_original(&spec, -0.5, &zero, 10, 1e-12).unwrap();
        assert!(r.passed);
        assert_eq!(r.final_max_abs, 0.0);

        let z0 = FeatureField::<f64>::scalar_field(&[2.0]).unwrap();
        let r = steady_state_check_original(&spec, -0.5, &z0, 20, 1e-5).unwrap();
        assert!(r.passed);
        assert_eq!(r.final_max_abs, 2.0 * 0.5f64.powi(20));

        let r = steady_state_check_original(&spec, 0.5, &z0, 200, 1e-5).unwrap();
        assert_eq!(r.outcome, SteadyOutcome::BlowUp);
        for p in r.decay_curve.windows(2) {
            assert_abs_diff_eq!(p[1] / p[0], 1.5, epsilon = 1e-12);
        }

        assert!(steady_state_check_original(&AffinityKernelSpec::DiracDelta, -0.5, &z0, 5, 1e-5).is_err());
    }
}
