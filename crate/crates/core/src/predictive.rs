//! Posterior predictive distribution at a new covariate: a mixture of
//! multivariate t densities, one per component.
//!
//! Component `j` at design `E₀` has density
//! `∝ (1 + (y − l)ᵀ A (y − l))^{−(ν+1)/2}` with `l = β̂_jᵀE₀` and
//! `A = k S⁻¹`, `k = μ / (1 + μ E₀ᵀV_j⁻¹E₀)`, `μ = E(τ⁻¹)`. This is a
//! standard t with `ν + 1 − m` degrees of freedom.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::beta::beta_reg;

use crate::basis::BasisMap;
use crate::error::{Error, Result};
use crate::model::{prior_component, ComponentState, Hyperparameters, VariationalState, OCCUPANCY_THRESHOLD};
use crate::numstat::{log_mvgamma, log_sum_exp, mvt_log_norm, SpdMatrix};
use crate::vsugs::urn_weights;

const QUANTILE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TComponent {
    pub location: DVector<f64>,
    /// Quadratic-form matrix `A`.
    pub shape: SpdMatrix,
    pub tail_exponent: f64,
    /// Per-dimension scale of the univariate marginals.
    pub marginal_scale: DVector<f64>,
    log_norm: f64,
}

impl TComponent {
    pub fn dof(&self) -> f64 {
        self.tail_exponent - self.location.len() as f64
    }

    pub fn logpdf(&self, y: &DVector<f64>) -> f64 {
        let d = y - &self.location;
        self.log_norm - 0.5 * self.tail_exponent * self.shape.quad(&d).ln_1p()
    }

    /// `l + L⁻ᵀ z / √w` with `A = LLᵀ`, `z ~ N(0, I)`, `w ~ χ²(dof)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let m = self.location.len();
        let mut z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.shape
            .chol()
            .tr_solve_lower_triangular_unchecked_mut(&mut z);
        let w: f64 = ChiSquared::new(self.dof())
            .expect("proper component has positive dof")
            .sample(rng);
        &self.location + z / w.sqrt()
    }
}

/// The intermediate quantities of the closed-form derivation, kept for
/// inspection. `V_j` stands where the derivation writes `Ω_j⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDiagnostics {
    /// `Λ = μE₀E₀ᵀ + V_j`
    pub lambda: DMatrix<f64>,
    /// `S_* = S − β̂ᵀV_jΛ⁻¹V_jβ̂ + β̂ᵀV_jβ̂`
    pub s_star: DMatrix<f64>,
    /// `𝒜 = μ(1 − μE₀ᵀΛ⁻¹E₀) S_*⁻¹`
    pub a_mat: DMatrix<f64>,
    /// `ℬ = −2μ S_*⁻¹ β̂ᵀ V_j Λ⁻¹ E₀`
    pub b_vec: DVector<f64>,
    /// `−½ 𝒜⁻¹ℬ`
    pub location: DVector<f64>,
    /// `1 − ¼ ℬᵀ𝒜⁻¹ℬ`
    pub shape_factor: f64,
    /// The printed variance `{𝒜 (1 − ¼ℬᵀ𝒜⁻¹ℬ)⁻¹}⁻¹ / (ν − m − 1)`, when
    /// `ν > m + 1`.
    pub printed_variance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    pub weights: DVector<f64>,
    pub components: Vec<TComponent>,
    pub diagnostics: Option<Vec<ComponentDiagnostics>>,
}

/// Component state used for prediction: the fitted one when occupied, the
/// prior-initialized one otherwise.
fn effective_component(
    state: &VariationalState,
    hyper: &Hyperparameters,
    j: usize,
) -> Result<ComponentState> {
    let c = &state.components[j];
    if c.mass > OCCUPANCY_THRESHOLD {
        Ok(c.clone())
    } else {
        prior_component(hyper, j)
    }
}

fn build_component(
    e0: &DVector<f64>,
    comp: &ComponentState,
    state: &VariationalState,
    sigma_inv: &SpdMatrix,
    j: usize,
) -> Result<TComponent> {
    let m = state.response_dim() as f64;
    let mu = state.tau.mean_inverse();
    let spread = 1.0 + mu * comp.prec.inv_quad(e0);
    let k = mu / spread;
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::DegenerateShape { component: j });
    }
    let shape = sigma_inv
        .scaled(k)
        .map_err(|_| Error::DegenerateShape { component: j })?;
    let tail = state.sigma.dof + 1.0;
    let dof = tail - m;
    let scale_diag = state.sigma.scale.values().diagonal();
    let marginal_scale = scale_diag.map(|s| (s / (k * dof)).sqrt());
    Ok(TComponent {
        location: comp.beta_hat.tr_mul(e0),
        log_norm: mvt_log_norm(m, shape.log_det(), tail),
        shape,
        tail_exponent: tail,
        marginal_scale,
    })
}

/// Derivation quantities for one component.
pub fn component_diagnostics(
    e0: &DVector<f64>,
    comp: &ComponentState,
    state: &VariationalState,
    j: usize,
) -> Result<ComponentDiagnostics> {
    let mu = state.tau.mean_inverse();
    let m = state.response_dim();
    let v = comp.prec.values();
    let lambda = comp.prec.rank_one_update(e0, mu)?;
    let vb = v * &comp.beta_hat;
    let s_star = state.sigma.scale.values() - vb.tr_mul(&lambda.solve_mat(&vb))
        + comp.prec.sandwich(&comp.beta_hat);
    let s_star_spd = SpdMatrix::new(crate::numstat::symmetrize(s_star.clone()))?;
    let lam_e = lambda.solve(e0);
    let a_mat = s_star_spd.inverse() * (mu * (1.0 - mu * e0.dot(&lam_e)));
    let b_vec = s_star_spd.solve(&(vb.tr_mul(&lam_e))) * (-2.0 * mu);
    let a_spd = SpdMatrix::new(crate::numstat::symmetrize(a_mat.clone()))?;
    let a_inv_b = a_spd.solve(&b_vec);
    let location = &a_inv_b * -0.5;
    let shape_factor = 1.0 - 0.25 * b_vec.dot(&a_inv_b);
    if !(shape_factor > 0.0) {
        return Err(Error::DegenerateShape { component: j });
    }
    let denom = state.sigma.dof - m as f64 - 1.0;
    let printed_variance =
        (denom > 0.0).then(|| a_spd.inverse() * (shape_factor / denom));
    Ok(ComponentDiagnostics {
        lambda: lambda.values().clone(),
        s_star,
        a_mat,
        b_vec,
        location,
        shape_factor,
        printed_variance,
    })
}

/// Component log density from the determinant of the pre-simplification
/// expression `|S + μy₀y₀ᵀ + β̂ᵀVβ̂ − β̃ᵀΛβ̃|`, with `β̃` formed explicitly.
pub fn direct_determinant_logpdf(
    y0: &DVector<f64>,
    e0: &DVector<f64>,
    comp: &ComponentState,
    state: &VariationalState,
) -> Result<f64> {
    let m = y0.len();
    let mf = m as f64;
    let mu = state.tau.mean_inverse();
    let nu = state.sigma.dof;
    let lambda = comp.prec.rank_one_update(e0, mu)?;
    let rhs = e0 * y0.transpose() * mu + comp.prec.values() * &comp.beta_hat;
    let bt = lambda.solve_mat(&rhs);
    let inner = state.sigma.scale.values() + y0 * y0.transpose() * mu
        + comp.prec.sandwich(&comp.beta_hat)
        - lambda.sandwich(&bt);
    let inner = SpdMatrix::new(crate::numstat::symmetrize(inner))?;
    let scale = &state.sigma.scale;
    Ok(-0.5 * mf * (2.0 * std::f64::consts::PI / mu).ln()
        - 0.5 * mf * (lambda.log_det() - comp.prec.log_det())
        + 0.5 * nu * scale.log_det()
        + log_mvgamma(m, 0.5 * (nu + 1.0))?
        - log_mvgamma(m, 0.5 * nu)?
        + 0.5 * mf * std::f64::consts::LN_2
        - 0.5 * (nu + 1.0) * inner.log_det())
}

/// Component log density through the matrix determinant lemma:
/// `|S + c rrᵀ| = |S| (1 + c rᵀS⁻¹r)`.
pub fn determinant_lemma_logpdf(
    y0: &DVector<f64>,
    e0: &DVector<f64>,
    comp: &ComponentState,
    state: &VariationalState,
) -> Result<f64> {
    let m = y0.len();
    let mf = m as f64;
    let mu = state.tau.mean_inverse();
    let nu = state.sigma.dof;
    let spread = 1.0 + mu * comp.prec.inv_quad(e0);
    let c = mu / spread;
    let r = y0 - comp.beta_hat.tr_mul(e0);
    let scale = &state.sigma.scale;
    Ok(-0.5 * mf * std::f64::consts::PI.ln() + 0.5 * mf * c.ln()
        + log_mvgamma(m, 0.5 * (nu + 1.0))?
        - log_mvgamma(m, 0.5 * nu)?
        - 0.5 * scale.log_det()
        - 0.5 * (nu + 1.0) * (c * scale.inv_quad(&r)).ln_1p())
}

/// Build the predictive mixture at design vector `e0`.
pub fn predictive_mixture(
    e0: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
) -> Result<PredictiveMixture> {
    build(e0, state, hyper, false)
}

/// As [`predictive_mixture`], also filling the derivation diagnostics.
pub fn predictive_mixture_with_diagnostics(
    e0: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
) -> Result<PredictiveMixture> {
    build(e0, state, hyper, true)
}

/// Predictive mixture at a raw covariate.
pub fn predictive_at(
    x0: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
    basis: &BasisMap,
) -> Result<PredictiveMixture> {
    predictive_mixture(&basis.design(x0)?, state, hyper)
}

fn build(
    e0: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
    diagnostics: bool,
) -> Result<PredictiveMixture> {
    if e0.len() != state.design_dim() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} entries, state expects {}",
            e0.len(),
            state.design_dim()
        )));
    }
    let weights = urn_weights(&state.masses(), state.seen, hyper.alpha);
    let sigma_inv = SpdMatrix::new(crate::numstat::symmetrize(state.sigma.scale.inverse()))?;
    let mut components = Vec::with_capacity(state.trunc());
    let mut diags = diagnostics.then(Vec::new);
    for j in 0..state.trunc() {
        let comp = effective_component(state, hyper, j)?;
        components.push(build_component(e0, &comp, state, &sigma_inv, j)?);
        if let Some(d) = diags.as_mut() {
            d.push(component_diagnostics(e0, &comp, state, j)?);
        }
    }
    Ok(PredictiveMixture {
        weights,
        components,
        diagnostics: diags,
    })
}

impl PredictiveMixture {
    pub fn dim(&self) -> usize {
        self.components[0].location.len()
    }

    fn active(&self) -> impl Iterator<Item = (f64, &TComponent)> {
        self.weights
            .iter()
            .copied()
            .zip(self.components.iter())
            .filter(|(w, _)| *w > 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        let total = self.weights.sum();
        for (j, w) in self.weights.iter().enumerate() {
            acc += w / total;
            if u < acc {
                pick = j;
                break;
            }
        }
        self.components[pick].sample(rng)
    }

    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} entries, mixture is {}-dimensional",
                y.len(),
                self.dim()
            )));
        }
        let terms: Vec<f64> = self.active().map(|(w, c)| w.ln() + c.logpdf(y)).collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        let mut mean = DVector::zeros(self.dim());
        for (w, c) in self.active() {
            if !(c.dof() > 1.0) {
                return Err(Error::Domain(format!(
                    "mean needs more than 1 degree of freedom, component has {}",
                    c.dof()
                )));
            }
            mean += &c.location * w;
        }
        Ok(mean)
    }

    /// Weighted location, defined even when the mean is not.
    pub fn center(&self, dim: usize) -> f64 {
        self.active().map(|(w, c)| w * c.location[dim]).sum()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "dimension {dim} out of range for {}-dimensional mixture",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Mixture of univariate t CDFs along dimension `dim`.
    pub fn marginal_cdf(&self, dim: usize, v: f64) -> Result<f64> {
        self.check_dim(dim)?;
        let mut total = 0.0;
        for (w, c) in self.active() {
            let z = (v - c.location[dim]) / c.marginal_scale[dim];
            total += w * student_t_cdf(z, c.dof());
        }
        Ok(total.clamp(0.0, 1.0))
    }

    /// Inverse of [`Self::marginal_cdf`] by bracketed bisection.
    pub fn marginal_quantile(&self, dim: usize, u: f64) -> Result<f64> {
        self.check_dim(dim)?;
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("probability {u} outside (0, 1)")));
        }
        let center = self.center(dim);
        let unit = self
            .active()
            .map(|(_, c)| c.marginal_scale[dim])
            .fold(0.0, f64::max);
        let mut half = 50.0 * unit.max(f64::MIN_POSITIVE);
        let (mut lo, mut hi) = (center - half, center + half);
        let mut guard = 0;
        while self.marginal_cdf(dim, lo)? > u || self.marginal_cdf(dim, hi)? < u {
            half *= 2.0;
            lo = center - half;
            hi = center + half;
            guard += 1;
            if guard > 200 {
                return Err(Error::Convergence("quantile bracket did not close".into()));
            }
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            let f = self.marginal_cdf(dim, mid)?;
            // Keep narrowing after the probability target so flat tails
            // still resolve the abscissa.
            let narrow = hi - lo <= QUANTILE_TOL * mid.abs().max(1.0);
            if (f - u).abs() < QUANTILE_TOL && narrow || hi - lo <= 4.0 * f64::EPSILON * mid.abs().max(1.0) {
                return Ok(mid);
            }
            if f < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Standard t CDF. Near the center the regularized beta is taken at
/// `z²/(ν+z²)` so small arguments do not round away.
pub fn student_t_cdf(z: f64, dof: f64) -> f64 {
    if z.is_infinite() {
        return if z > 0.0 { 1.0 } else { 0.0 };
    }
    let z2 = z * z;
    let tail = if z2 < dof {
        0.5 * (1.0 - beta_reg(0.5, 0.5 * dof, z2 / (dof + z2)))
    } else {
        0.5 * beta_reg(0.5 * dof, 0.5, dof / (dof + z2))
    };
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Predictive means for every row of a design matrix.
pub fn predict_means(
    designs: &DMatrix<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
) -> Result<DMatrix<f64>> {
    let m = state.response_dim();
    let rows: Vec<DVector<f64>> = (0..designs.nrows())
        .into_par_iter()
        .map(|i| predictive_mixture(&designs.row(i).transpose(), state, hyper)?.mean())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(designs.nrows(), m, |i, l| rows[i][l]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_state;
    use crate::numstat::{seeded_rng, symmetrize, InvGammaParams};
    use crate::vsugs::{fit_online, OnlineOptions};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_state(d: usize, m: usize, t: usize, seed: u64) -> (Hyperparameters, VariationalState) {
        let mut rng = seeded_rng(seed);
        let h = Hyperparameters::with_defaults(m, d - 1, t, 2.0);
        let mut s = init_state(&h).unwrap();
        for c in &mut s.components {
            c.beta_hat = DMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
            c.prec = SpdMatrix::new(symmetrize(&a * a.transpose() + DMatrix::identity(d, d)))
                .unwrap();
            c.mass = 5.0;
        }
        let b = DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
        s.sigma.scale =
            SpdMatrix::new(symmetrize(&b * b.transpose() + DMatrix::identity(m, m))).unwrap();
        s.sigma.dof = m as f64 + 6.0 + 5.0 * t as f64;
        s.seen = 5 * t;
        s.tau = InvGammaParams {
            shape: 6.0,
            rate: 1.7,
        };
        (h, s)
    }

    #[test]
    fn three_routes_agree() {
        for seed in 0..10u64 {
            let m = 1 + (seed as usize % 3);
            let (_, s) = random_state(4, m, 2, seed);
            let mut rng = seeded_rng(seed + 50);
            let e0 = DVector::from_fn(4, |k, _| if k == 0 { 1.0 } else { rng.random::<f64>() });
            let y0 = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let comp = &s.components[0];
            let sigma_inv = SpdMatrix::new(symmetrize(s.sigma.scale.inverse())).unwrap();
            let t = build_component(&e0, comp, &s, &sigma_inv, 0).unwrap();
            let a = direct_determinant_logpdf(&y0, &e0, comp, &s).unwrap();
            let b = determinant_lemma_logpdf(&y0, &e0, comp, &s).unwrap();
            let c = t.logpdf(&y0);
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            assert_abs_diff_eq!(b, c, epsilon = 1e-8);
        }
    }

    #[test]
    fn derivation_location_matches() {
        let (_, s) = random_state(3, 2, 1, 4);
        let e0 = DVector::from_vec(vec![1.0, 0.2, -0.5]);
        let comp = &s.components[0];
        let d = component_diagnostics(&e0, comp, &s, 0).unwrap();
        assert!((d.location - comp.beta_hat.tr_mul(&e0)).amax() < 1e-9);
    }

    #[test]
    fn derivation_shape_matches_in_one_dimension() {
        let (_, s) = random_state(3, 1, 1, 5);
        let e0 = DVector::from_vec(vec![1.0, 0.7, 0.1]);
        let comp = &s.components[0];
        let d = component_diagnostics(&e0, comp, &s, 0).unwrap();
        let sigma_inv = SpdMatrix::new(symmetrize(s.sigma.scale.inverse())).unwrap();
        let t = build_component(&e0, comp, &s, &sigma_inv, 0).unwrap();
        let printed_shape = d.a_mat[(0, 0)] / d.shape_factor;
        assert_abs_diff_eq!(printed_shape, t.shape.values()[(0, 0)], epsilon = 1e-10);
    }

    #[test]
    fn t_cdf_matches_reference_and_resolves_center() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for dof in [0.5, 1.0, 3.0, 12.0, 150.0] {
            let r = StudentsT::new(0.0, 1.0, dof).unwrap();
            for z in [-40.0, -3.0, -1.0, -0.2, 0.0, 0.2, 1.0, 3.0, 40.0] {
                assert_abs_diff_eq!(student_t_cdf(z, dof), r.cdf(z), epsilon = 1e-12);
            }
        }
        // Density at 0 of t_3 is 2/(π√3).
        let slope = (student_t_cdf(1e-9, 3.0) - 0.5) / 1e-9;
        assert_abs_diff_eq!(slope, 2.0 / (std::f64::consts::PI * 3f64.sqrt()), epsilon = 1e-6);
    }

    #[test]
    fn weights_sum_to_one_when_full() {
        let (h, s) = random_state(2, 1, 3, 6);
        let mix = predictive_mixture(&DVector::from_vec(vec![1.0, 0.5]), &s, &h).unwrap();
        assert_abs_diff_eq!(mix.weights.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_component_mean_and_median() {
        let (mut h, mut s) = random_state(2, 2, 1, 7);
        h.alpha = 1.0;
        s.components[0].mass = s.seen as f64;
        let e0 = DVector::from_vec(vec![1.0, -0.3]);
        let mix = predictive_mixture(&e0, &s, &h).unwrap();
        let loc = s.components[0].beta_hat.tr_mul(&e0);
        assert!((mix.mean().unwrap() - &loc).amax() < 1e-14);
        for l in 0..2 {
            assert_abs_diff_eq!(mix.marginal_quantile(l, 0.5).unwrap(), loc[l], epsilon = 1e-8);
        }
    }

    #[test]
    fn mirrored_state_mirrors_locations() {
        let (h, s) = random_state(3, 2, 2, 8);
        let mut mirrored = s.clone();
        for c in &mut mirrored.components {
            c.beta_hat = -&c.beta_hat;
        }
        let e0 = DVector::from_vec(vec![1.0, 0.1, 0.9]);
        let a = predictive_mixture(&e0, &s, &h).unwrap();
        let b = predictive_mixture(&e0, &mirrored, &h).unwrap();
        for (x, y) in a.components.iter().zip(&b.components) {
            assert_eq!(x.location, -&y.location);
        }
        let y = DVector::from_vec(vec![0.3, -0.4]);
        assert_abs_diff_eq!(a.logpdf(&y).unwrap(), b.logpdf(&-y).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn cdf_limits_monotone_and_roundtrip() {
        let (h, s) = random_state(3, 2, 3, 9);
        let mix = predictive_mixture(&DVector::from_vec(vec![1.0, 0.2, 0.3]), &s, &h).unwrap();
        for l in 0..2 {
            let unit = mix.components.iter().map(|c| c.marginal_scale[l]).fold(0.0, f64::max);
            let c = mix.center(l);
            assert!(mix.marginal_cdf(l, c - 1e6 * unit).unwrap() < 1e-12);
            assert!(mix.marginal_cdf(l, c + 1e6 * unit).unwrap() > 1.0 - 1e-12);
            let mut last = 0.0;
            for k in -200..=200 {
                let f = mix.marginal_cdf(l, c + k as f64 * unit / 20.0).unwrap();
                assert!(f >= last);
                last = f;
            }
            let mut rng = seeded_rng(l as u64);
            for _ in 0..20 {
                let v = c + unit * rng.sample::<f64, _>(StandardNormal) * 2.0;
                let u = mix.marginal_cdf(l, v).unwrap();
                let q = mix.marginal_quantile(l, u).unwrap();
                assert_abs_diff_eq!(mix.marginal_cdf(l, q).unwrap(), u, epsilon = 1e-10);
                assert_abs_diff_eq!(q, v, epsilon = 1e-8);
            }
        }
        assert!(mix.marginal_quantile(0, 0.0).is_err());
        assert!(mix.marginal_quantile(0, 1.0).is_err());
        assert!(mix.marginal_cdf(2, 0.0).is_err());
    }

    #[test]
    fn sampler_matches_marginal_cdf() {
        let (h, s) = random_state(3, 2, 2, 13);
        let mix = predictive_mixture(&DVector::from_vec(vec![1.0, 0.3, -0.2]), &s, &h).unwrap();
        let mut rng = seeded_rng(14);
        let draws: Vec<DVector<f64>> = (0..20_000).map(|_| mix.sample(&mut rng)).collect();
        for l in 0..2 {
            for u in [0.1, 0.5, 0.9] {
                let q = mix.marginal_quantile(l, u).unwrap();
                let frac = draws.iter().filter(|d| d[l] <= q).count() as f64 / draws.len() as f64;
                // 4 binomial standard errors
                assert!((frac - u).abs() < 4.0 * (u * (1.0 - u) / 20_000.0).sqrt());
            }
        }
    }

    #[test]
    fn relabeling_leaves_density_unchanged() {
        let (h, s) = random_state(3, 2, 3, 11);
        let mut swapped = s.clone();
        swapped.components.swap(0, 2);
        swapped.omegas.swap(0, 2);
        let e0 = DVector::from_vec(vec![1.0, -0.4, 0.6]);
        let a = predictive_mixture(&e0, &s, &h).unwrap();
        let b = predictive_mixture(&e0, &swapped, &h).unwrap();
        for y in [vec![0.0, 0.0], vec![1.5, -2.0], vec![-0.3, 0.8]] {
            let y = DVector::from_vec(y);
            assert_abs_diff_eq!(a.logpdf(&y).unwrap(), b.logpdf(&y).unwrap(), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            a.marginal_cdf(1, 0.2).unwrap(),
            b.marginal_cdf(1, 0.2).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn unoccupied_components_use_prior() {
        let (h, mut s) = random_state(2, 1, 3, 10);
        s.components[2].mass = 0.0;
        s.components[2].beta_hat = DMatrix::from_element(2, 1, 100.0);
        let mix = predictive_mixture(&DVector::from_vec(vec![1.0, 0.5]), &s, &h).unwrap();
        assert_eq!(mix.components[2].location[0], 0.0);
    }

    #[test]
    fn normalizes_in_one_dimension() {
        let mut rng = seeded_rng(12);
        let n = 60;
        let e = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let y = DMatrix::from_fn(n, 1, |i, _| {
            2.0 * e[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        let h = Hyperparameters::with_defaults(1, 1, 3, 1.0);
        let fit = fit_online(&e, &y, &h, OnlineOptions::default()).unwrap();
        let mix = predictive_mixture(&DVector::from_vec(vec![1.0, 0.4]), &fit.state, &h).unwrap();
        let c = mix.center(0);
        let (lo, hi, steps) = (c - 200.0, c + 200.0, 400_000);
        let dx = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for k in 0..=steps {
            let v = lo + k as f64 * dx;
            let f = mix.logpdf(&DVector::from_element(1, v)).unwrap().exp();
            total += if k == 0 || k == steps { 0.5 * f } else { f };
        }
        assert_abs_diff_eq!(total * dx, 1.0, epsilon = 1e-3);
    }
}
