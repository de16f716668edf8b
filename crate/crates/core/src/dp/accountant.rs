//! Rényi accountant for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};

use super::DpError;

/// Integer Rényi orders used unless a ledger is built with its own.
pub const DEFAULT_ORDERS: std::ops::RangeInclusive<u32> = 2..=64;

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);

/// `(ε, δ, C, σ, q, T)`. Either `noise_multiplier` or `epsilon_target` may be
/// unset; [`PrivacySpec::resolve`] derives σ from ε. `clip_norm = ∞` together
/// with `σ = 0` is the non-private setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon_target: Option<f64>,
    pub delta: f64,
    #[serde(with = "extended_f64")]
    pub clip_norm: f64,
    pub noise_multiplier: Option<f64>,
    pub sampling_rate: f64,
    pub steps: usize,
}

impl PrivacySpec {
    pub fn non_private(sampling_rate: f64, steps: usize) -> Self {
        Self {
            epsilon_target: None,
            delta: 1e-5,
            clip_norm: f64::INFINITY,
            noise_multiplier: Some(0.0),
            sampling_rate,
            steps,
        }
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::InvalidSpec(format!("delta {} not in (0, 1)", self.delta)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(DpError::InvalidSpec(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(DpError::InvalidRate(self.sampling_rate));
        }
        if let Some(e) = self.epsilon_target {
            if !(e > 0.0) {
                return Err(DpError::InvalidSpec(format!("epsilon target {e} must be positive")));
            }
        }
        if let Some(s) = self.noise_multiplier {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(DpError::InvalidSpec(format!("noise multiplier {s} is invalid")));
            }
            if s > 0.0 && !self.clip_norm.is_finite() {
                return Err(DpError::InvalidSpec("noise needs a finite clip norm".into()));
            }
        }
        Ok(())
    }

    /// Fill in σ by calibration when only ε is given.
    pub fn resolve(mut self) -> Result<Self, DpError> {
        self.validate()?;
        if self.noise_multiplier.is_none() {
            let eps = self.epsilon_target.ok_or(DpError::UnresolvedSpec)?;
            self.noise_multiplier = Some(calibrate_sigma(
                eps,
                self.delta,
                self.sampling_rate,
                self.steps,
            )?);
        }
        Ok(self)
    }

    pub fn sigma(&self) -> Result<f64, DpError> {
        self.noise_multiplier.ok_or(DpError::UnresolvedSpec)
    }
}

fn ln_binom(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// Per-step RDP of the Poisson-subsampled Gaussian at integer order `alpha`:
/// `1/(α−1) · ln Σₖ C(α,k) (1−q)^(α−k) q^k exp(k(k−1)/(2σ²))`, summed in
/// log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64, DpError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DpError::InvalidRate(q));
    }
    if alpha < 2 {
        return Err(DpError::InvalidSpec(format!("order {alpha} must be at least 2")));
    }
    if !(sigma >= 0.0) {
        return Err(DpError::InvalidSpec(format!("noise multiplier {sigma} is invalid")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let (ln_q, ln_1mq) = (q.ln(), (1.0 - q).ln());
    let terms: Vec<f64> = (0..=alpha)
        .filter(|&k| q < 1.0 || k == alpha)
        .map(|k| {
            let kf = k as f64;
            let base = if k == alpha { 0.0 } else { (alpha - k) as f64 * ln_1mq };
            ln_binom(alpha, k) + base + kf * ln_q + kf * (kf - 1.0) / (2.0 * sigma * sigma)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok((lse / (alpha - 1) as f64).max(0.0))
}

/// Accumulated RDP over integer orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub orders: Vec<u32>,
    #[serde(with = "extended_f64_vec")]
    pub rdp: Vec<f64>,
    pub steps: usize,
    pub spec: PrivacySpec,
}

impl PrivacyLedger {
    pub fn new(spec: PrivacySpec) -> Self {
        Self::with_orders(spec, DEFAULT_ORDERS.collect())
    }

    pub fn with_orders(spec: PrivacySpec, orders: Vec<u32>) -> Self {
        let rdp = vec![0.0; orders.len()];
        Self {
            orders,
            rdp,
            steps: 0,
            spec,
        }
    }

    /// RDP of one step at every order.
    pub fn step_cost(&self, q: f64, sigma: f64) -> Result<Vec<f64>, DpError> {
        self.orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect()
    }

    pub fn advance(&mut self, cost: &[f64]) {
        for (r, c) in self.rdp.iter_mut().zip(cost) {
            *r += c;
        }
        self.steps += 1;
    }

    pub fn step(&mut self, q: f64, sigma: f64) -> Result<(), DpError> {
        let cost = self.step_cost(q, sigma)?;
        self.advance(&cost);
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        eps_from_ledger(self, self.spec.delta)
    }
}

/// `min_α rdp(α) + ln(1/δ)/(α−1)`.
pub fn eps_from_ledger(ledger: &PrivacyLedger, delta: f64) -> f64 {
    eps_from_rdp(&ledger.orders, &ledger.rdp, delta)
}

fn eps_from_rdp(orders: &[u32], rdp: &[f64], delta: f64) -> f64 {
    let log_inv_delta = (1.0 / delta).ln();
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| r + log_inv_delta / (a - 1) as f64)
        .fold(f64::INFINITY, f64::min)
}

fn eps_after(sigma: f64, delta: f64, q: f64, steps: usize) -> Result<f64, DpError> {
    let orders: Vec<u32> = DEFAULT_ORDERS.collect();
    let rdp = orders
        .iter()
        .map(|&a| Ok(steps as f64 * rdp_subsampled_gaussian(q, sigma, a)?))
        .collect::<Result<Vec<f64>, DpError>>()?;
    Ok(eps_from_rdp(&orders, &rdp, delta))
}

/// Smallest σ in the bracket (to bisection precision) whose ε after `steps`
/// lies in `[ε·(1−1e-3), ε]`.
pub fn calibrate_sigma(epsilon_target: f64, delta: f64, q: f64, steps: usize) -> Result<f64, DpError> {
    if !(epsilon_target > 0.0) {
        return Err(DpError::InvalidSpec(format!(
            "epsilon target {epsilon_target} must be positive"
        )));
    }
    if steps == 0 {
        return Err(DpError::InvalidSpec("calibration needs at least one step".into()));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let out_of_range = DpError::CalibrationOutOfRange {
        target: epsilon_target,
        lo,
        hi,
    };
    let accept = |e: f64| e <= epsilon_target && e >= epsilon_target * (1.0 - 1e-3);
    let e_lo = eps_after(lo, delta, q, steps)?;
    if e_lo <= epsilon_target {
        return if accept(e_lo) { Ok(lo) } else { Err(out_of_range) };
    }
    if eps_after(hi, delta, q, steps)? > epsilon_target {
        return Err(out_of_range);
    }
    for _ in 0..200 {
        let e_hi = eps_after(hi, delta, q, steps)?;
        if accept(e_hi) {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps_after(mid, delta, q, steps)? > epsilon_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(out_of_range)
}

/// JSON has no infinity; write it as the string "inf".
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else if v < 0.0 {
            Repr::Text("-inf".into())
        } else {
            Repr::Text("nan".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("unexpected number text {s:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

mod extended_f64_vec {
    use super::extended_f64::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}
